from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import tyro

from utils.types import LogLevel


@dataclass(frozen=True, kw_only=True)
class CommonArgs:
    # log level
    logging: LogLevel = "INFO"

    # overrides `fl.seed` of the experiment config when given
    seed: int | None=None


@dataclass(frozen=True, kw_only=True)
class RunArgs:
    # experiment config (YAML), unspecified keys take their defaults
    config: Path

    # rounds.csv, run.log, config.yaml, checkpoints and feature tables are written here
    out: Path

    # write into a non-empty output directory
    force: bool=False

    common: tyro.conf.OmitArgPrefixes[CommonArgs]=CommonArgs()


@dataclass(frozen=True, kw_only=True)
class SweepArgs:
    config: Path

    # each value gets its own run directory `<out>/<key>=<value>`, plus `<out>/sweep.csv`
    out: Path

    # dotted config key to vary, e.g. attack.trigger_size
    key: str

    # values, parsed as YAML scalars
    values: Tuple[str, ...]

    force: bool=False

    common: tyro.conf.OmitArgPrefixes[CommonArgs]=CommonArgs()


@dataclass(frozen=True, kw_only=True)
class CheckArgs:
    # scale of the randomized suites: number of random networks / aggregator instances / projection
    # triples
    gradient_nets: int=20
    aggregator_instances: int=200
    rfa_instances: int=20
    projection_triples: int=10_000
    robustness_trials: int=100

    common: tyro.conf.OmitArgPrefixes[CommonArgs]=CommonArgs()


@dataclass(frozen=True, kw_only=True)
class ReplayArgs:
    # output directory of a finished `run`
    run_dir: tyro.conf.Positional[Path]

    # number of test images in the SSIM comparison panel
    panel: int=200

    common: tyro.conf.OmitArgPrefixes[CommonArgs]=CommonArgs()
