#!/usr/bin/env python3

from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Tuple
from typing_extensions import assert_never

import numpy as np
import tyro

from utils.common import setup_logging
from utils.data import dirichlet_partition, gen_synthetic, load_idx, write_idx


@dataclass(frozen=True, kw_only=True)
class ExportSynthetic:
    # IDX image and label files are written here, existing files are overwritten with a warning
    images: Path
    labels: Path

    n_classes: int=10
    n: int=2000
    # samples are stored as single-channel images of this shape
    image_shape: Tuple[int, int]=(8, 8)
    spread: float=0.1
    seed: int=0


@dataclass(frozen=True, kw_only=True)
class PartitionStats:
    # IDX pair to partition, a synthetic set is generated when omitted
    images: Path | None=None
    labels: Path | None=None

    n_agents: int=20
    alpha: float=0.7
    seed: int=0


CmdExportSynthetic = Annotated[
    ExportSynthetic,
    tyro.conf.subcommand(
        name="export-synthetic",
        prefix_name=False,
        description="write a synthetic dataset as an IDX image/label pair",
    ),
]
CmdPartitionStats = Annotated[
    PartitionStats,
    tyro.conf.subcommand(
        name="partition-stats",
        prefix_name=False,
        description="print per-agent class histograms of a Dirichlet partition",
    ),
]


Args = CmdExportSynthetic | CmdPartitionStats


def main(args: Args) -> int:
    logger = setup_logging("utils", level="DEBUG")
    if isinstance(args, ExportSynthetic):
        for path in (args.images, args.labels):
            if path.is_dir():
                logger.error("output path '{}' is a directory".format(path))
                return 1
            if path.exists():
                logger.warn("output path '{}' exists and will be overwritten".format(path))
        H, W = args.image_shape
        ds = gen_synthetic(args.n_classes, args.n, H * W, args.spread, args.seed, image_shape=args.image_shape)
        write_idx(ds, args.images, args.labels)
        logger.info("{} samples of {}x{} ({} classes) written to '{}' and '{}'".format(
            ds.size, H, W, ds.n_classes, args.images, args.labels,
        ))

    elif isinstance(args, PartitionStats):
        if (args.images is None) != (args.labels is None):
            logger.error("--images and --labels go together")
            return 1
        if args.images is None:
            ds = gen_synthetic(10, 2000, 64, 0.1, args.seed)
        else:
            ds = load_idx(args.images, args.labels)
        plan = dirichlet_partition(ds, args.n_agents, alpha=args.alpha, seed=args.seed)
        hist = plan.class_histogram(ds.labels, ds.n_classes)
        logger.info("agent  total  " + " ".join("{:>5}".format("c{}".format(c)) for c in range(ds.n_classes)))
        for i, row in enumerate(hist):
            logger.info("{:>5}  {:>5}  ".format(i, int(row.sum())) + " ".join("{:>5}".format(int(v)) for v in row))
        with np.errstate(divide="ignore"):
            spread = hist.max(axis=0) / np.maximum(hist.min(axis=0), 1)
        logger.info("max/min agent share per class: {}".format(" ".join("{:.1f}".format(v) for v in spread)))
        if plan.seed != args.seed:
            logger.warn("the draw with seed {} left an agent empty, redrawn with seed {}".format(args.seed, plan.seed))

    else:
        assert_never(args)
    return 0


if __name__ == "__main__":
    args = tyro.cli(Args)
    exit(main(args))
