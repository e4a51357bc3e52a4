import csv
import math
from pathlib import Path
from typing import Any, Dict, Sequence

import jax.random as jran
import numpy as np
import pydantic
import yaml

from app.fl.simulate import SimulationResult, run_experiment
from models.attacks import apply_patch, patch_fits
from models.classifiers import make_classifier_from_config
from models.generators import make_generator
from models import trigger
from utils import common, data, metrics
from utils._constants import ROUNDS_CSV_HEADER
from utils.args import ReplayArgs, RunArgs, SweepArgs
from utils.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from utils.types import AttackTargeting, ExperimentConfig, FeatureDiagnostic, LogLevel, RoundReport

_config_adapter = pydantic.TypeAdapter(ExperimentConfig)

# poisoned samples in the feature panel
FEATURE_PANEL = 200


def validate_config(raw: Any) -> ExperimentConfig:
    "raises `ConfigError` naming the offending dotted key"
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise common.ConfigError("<root>", "expected a mapping of config blocks, got {}".format(type(raw).__name__))
    try:
        return _config_adapter.validate_python(raw)
    except pydantic.ValidationError as e:
        err = e.errors()[0]
        cause = err.get("ctx", {}).get("error")
        if isinstance(cause, common.ConfigError):
            raise cause from e
        key = ".".join(str(part) for part in err["loc"]) or "<root>"
        raise common.ConfigError(key, err["msg"]) from e


def parse_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise common.ConfigError("<file>", "'{}' is not valid YAML: {}".format(path, e)) from e
    return validate_config(raw)


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return _config_adapter.dump_python(cfg, mode="json")


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def override(cfg: ExperimentConfig, key: str, value: Any) -> ExperimentConfig:
    "a copy of `cfg` with the dotted `key` set to `value`, validated again"
    raw = config_to_dict(cfg)
    *parents, leaf = key.split(".")
    node = raw
    for part in parents:
        if not isinstance(node, dict) or part not in node:
            raise common.ConfigError(key, "no such config key")
        node = node[part]
    if not isinstance(node, dict) or leaf not in node:
        raise common.ConfigError(key, "no such config key")
    node[leaf] = value
    return validate_config(raw)


def with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    return cfg if seed is None else cfg.replace(fl=cfg.fl.replace(seed=seed))


def write_rounds_csv(path: str | Path, reports: Sequence[RoundReport], with_wall_time: bool) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ROUNDS_CSV_HEADER)
        for report in reports:
            writer.writerow(report.csv_row(with_wall_time))


def _out_dir_is_free(out: Path, force: bool, logger: common.Logger) -> bool:
    if out.exists() and not out.is_dir():
        logger.error("output path '{}' exists and is not a directory".format(out))
        return False
    if out.is_dir() and any(out.iterdir()) and not force:
        logger.error("output directory '{}' is not empty, pass --force to write into it anyway".format(out))
        return False
    return True


def feature_panel(cfg: ExperimentConfig, result: SimulationResult) -> FeatureDiagnostic:
    "feature diagnostic of the final global model on up to FEATURE_PANEL triggered non-target test samples"
    test = result.test
    target = cfg.attack.target_label
    if cfg.attack.type == "none":
        poisoned = test.images[:0]
        poisoned_labels = test.labels[:0]
    else:
        targeting = AttackTargeting(target_label=target, n_classes=test.n_classes)
        idcs = metrics.backdoor_eligible(test, targeting, exclude_target=True)[:FEATURE_PANEL]
        triggerer = result.generator if cfg.attack.type == "fta" else cfg.attack.patch
        poisoned = metrics.apply_triggerer(triggerer, test.images[idcs])
        poisoned_labels = test.labels[idcs]
    return metrics.feature_diagnostic(result.global_net, test, poisoned, poisoned_labels, target)


def write_feature_tables(out: Path, cfg: ExperimentConfig, result: SimulationResult) -> None:
    diag = feature_panel(cfg, result)
    metrics.write_features_csv(out.joinpath("features.csv"), diag)
    metrics.write_centroids_csv(out.joinpath("centroids.csv"), diag)


def run_into(cfg: ExperimentConfig, out: Path, level: LogLevel, name: str="fl.run") -> int:
    out.mkdir(parents=True, exist_ok=True)
    out.joinpath("config.yaml").write_text(serialize_config(cfg), encoding="utf-8")
    logger = common.setup_logging(name, file=out.joinpath("run.log"), level=level, file_level="DEBUG")
    logger.info("configuration saved to '{}'".format(out.joinpath("config.yaml")))

    try:
        result = run_experiment(cfg, logger)
    except common.RoundFailure as e:
        logger.error(str(e))
        return 3
    except Exception as e:
        logger.error("setup failed: {}: {}".format(type(e).__name__, e))
        return 3

    try:
        write_rounds_csv(out.joinpath("rounds.csv"), result.reports, cfg.fl.record_wall_time)
        save_checkpoint(out.joinpath("global.ckpt"), "global", result.global_net.flat_params)
        if result.generator is not None:
            save_checkpoint(out.joinpath("generator.ckpt"), "gen", result.generator.flat_params)
        write_feature_tables(out, cfg, result)
    except Exception as e:
        logger.error("failed to write results into '{}': {}: {}".format(out, type(e).__name__, e))
        return 4

    if len(result.reports) > 0:
        last = result.reports[-1]
        logger.info("finished {} rounds: benign_acc={:.4f}{}".format(
            len(result.reports),
            last.benign_acc,
            "" if math.isnan(last.backdoor_acc) else " backdoor_acc={:.4f}".format(last.backdoor_acc),
        ))
    logger.info("results written to '{}'".format(out))
    return 0


def _load(config: Path, seed: int | None, logger: common.Logger) -> ExperimentConfig | None:
    try:
        return with_seed(parse_config(config), seed)
    except common.ConfigError as e:
        logger.error("invalid config '{}': {}".format(config, e))
    except OSError as e:
        logger.error("cannot read config '{}': {}".format(config, e))
    return None


def cmd_run(args: RunArgs, logger: common.Logger) -> int:
    cfg = _load(args.config, args.common.seed, logger)
    if cfg is None:
        return 2
    if not _out_dir_is_free(args.out, args.force, logger):
        return 1
    return run_into(cfg, args.out, args.common.logging)


def cmd_sweep(args: SweepArgs, logger: common.Logger) -> int:
    """One run per value of a single config key, each into `<out>/<key>=<value>`, and a summary table
    `<out>/sweep.csv` of the final round of every run."""
    cfg = _load(args.config, args.common.seed, logger)
    if cfg is None:
        return 2
    if not _out_dir_is_free(args.out, args.force, logger):
        return 1
    try:
        variants = [(value, override(cfg, args.key, yaml.safe_load(value))) for value in args.values]
    except common.ConfigError as e:
        logger.error("invalid sweep: {}".format(e))
        return 2

    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value, variant in variants:
        run_dir = args.out.joinpath("{}={}".format(args.key, value))
        logger.info("sweep: {}={} -> '{}'".format(args.key, value, run_dir))
        status = run_into(variant, run_dir, args.common.logging, name="fl.sweep")
        if status != 0:
            logger.error("sweep: run {}={} failed with status {}".format(args.key, value, status))
            return status
        with open(run_dir.joinpath("rounds.csv"), encoding="utf-8", newline="") as f:
            last = list(csv.DictReader(f))[-1:] or [{}]
        rows.append((value, last[0].get("benign_acc", ""), last[0].get("backdoor_acc", ""), last[0].get("cosine_sim", "")))

    with open(args.out.joinpath("sweep.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow((args.key, "benign_acc", "backdoor_acc", "cosine_sim"))
        writer.writerows(rows)
    logger.info("sweep summary written to '{}'".format(args.out.joinpath("sweep.csv")))
    return 0


def cmd_replay(args: ReplayArgs, logger: common.Logger) -> int:
    """Re-evaluate the checkpoints of a finished run: benign and backdoor accuracy of the final global
    model and, on image data, the SSIM panel of generator- vs patch-triggered test samples."""
    cfg = _load(args.run_dir.joinpath("config.yaml"), args.common.seed, logger)
    if cfg is None:
        return 2

    try:
        train, test = data.load_datasets(cfg.dataset, seed=cfg.fl.seed)
    except (OSError, ValueError) as e:
        logger.error("cannot load the datasets of '{}': {}: {}".format(args.run_dir, type(e).__name__, e))
        return 3
    KEY = common.set_deterministic(cfg.fl.seed)
    KEY, key_model, key_gen = jran.split(KEY, 3)
    net, _ = make_classifier_from_config(key_model, cfg.model, train.sample_shape, train.n_classes)
    try:
        _, params = load_checkpoint(args.run_dir.joinpath("global.ckpt"), "global")
        if params.shape[0] != net.n_params:
            raise CheckpointError(args.run_dir.joinpath("global.ckpt"), "{} parameters, the configured model has {}".format(
                params.shape[0], net.n_params,
            ))
        net = net.with_flat_params(params)
        generator = None
        if cfg.attack.type == "fta":
            generator = make_generator(key_gen, train.sample_shape, cfg.attack.generator.hidden, cfg.attack.trigger_size)
            _, xi = load_checkpoint(args.run_dir.joinpath("generator.ckpt"), "gen")
            if xi.shape[0] != generator.flat_params.shape[0]:
                raise CheckpointError(args.run_dir.joinpath("generator.ckpt"), "parameter count does not match the configured generator")
            generator = generator.with_flat_params(xi)
    except (OSError, CheckpointError) as e:
        logger.error(str(e))
        return 2

    rows = [("benign_acc", metrics.benign_accuracy(net, test))]
    if cfg.attack.type != "none":
        targeting = AttackTargeting(target_label=cfg.attack.target_label, n_classes=test.n_classes)
        triggerer = generator if cfg.attack.type == "fta" else cfg.attack.patch
        rows.append(("backdoor_acc", metrics.backdoor_accuracy(
            net, test, triggerer, targeting, exclude_target=cfg.attack.ba_exclude_target,
        )))

    if test.is_image and patch_fits(cfg.attack.patch, test.sample_shape):
        panel = test.images[:args.panel]
        patched = apply_patch(panel, cfg.attack.patch)
        ssim_patch = np.asarray([metrics.ssim(x, y) for x, y in zip(panel, patched)])
        rows.append(("ssim_patch", float(ssim_patch.mean())))
        if generator is not None:
            triggered = trigger.apply_batched(generator, panel)
            ssim_fta = np.asarray([metrics.ssim(x, y) for x, y in zip(panel, triggered)])
            rows.append(("ssim_fta", float(ssim_fta.mean())))
            rows.append(("ssim_fta_above_patch", float((ssim_fta > ssim_patch).mean())))
    else:
        logger.warn("test samples are not images the patch fits into, skipping the SSIM panel")

    out = args.run_dir.joinpath("replay.csv")
    with open(out, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("metric", "value"))
        for name, value in rows:
            logger.info("{}={}".format(name, "n/a" if math.isnan(value) else "{:.6f}".format(value)))
            writer.writerow((name, "" if math.isnan(value) else "{:.6f}".format(value)))
    logger.info("replay results written to '{}'".format(out))
    return 0
