import functools
import logging
import math
from pathlib import Path
import random
from typing import TYPE_CHECKING, Iterable, get_args

import colorama
from colorama import Back, Fore, Style
import jax
import jax.random as jran
import numpy as np
from tqdm import tqdm as tqdm_original

from ._constants import tqdm_format

if TYPE_CHECKING:
    from .types import LogLevel, RoundReport


class NumericFailure(RuntimeError):
    def __init__(self, stage: str, epoch: int, detail: str="non-finite loss") -> None:
        super().__init__("numeric failure in stage '{}' at epoch {}: {}".format(stage, epoch, detail))
        self.stage = stage
        self.epoch = epoch


class IdxFormatError(ValueError):
    def __init__(self, path: str | Path, field: str, detail: str) -> None:
        super().__init__("malformed IDX file '{}': field '{}': {}".format(path, field, detail))
        self.path = Path(path)
        self.field = field


class ConfigError(ValueError):
    def __init__(self, key: str, detail: str) -> None:
        super().__init__("{}: {}".format(key, detail))
        self.key = key


class RoundFailure(RuntimeError):
    def __init__(self, round: int, cause: BaseException) -> None:
        super().__init__("round {} failed: {}: {}".format(round, type(cause).__name__, cause))
        self.round = round


class Logger(logging.Logger):
    def __init__(self, name: str, level: "int | LogLevel") -> None:
        super().__init__(name, level)

    def log_round(self, report: "RoundReport") -> None:
        def fmt(value: float) -> str:
            return "n/a" if math.isnan(value) else "{:.4f}".format(value)
        self.info("round#{:04d}: benign_acc={} backdoor_acc={} accepted={}/{}{}".format(
            report.round,
            fmt(report.benign_acc),
            fmt(report.backdoor_acc),
            len(report.accepted),
            len(report.roster),
            "" if report.malicious_id is None else " (malicious agent {})".format(report.malicious_id),
        ))
        if report.malicious_id is not None:
            self.debug("round#{:04d}: malicious_norm={:.4e} mean_benign_norm={:.4e} cos={:.4f} euclid={:.4e}".format(
                report.round,
                report.malicious_norm,
                report.mean_benign_norm,
                report.cosine_sim,
                report.euclid_dist,
            ))


tqdm = functools.partial(tqdm_original, bar_format=tqdm_format)


def mkValueError(desc, value, type):
    variants = get_args(type)
    assert value not in variants
    return ValueError("Unexpected {}: '{}', expected one of [{}]".format(desc, value, "|".join(variants)))


def jit_jaxfn_with(
        # kwargs copied from `jax.jit` source
        static_argnums: int | Iterable[int] | None = None,
        static_argnames: str | Iterable[str] | None = None,
        donate_argnums: int | Iterable[int] = (),
    ):
    return functools.partial(
        jax.jit,
        static_argnums=static_argnums,
        static_argnames=static_argnames,
        donate_argnums=donate_argnums,
    )


def setup_logging(
    name: str,
    /,
    file: str | Path | None=None,
    level: "LogLevel"="INFO",
    file_level: "LogLevel"="DEBUG",
) -> Logger:
    colorama.just_fix_windows_console()

    class _formatter(logging.Formatter):
        def __init__(self, datefmt, rich_color: bool):
            fore = {
                "blue": Fore.BLUE if rich_color else "[",
                "green": Fore.GREEN if rich_color else "[",
                "yellow": Fore.YELLOW if rich_color else "[",
                "red": Fore.RED if rich_color else "[",
                "black": Fore.BLACK if rich_color else "[",
            }
            back = {
                "red": Back.RED if rich_color else "[",
                "yellow": Back.YELLOW if rich_color else "[",
            }
            style = {
                "bright": Style.BRIGHT if rich_color else "[",
                "reset_all": Style.RESET_ALL if rich_color else "]",
            }

            pathfmt = "%(module)s::%(funcName)s"
            fmt = "| %(asctime)s.%(msecs)03dZ LVL {bold}{pathfmt}{reset}: %(message)s".format(
                bold=style["bright"],
                pathfmt=pathfmt,
                reset=style["reset_all"],
            )
            formats = {
                logging.DEBUG: fmt.replace("LVL", fore["blue"] + "DEBUG" + style["reset_all"]),
                logging.INFO: fmt.replace("LVL", " " + fore["green"] + "INFO" + style["reset_all"]),
                logging.WARN: fmt.replace("LVL", " " + back["yellow"] + fore["black"] + "WARN" + style["reset_all"]),
                logging.ERROR: fmt.replace("LVL", back["red"] + fore["black"] + "ERROR" + style["reset_all"]),
                logging.CRITICAL: fmt.replace("LVL", " " + back["red"] + fore["black"] + style["bright"] + "CRIT" + style["reset_all"]),
            }
            self.formatters = {
                level: logging.Formatter(fmt=format, datefmt=datefmt)
                for level, format in formats.items()
            }

        def format(self, record):
            return self.formatters.get(record.levelno).format(record)

    datefmt = "%Y-%m-%dT%T"

    logger = Logger(name=name, level=level)
    logger.propagate = False

    # console handler
    ch = logging.StreamHandler()
    ch.setLevel(level)
    ch.setFormatter(_formatter(datefmt=datefmt, rich_color=True))
    logger.addHandler(ch)
    logger.setLevel(level)

    # file handler
    if file is not None:
        fh = logging.FileHandler(filename=file, encoding="utf-8")
        fh.setLevel(file_level)
        fh.setFormatter(_formatter(datefmt=datefmt, rich_color=False))
        logger.addHandler(fh)
        def loglevel2int(log_level: "LogLevel") -> int:
            return getattr(logging, log_level)
        logger.setLevel(min(loglevel2int(level), loglevel2int(file_level)))

    # logger complains about `warn` being deprecated with another warning
    logger.warn = logger.warning
    return logger


def set_deterministic(seed: int) -> jax.Array:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    return jran.PRNGKey(seed)
