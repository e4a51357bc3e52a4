#!/usr/bin/env python3

from typing import Annotated
from typing_extensions import assert_never

import tyro

from utils.args import CheckArgs, ReplayArgs, RunArgs, SweepArgs
from utils import common


CmdRun = Annotated[
    RunArgs,
    tyro.conf.subcommand(
        name="run",
        prefix_name=False,
        description="run one experiment and write its results into an output directory",
    ),
]
CmdSweep = Annotated[
    SweepArgs,
    tyro.conf.subcommand(
        name="sweep",
        prefix_name=False,
        description="run one experiment per value of a single config key",
    ),
]
CmdCheck = Annotated[
    CheckArgs,
    tyro.conf.subcommand(
        name="check",
        prefix_name=False,
        description="run the oracle and invariant self-checks",
    ),
]
CmdReplay = Annotated[
    ReplayArgs,
    tyro.conf.subcommand(
        name="replay",
        prefix_name=False,
        description="re-evaluate the checkpoints of a finished run",
    ),
]


MainArgsType = CmdRun | CmdSweep | CmdCheck | CmdReplay


def main(args: MainArgsType) -> int:
    logger = common.setup_logging("fl", level=args.common.logging)

    if isinstance(args, RunArgs):
        from app.fl.run import cmd_run
        return cmd_run(args, logger)
    elif isinstance(args, SweepArgs):
        from app.fl.run import cmd_sweep
        return cmd_sweep(args, logger)
    elif isinstance(args, CheckArgs):
        from app.fl.check import cmd_check
        KEY = common.set_deterministic(args.common.seed if args.common.seed is not None else 0)
        return cmd_check(KEY, args, logger)
    elif isinstance(args, ReplayArgs):
        from app.fl.run import cmd_replay
        return cmd_replay(args, logger)
    else:
        assert_never(args)


if __name__ == "__main__":
    args = tyro.cli(MainArgsType)
    exit(main(args))
