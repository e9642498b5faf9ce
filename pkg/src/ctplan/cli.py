"""``ctplan`` command line.

Exit codes: 0 success, 2 usage or invalid configuration, 3 missing artifact,
4 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import bench
from .config import load_config
from .errors import ContractError, MissingArtifact, NumericError, TrainingDivergence

log = logging.getLogger("ctplan")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4


def _steps_list(text: str) -> list[int]:
    try:
        steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not steps or min(steps) < 1:
        raise argparse.ArgumentTypeError("steps must be positive integers")
    return steps


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="run directory (overrides out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ctplan", description="Consistency trajectory planning toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="collect the offline dataset")
    sub.add_parser("train-teacher", parents=[common], help="train the diffusion teacher")
    sub.add_parser("distill", parents=[common], help="distill the consistency student")
    sub.add_parser("train-aux", parents=[common], help="train inverse dynamics and critic")
    t = sub.add_parser("train", parents=[common], help="run all training stages, resuming where possible")
    t.add_argument("--stage", help=f"run only one stage: {', '.join(bench.STAGES)}")
    t.add_argument("--force", action="store_true", help="retrain stages whose outputs exist")
    sub.add_parser("plan", parents=[common], help="evaluate the planner over the seed set")
    b = sub.add_parser("bench", parents=[common], help="sweep denoising steps for both samplers")
    b.add_argument("--steps", type=_steps_list, help="comma-separated step counts, e.g. 1,2,4")
    return p


def _dispatch(args) -> object:
    cfg = load_config(args.config, {"seed": args.seed, "out_dir": args.out})
    if args.command == "gen-data":
        if not args.out and not args.config:
            raise ContractError("gen-data needs an output directory (--out) or a config with out_dir")
        return {"dataset": str(bench.stage_data(cfg))}
    if args.command == "train-teacher":
        return {"ran": bench.run_train(cfg, "teacher")}
    if args.command == "distill":
        return {"ran": bench.run_train(cfg, "distill")}
    if args.command == "train-aux":
        return {"ran": bench.run_train(cfg, "aux")}
    if args.command == "train":
        return {"ran": bench.run_train(cfg, args.stage, args.force)}
    if args.command == "plan":
        return bench.cmd_plan_run(cfg)
    if args.command == "bench":
        return [r.row() for r in bench.run_bench(cfg, args.steps)]
    raise ContractError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _dispatch(args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDivergence as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ContractError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(result, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
