"""Command line entry point: ``run``, ``instance-info`` and ``verify``.

Exit codes: 0 success, 1 runtime or verification failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback

from .core import InvalidInputError
from .environment import GENERATORS, ProblemInstance, build_instance
from .harness import OUT_ENV, ConfigError, ExperimentConfig, instance_info, run_experiment


def _param(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser():
    parser = argparse.ArgumentParser(prog="mnl-bandit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every (policy, seed) pair of an experiment")
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--seeds", help="seed count N (seeds 0..N-1) or comma list, e.g. 3,7,11")
    p.add_argument("--paper-constants", action="store_true", help="strict theory constants")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./results)")
    p.add_argument("--T", type=int, help="horizon")
    p.add_argument("--policies", help="comma-separated policy names")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.add_argument("--trace-timing", action="store_true",
                   help="write measured elapsed_ns into traces (breaks byte-reproducibility)")

    p = sub.add_parser("instance-info", help="print the problem constants of an instance")
    p.add_argument("--config", help="experiment config or instance JSON file")
    p.add_argument("--generator", choices=sorted(GENERATORS))
    p.add_argument("--param", action="append", type=_param, default=[], metavar="KEY=VALUE",
                   help="generator parameter (JSON value), repeatable")

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--level", choices=("quick", "full"), default="quick")
    p.add_argument("--out", help="also write oracle_reports.json to this directory")
    return parser


def _run(args):
    cfg = ExperimentConfig.load(args.config)
    doc = {k: v for k, v in vars(cfg).items()}
    if args.seeds is not None:
        doc["seeds"] = args.seeds
    if args.paper_constants:
        doc["policy"] = dict(doc["policy"], paper_constants=True)
    if args.out:
        doc["out"] = args.out
    if args.T is not None:
        doc["T"] = args.T
    if args.policies:
        doc["policies"] = [p.strip() for p in args.policies.split(",") if p.strip()]
    if args.workers is not None:
        doc["workers"] = args.workers
    if args.trace_timing:
        doc["trace_timing"] = True
    cfg = ExperimentConfig(**doc)
    result = run_experiment(cfg)
    finals = {p: stats["checkpoints"][-1]["median"] for p, stats in result["policies"].items()}
    print(json.dumps({"out": str(cfg.out_dir()), "median_final_regret": finals}))
    return 0


def _instance_spec(args):
    if args.generator:
        return {"generator": args.generator, "params": dict(args.param)}
    if not args.config:
        raise ConfigError("give --config or --generator")
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {args.config}: {exc}") from None
    if "theta_star" in doc:
        return {"path": args.config}
    return doc.get("instance", doc)


def _instance_info(args):
    spec = _instance_spec(args)
    inst = ProblemInstance.load(spec["path"]) if "path" in spec else build_instance(spec)
    print(json.dumps(instance_info(inst), indent=1))
    return 0


def _verify(args):
    from pathlib import Path

    from .oracle import run_checks

    reports = run_checks(args.level)
    for r in reports:
        print(r.to_json())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle_reports.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1))
    return 0 if all(r.passed for r in reports) else 1


COMMANDS = {"run": _run, "instance-info": _instance_info, "verify": _verify}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        traceback.print_exc()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
