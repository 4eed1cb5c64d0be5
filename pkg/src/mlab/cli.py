"""Command line entry point: ``mlab run | list | validate``."""
from __future__ import annotations

import argparse
import json
import sys

from . import experiments
from .errors import MlabError


def _load(args) -> dict:
    cfg: dict = {}
    if getattr(args, "config", None):
        cfg.update(experiments.load_config(args.config))
    if getattr(args, "preset", None):
        cfg["preset"] = args.preset
    return cfg


def cmd_list(args) -> int:
    for name, desc in experiments.list_presets().items():
        print(f"{name:36s} {desc}")
    return 0


def cmd_validate(args) -> int:
    try:
        cfg = experiments.validate(_load(args))
    except MlabError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(experiments.canonical_json(cfg))
    print(f"config_hash {experiments.config_hash(cfg)}")
    return 0


def cmd_run(args) -> int:
    cfg = _load(args)
    if not cfg:
        print("run needs --preset or --config", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["master_seed"] = args.seed
    try:
        if args.paths is not None:
            cfg["n_paths"] = args.paths
            # variants may fix their own sizes; --paths overrides them all
            base = experiments.validate(cfg)
            cfg["variants"] = [{k: v for k, v in var.items() if k != "n_paths"} for var in base["variants"]]
        report = experiments.run(cfg, threads=args.threads, out_dir=args.out, dump_paths=args.dump_paths)
    except experiments.PathError as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return 3
    except MlabError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    for verdict, ok in zip(report.verdicts, report.outcomes):
        print(f"{'PASS' if ok else 'FAIL'} {verdict.check} {verdict.kind} "
              f"(censored {verdict.censored_fraction:.3f})")
    print(f"report written to {args.out}/report.json ({report.timing['total']:.1f} s)")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlab", description="Monte Carlo laboratory for rank-n martingales "
                                                          "on rotationally symmetric manifolds")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a preset or configuration file")
    r.add_argument("--preset")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--paths", type=int)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--out", default="mlab_out")
    r.add_argument("--dump-paths", action="store_true")
    r.set_defaults(func=cmd_run)
    ls = sub.add_parser("list", help="list presets")
    ls.set_defaults(func=cmd_list)
    v = sub.add_parser("validate", help="validate a configuration and print its canonical form")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
