"""Command-line entry point.

Exit codes: 0 all verdicts pass, 1 some verdict fails, 2 configuration or
runtime error.  ``RSLAB_OUT`` overrides the output directory unless
``--out`` is given.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from ..errors import RSLabError
from .config import ExperimentConfig, from_dict, validate_config
from .runner import run_experiment

log = logging.getLogger("rslab")

SUBCOMMAND_KINDS = {
    "simulate": ("rs_special", "example1", "rs_general", "sa_generic"),
    "skeleton": ("skeleton",),
    "qlearn": ("linear_q",),
    "analyze": ("analyze",),
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rslab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kinds in SUBCOMMAND_KINDS.items():
        p = sub.add_parser(name, help=f"run a {'/'.join(kinds)} experiment")
        _common(p)
        if name == "simulate":
            p.add_argument("--kind", choices=kinds, help="experiment kind when no config is given")
    v = sub.add_parser("verify", help="run the acceptance suite")
    v.add_argument("--threads", type=int, default=0)
    v.add_argument("--only", nargs="*", help="criterion ids to run, e.g. AC1 AC6")
    c = sub.add_parser("corpus", help="list or write built-in MDPs")
    c.add_argument("action", choices=["list", "generate", "random"])
    c.add_argument("name", nargs="?")
    c.add_argument("--out", type=Path)
    c.add_argument("--states", type=int, default=5)
    c.add_argument("--actions", type=int, default=2)
    c.add_argument("--dim", type=int, default=3)
    c.add_argument("--gamma", type=float, default=0.9)
    c.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    allowed = SUBCOMMAND_KINDS[args.command]
    if args.config is not None:
        cfg = validate_config(args.config.read_text())
        if cfg.kind not in allowed:
            raise RSLabError(f"config kind {cfg.kind!r} does not belong to '{args.command}' (expected {allowed})")
    else:
        kind = getattr(args, "kind", None) or allowed[0]
        cfg = from_dict({"kind": kind})
    overrides = {k: getattr(args, k) for k in ("seed", "paths", "horizon", "threads") if getattr(args, k) is not None}
    out = args.out if args.out is not None else os.environ.get("RSLAB_OUT")
    if out is not None:
        overrides["out"] = str(out)
    return cfg.replace(**overrides) if overrides else cfg


def _corpus(args) -> int:
    from .. import rl

    if args.action == "list":
        for name in sorted(rl.BUILTIN):
            mdp, feats = rl.builtin_mdp(name)
            print(f"{name}: {mdp.n_states} states, {mdp.n_actions} actions, d={feats.dim}, gamma={mdp.gamma}")
        return 0
    if args.out is None:
        raise RSLabError("--out is required")
    if args.action == "generate":
        if args.name is None:
            raise RSLabError("corpus generate needs a built-in name")
        mdp, feats = rl.builtin_mdp(args.name)
    else:
        mdp, feats = rl.random_mdp(args.states, args.actions, args.dim, args.gamma, args.seed)
    rl.write_mdp(args.out, mdp, feats)
    print(args.out)
    return 0


def _verify(args) -> int:
    from ..acceptance import run_all

    results = run_all(threads=args.threads, only=args.only)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "corpus":
            return _corpus(args)
        if args.command == "verify":
            return _verify(args)
        cfg = resolve_config(args)
        log.info("running %s into %s", cfg.kind, cfg.out)
        bundle = run_experiment(cfg)
    except (RSLabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for v in bundle.verdicts:
        print(f"[{'PASS' if v.passed else 'FAIL'}] {v.id}: {v.check} (value={v.value}, threshold={v.threshold})")
    print(f"bundle: {bundle.out_dir}")
    return 0 if bundle.all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
