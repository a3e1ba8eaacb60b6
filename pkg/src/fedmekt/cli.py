"""Command line: ``fedmekt {run,sweep,probe,cost}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import FIELD_NAMES, FIELD_TYPES, ConfigError, parse_config
from .experiment import cost_table, dump_error, probe_checkpoint, run_experiment, sweep
from .federation import STRATEGIES


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="flat JSON config file")
    group = p.add_argument_group("config overrides")
    for name in FIELD_NAMES:
        hint = FIELD_TYPES[name]
        metavar = getattr(hint, "__name__", None) or str(hint).replace("typing.", "")
        group.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None, metavar=metavar.upper())


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for name in FIELD_NAMES:
        v = getattr(args, name, None)
        if v is not None:
            out[name] = None if v.lower() in ("none", "null") else v
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmekt", description="Multimodal federated embedding-knowledge-transfer simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_config_flags(p_run)

    p_sweep = sub.add_parser("sweep", help="run a grid of overrides")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--grid", required=True, help='JSON object, e.g. \'{"ekt_steps": [1,2,3]}\', or a path to one')

    p_probe = sub.add_parser("probe", help="linear-probe a saved server checkpoint")
    _add_config_flags(p_probe)
    p_probe.add_argument("--checkpoint", required=True)

    p_cost = sub.add_parser("cost", help="closed-form communication accounting, no training")
    _add_config_flags(p_cost)
    p_cost.add_argument("--n-proxy", type=int, required=True)
    p_cost.add_argument("--strategies", default=",".join(STRATEGIES))
    return parser


def _load_grid(spec: str) -> dict:
    path = Path(spec)
    text = path.read_text(encoding="utf-8") if path.exists() else spec
    grid = json.loads(text)
    if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
        raise ConfigError(["grid must map config keys to lists of values"])
    return grid


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out_dir = getattr(args, "output_dir", None) or "runs/default"
    try:
        cfg = parse_config(args.config, _overrides(args))
        out_dir = cfg.output_dir
        if args.command == "run":
            result = run_experiment(cfg)
            print(json.dumps(result.summary, indent=2))
        elif args.command == "sweep":
            rows = sweep(cfg, _load_grid(args.grid))
            print(f"{len(rows)} runs, merged table at {Path(cfg.output_dir) / 'sweep.csv'}")
        elif args.command == "probe":
            print(json.dumps(probe_checkpoint(cfg, args.checkpoint), indent=2))
        elif args.command == "cost":
            rows = cost_table(cfg, args.n_proxy, [s.strip() for s in args.strategies.split(",")])
            print(json.dumps(rows, indent=2))
    except Exception as exc:  # structured report, nonzero exit
        dump_error(out_dir, exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
