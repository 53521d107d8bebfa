"""Command-line entry point: ``bnnmap {single,sweep,online,dist,export,peer}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments
from .experiments import ConfigError, ExperimentConfig

SUBCOMMANDS = {
    "single": "single_agent",
    "sweep": "kl_sweep",
    "online": "online",
    "dist": "distributed",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnnmap", description="Decentralized Bayesian occupancy mapping experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, scenario in SUBCOMMANDS.items():
        s = sub.add_parser(name, help=f"run the {scenario} scenario")
        s.add_argument("--config", type=Path, help="YAML config file (flat key: value pairs)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path)
        if name == "online":
            s.add_argument("--retention", choices=experiments.RETENTION)
            s.add_argument("--rounds", type=int, dest="comm_rounds", help="number of communication rounds")
        if name == "dist":
            s.add_argument("--strategy", choices=("uniform_l2", "split_l2", "split_kl"))
            s.add_argument("--transport", choices=experiments.TRANSPORTS)
    e = sub.add_parser("export", help="render mean/std rasters from a checkpoint")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--grid", type=int, default=256)
    e.add_argument("--passes", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    peer = sub.add_parser("peer", help="run one socket-mode peer (spawned by `dist --transport socket`)")
    peer.add_argument("--id", type=int, required=True)
    peer.add_argument("--config", type=Path, required=True)
    peer.add_argument("--out", type=Path, required=True)
    return p


def _load(args: argparse.Namespace, scenario: str) -> ExperimentConfig:
    overrides = {
        k: getattr(args, k, None) for k in ("seed", "retention", "comm_rounds", "strategy", "transport")
    }
    overrides["scenario"] = scenario
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.config is not None:
        return ExperimentConfig.from_yaml(args.config, **overrides)
    return ExperimentConfig.from_dict({}, **overrides)


def _headline(result: dict) -> dict:
    if "summary" in result:
        return {k: v for k, v in result["summary"].items() if not isinstance(v, list)}
    if "table" in result:
        return {"sweep": [{k: row[k] for k in ("kl_weight", "std_global", "std_ratio")} for row in result["table"]]}
    return {}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "export":
            files = experiments.export_checkpoint(args.checkpoint, args.out, args.grid, args.passes, args.seed)
            print(json.dumps(files, indent=2))
            return 0
        if args.command == "peer":
            cfg = ExperimentConfig.from_yaml(args.config)
            experiments.run_socket_peer(cfg, args.id, args.out)
            return 0
        cfg = _load(args, SUBCOMMANDS[args.command])
        result = experiments.run(cfg)
        print(json.dumps({"out": result["out"], **_headline(result)}, indent=2, default=float))
        return 0
    except ConfigError as exc:
        print(f"bnnmap: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure as a diagnostic
        if getattr(args, "verbose", False):
            logging.exception("run failed")
        print(f"bnnmap: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
