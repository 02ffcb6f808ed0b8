"""Command line entry point: bltail <subcommand> [--config FILE] [overrides]."""
from __future__ import annotations

import argparse
import json
import sys

from .experiments import ConfigError, ExperimentConfig, emit_report, load_config, run

SUBCOMMANDS = {
    "tail": "tail",
    "mxi": "mxi",
    "ltail": "ltail",
    "homogenize": "homogenize",
    "sweep": "continuity-sweep",
    "discont": "discontinuity-lab",
    "ratefit": "rate-fit",
    "dirichlet": "dirichlet",
}


def _vec(text):
    return [float(c) if any(ch in c for ch in ".e") else int(c) for c in text.split(",")]


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bltail", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML or JSON experiment config")
        s.add_argument("--out", help="output directory for the report")
        s.add_argument("--force", action="store_true", help="overwrite an existing report")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--operator", help="operator dictionary as JSON")
        s.add_argument("--psi", help="boundary data dictionary as JSON")
        s.add_argument("--xi", type=_vec)
        s.add_argument("--nu", type=_vec)
        s.add_argument("--eta", type=_vec)
        s.add_argument("--eps", type=float)
        s.add_argument("--alpha", type=_vec)
        s.add_argument("--N", type=int)
        s.add_argument("--h", type=float)
        s.add_argument("--param", action="append", default=[], metavar="KEY=JSON",
                       help="extra experiment parameter")
    return p


def _config(args) -> ExperimentConfig:
    kind = SUBCOMMANDS[args.command]
    if args.config:
        cfg = load_config(args.config)
        if cfg.kind != kind:
            raise ConfigError(f"config kind {cfg.kind!r} does not match subcommand {args.command!r}")
        obj = cfg.to_dict()
        obj["knobs"] = dict(cfg.knobs)
    else:
        obj = {"kind": kind}
    params = dict(obj.get("params", {}))
    for key in ("xi", "nu", "eta", "eps", "alpha", "N"):
        val = getattr(args, key)
        if val is not None:
            params[key] = val
    for item in args.param:
        key, _, val = item.partition("=")
        params[key] = json.loads(val)
    obj["params"] = params
    if args.operator:
        obj["operator"] = json.loads(args.operator)
    if args.psi:
        obj["psi"] = json.loads(args.psi)
    if args.h is not None:
        obj.setdefault("knobs", {})["h"] = args.h
    if args.out:
        obj["out"] = args.out
    return ExperimentConfig.from_dict(obj)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
        report = run(cfg, args.threads)
        if cfg.out:
            emit_report(report, cfg.out, force=args.force)
        json.dump({"kind": report.kind, "summary": report.summary, "verdict": report.verdict,
                   "rows": report.rows}, sys.stdout, indent=1, default=str)
        sys.stdout.write("\n")
    except (ConfigError, FileExistsError, ValueError, RuntimeError, KeyError, OSError) as err:
        print(f"bltail: error: {err}", file=sys.stderr)
        return 1
    return 2 if report.inconclusive else 0


if __name__ == "__main__":
    sys.exit(main())
