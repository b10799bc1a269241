"""Command line entry point: ``halfspace {circle,fmnist,oracle,export}``.

Settings resolve as preset < ``--config`` file < ``HALFSPACE_<KEY>``
environment variables < flags. On failure a single JSON line
``{"error": ..., "type": ...}`` goes to stderr and the exit code is nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys

from .experiments import RUNNERS, ConfigError, OracleViolation, build_config, export_heatmap, read_csv_matrix

EXIT_CONFIG, EXIT_DATA, EXIT_ORACLE, EXIT_RUNTIME = 2, 3, 4, 1


def _snapshots(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated epochs, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="halfspace", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("circle", "fmnist", "oracle"):
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--arch", choices=["relu", "dlgn", "dlgn-pwc", "dln"])
        s.add_argument("--freeze", choices=["gates", "values", "none"])
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--beta", type=float)
        s.add_argument("--snapshots", type=_snapshots)
        s.add_argument("--batch-size", dest="batch_size", type=int)
        if name == "fmnist":
            s.add_argument("--data-dir", dest="data_dir")
    e = sub.add_parser("export", help="render a kernel CSV as a PGM heatmap")
    e.add_argument("csv")
    e.add_argument("pgm")
    e.add_argument("--epoch", type=int)
    e.add_argument("--seed", type=int)
    return p


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "export":
            export_heatmap(read_csv_matrix(args.csv), args.pgm, args.epoch, args.seed)
            return 0
        overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        cfg = build_config(args.command, args.config, overrides)
        man = RUNNERS[args.command](cfg)
        print(json.dumps({"status": "ok", "out": man.out_dir, "artifacts": len(man.artifacts)}))
        return 0
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_DATA, exc)
    except OracleViolation as exc:
        return _fail(EXIT_ORACLE, exc)
    except (ValueError, RuntimeError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
