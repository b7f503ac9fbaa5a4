"""Command-line entry point.

One binary, five subcommands mirroring the pipeline stages. Exit codes:
0 success, 2 configuration error, 3 missing-dependency error; any other
package failure exits 1 with the error message on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, DependencyError, FluxcountError
from .pipeline import (
    stage_characterize,
    stage_exclude,
    stage_lindblad,
    stage_report,
    stage_simulate_scan,
)

_STAGES = {
    "simulate-scan": stage_simulate_scan,
    "characterize": stage_characterize,
    "lindblad-eff": stage_lindblad,
    "exclude": stage_exclude,
    "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fluxcount",
        description="Photon-counter scan simulation and exclusion analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _STAGES.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override scan.seed")
        p.add_argument("--out", default=None, help="override paths.out")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed: must be non-negative")
        if args.threads < 1:
            raise ConfigError("--threads: must be at least 1")
        cfg = load_config(
            args.config, seed_override=args.seed, out_override=args.out
        )
        out_dir = Path(cfg.paths.out)
        _STAGES[args.command](cfg, out_dir, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except FluxcountError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
