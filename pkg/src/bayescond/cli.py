"""``bayescond <subcommand> --config path.json [--out dir] [--seed u64]``.

Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import ConfigError, ExperimentConfig, run
from .formats import FormatError
from .priors import InputError
from .schedule import ParameterError

SUBCOMMANDS = ("fig1", "sample-accuracy", "dc-check", "train-linear", "verify")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayescond", description="Bayesian conditioning experiments and checks.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, type=Path, help="JSON config file")
    parser.add_argument("--out", type=Path, default=None, help="output directory (overrides config)")
    parser.add_argument("--seed", type=_u64, default=None, help="seed (overrides config)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG

    try:
        raw = json.loads(args.config.read_text())
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    experiment = args.subcommand.replace("-", "_")
    try:
        if isinstance(raw, dict) and raw.get("experiment") not in (None, experiment, args.subcommand):
            raise ConfigError(f"config is for {raw['experiment']!r}, not {args.subcommand!r}")
        cfg = ExperimentConfig.from_dict(raw, experiment, args.out, args.seed)
        result = run(cfg)
    except (ConfigError, ParameterError, InputError, KeyError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO

    for f in result.files:
        print(f)
    print(json.dumps(result.summary, sort_keys=True, default=str))
    return EXIT_OK if result.ok else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
