"""
Command-line entry point.

    truncml SUBCOMMAND --config PATH [--seed U64] [--threads N] [--out DIR]

Subcommands: ``run`` (experiment kind taken from the file), ``validate``, and
one per experiment kind (``simulate``, ``fit``, ``mc-consistency``,
``mc-normality``, ``kl-study``, ``approx-error``), which override the kind.

Seed and output directory come from the flags, else from the ``TRUNCML_SEED``
and ``TRUNCML_OUT`` environment variables, else from the file.

Exit codes: 0 success, 2 invalid configuration, 3 runtime failure (details in
``<out>/<kind>_errors.log``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback

from .errors import TruncMLError
from .experiments import EXPERIMENT_KINDS, ConfigError, load_config, run_experiment, validate, write_outputs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _u64(text):
    try:
        val = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return val


def _positive(text):
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return val


def build_parser():
    parser = argparse.ArgumentParser(
        prog="truncml",
        description="Monte Carlo studies of truncated maximum likelihood for compactly supported covariances.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "validate") + EXPERIMENT_KINDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment configuration")
        p.add_argument("--seed", type=_u64, default=None, help="override the seed")
        p.add_argument("--threads", type=_positive, default=1, help="worker processes")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK

    try:
        cfg = load_config(args.config)
        seed = args.seed
        if seed is None and os.environ.get("TRUNCML_SEED"):
            seed = _u64(os.environ["TRUNCML_SEED"])
        out = args.out or os.environ.get("TRUNCML_OUT") or None
        cfg = cfg.with_overrides(seed=seed, out_dir=out)
    except ConfigError as exc:
        for p in exc.problems:
            line, fld, msg = p
            print(f"{args.config}:{line or '?'}: {fld}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        report = validate(cfg)
        print(json.dumps(report, indent=2))
        return EXIT_OK

    kind = cfg.raw["kind"] if args.command == "run" else args.command
    out_dir = cfg.raw["output"]["dir"]
    try:
        rows, summary, errors = run_experiment(cfg, threads=args.threads, out_dir=out_dir, kind=kind)
    except (TruncMLError, ArithmeticError, ValueError, OSError) as exc:
        os.makedirs(out_dir, exist_ok=True)
        msg = f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
        write_outputs(kind, [], {"kind": kind, "error": str(exc)}, [msg], out_dir)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if errors:
        print(f"{len(errors)} replicate(s) failed; see {os.path.join(out_dir, kind + '_errors.log')}", file=sys.stderr)
        return EXIT_RUNTIME
    print(os.path.join(out_dir, f"{kind}_summary.json"))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
