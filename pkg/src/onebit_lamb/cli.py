"""Command-line entry point: ``onebit-lamb <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys

from .comm import volume_reduction
from .harness import compare, format_table, load_config, run_training, trace_coefficients, validate_trace
from .optimizers import ConfigError


def _train(args) -> int:
    cfg = load_config(args.config)
    result = run_training(cfg, args.output_dir or cfg.output_dir or None)
    print(json.dumps(result.summary(), indent=2, sort_keys=True))
    return 0


def _compare(args) -> int:
    configs = [load_config(p) for p in args.configs]
    print(format_table(compare(configs, args.output_dir)))
    return 0


def _trace(args) -> int:
    cfg = load_config(args.config)
    result = trace_coefficients(cfg, args.output_dir or cfg.output_dir or ".")
    status = 0
    for name, path in result.trace_paths.items():
        problems = validate_trace(path, cfg.hp)
        print(f"{path}: {'ok' if not problems else f'{len(problems)} violations'}")
        for line in problems[:5]:
            print(f"  {line}")
        status |= bool(problems)
    return status


def _volume(args) -> int:
    factor = volume_reduction(args.warmup_ratio, args.baseline_bits, args.compressed_bits)
    print(f"{factor:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onebit-lamb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one configuration and print its summary")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.set_defaults(func=_train)

    p = sub.add_parser("compare", help="run several configurations and print a table")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--output-dir")
    p.set_defaults(func=_compare)

    p = sub.add_parser("trace-coefficients", help="write per-layer c_t / r_t traces and check them")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.set_defaults(func=_trace)

    p = sub.add_parser("volume", help="closed-form end-to-end volume reduction")
    p.add_argument("--warmup-ratio", type=float, required=True)
    p.add_argument("--baseline-bits", type=int, default=16)
    p.add_argument("--compressed-bits", type=float, default=1.0,
                   help="bits per element on the wire during compression (default 1)")
    p.set_defaults(func=_volume)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
