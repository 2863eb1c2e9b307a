"""``tnt`` command-line entry point.

Exit codes: 0 success, 1 training failure, 2 configuration or usage error,
3 data or file-format error.
"""
from __future__ import annotations

import argparse
import sys

from ..errors import (
    ConfigError, DataError, FormatError, ScheduleError, TNTError, TrainingError, UnsupportedArchitectureError,
    UsageError,
)
from . import commands
from .config import ExperimentConfig

EXIT_OK, EXIT_TRAINING, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults apply to omitted keys)")
    common.add_argument("--out", help="output directory (overrides the config's out)")
    common.add_argument("--seed", type=int, help="run a single seed (overrides the config's seeds)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value by dotted path, e.g. allocator.beta=0.1")

    p = _Parser(prog="tnt", description="Noise-allocator token pruning experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("train-backbone", parents=[common], help="train the toy ViT backbone for each seed")
    ta = sub.add_parser("train-allocator", parents=[common], help="train allocator heads on a frozen backbone")
    ta.add_argument("--backbone", help="backbone checkpoint (default: <out>/seed<k>/backbone.tntc)")

    sw = sub.add_parser("sweep", parents=[common], help="evaluate pruning methods over keep points")
    sw.add_argument("--methods", help="comma-separated subset of " + ",".join(commands.TNT_METHODS) + ",random,cls_topk")
    sw.add_argument("--keep", help="comma-separated kept-token counts")

    fl = sub.add_parser("flops", parents=[common], help="analytic MAC report for a preset or the config")
    fl.add_argument("--preset", help="deit-b-distil | deit-s-distil | vit16-768")
    fl.add_argument("--tokens", help="comma-separated tokens per block (default: dense or the schedule)")
    fl.add_argument("--keep", type=int, help="kept-token count for the configured single-layer schedule")

    rm = sub.add_parser("render-map", parents=[common], help="render kept/dropped token maps")
    rm.add_argument("--history", required=True, help="history file written by sweep")
    rm.add_argument("--data", help="TNTC dataset container (default: the config's held-out split)")
    rm.add_argument("--samples", help="comma-separated sample ids (default: all in the history)")
    rm.add_argument("--scale", type=int, default=4, help="PGM pixel upscale factor")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out={args.out}")
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        overrides.append(f"seeds=[{args.seed}]")
    return cfg.with_overrides(overrides) if overrides else cfg


def dispatch(args) -> str:
    cfg = load_config(args)
    if args.command == "train-backbone":
        res = commands.cmd_train_backbone(cfg)
        return "\n".join(f"seed {r['seed']}: train accuracy {r['final_accuracy']:.4f}" for r in res["runs"])
    if args.command == "train-allocator":
        res = commands.cmd_train_allocator(cfg, args.backbone)
        return "\n".join(f"seed {r['seed']}: allocator trained, backbone unchanged" for r in res["runs"])
    if args.command == "sweep":
        methods = args.methods.split(",") if args.methods else None
        keep = _int_list(args.keep) if args.keep else None
        res = commands.cmd_sweep(cfg, methods, keep)
        return f"wrote {res['path']} ({len(res['rows'])} rows)"
    if args.command == "flops":
        tokens = _int_list(args.tokens) if args.tokens else None
        res = commands.cmd_flops(cfg, args.preset, tokens, args.keep)
        return f"{res['gflops']:.4f} GFLOPs (wrote {res['path']})"
    if args.command == "render-map":
        samples = _int_list(args.samples) if args.samples else None
        res = commands.cmd_render_map(cfg, args.history, samples, args.data, args.scale)
        return f"wrote {len(res['files'])} files"
    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        print(dispatch(args))
        return EXIT_OK
    except (ConfigError, UsageError, ScheduleError, UnsupportedArchitectureError) as exc:
        print(f"tnt: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        print(f"tnt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"tnt: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except TNTError as exc:
        print(f"tnt: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
