"""``vapi`` command line: gen-data | train | eval | report."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .report import write_report

log = logging.getLogger("vapi")


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = cfg.with_overrides(out=args.out)
    if getattr(args, "method", None) is not None:
        cfg = cfg.with_overrides(posttrain=dataclasses.replace(cfg.posttrain, method=args.method))
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    train, held = pipeline.gen_data(cfg)
    print(f"wrote {train} and {held}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ckpt = pipeline.run_stage(cfg, args.stage, args.method, resume=args.resume, stop_after=args.stop_after)
    print(f"{ckpt.stage}: step {ckpt.step} -> {Path(cfg.out) / 'ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    report = pipeline.eval_stage(cfg, args.stage, args.method, ckpt_path=args.checkpoint)
    tag = report["stage"]
    print(pipeline.format_eval(tag, report), end="")
    return 0


def cmd_report(args) -> int:
    runs = args.runs
    out = args.out or runs[0]
    text, txt, csv_path = write_report(runs, out)
    print(text, end="")
    print(f"wrote {txt} and {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vapi", description="Toy variational pixel-alignment pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method=True):
        p.add_argument("--config", help="INI config file (defaults are used when omitted)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="override [run] out (run directory)")
        if method:
            p.add_argument("--method", choices=("vapi", "ste", "tok-pt"), help="post-training method")

    p = sub.add_parser("gen-data", help="render the train and held-out datasets")
    common(p, method=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", required=True, choices=pipeline.STAGES)
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint of the stage")
    p.add_argument("--stop-after", type=int, help="stop once this many steps are done (for interrupted runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--stage", choices=pipeline.STAGES, help="stage whose final checkpoint to evaluate")
    p.add_argument("--checkpoint", help="explicit checkpoint path (overrides --stage)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare evaluated runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help="where to write report.txt and report.csv (default: first run)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, pipeline.MissingPrerequisite, FileNotFoundError, ValueError) as err:
        print(f"vapi: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
