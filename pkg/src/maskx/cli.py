"""``maskx`` command line: gen-data, train, eval, ablate, viz."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from . import experiment as ex
from .config import ConfigError, load_config
from .dataset import DatasetFormatError, read_manifest
from .viz import write_overlays

log = logging.getLogger("maskx")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskx", description="Partially supervised instance segmentation on synthetic shapes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True, checkpoint=False):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory from gen-data (default: generate from gen.*)")
        if checkpoint:
            p.add_argument("--checkpoint", required=checkpoint == "required", help="checkpoint file")

    common(sub.add_parser("gen-data", help="write train/eval datasets"), data=False)
    common(sub.add_parser("train", help="train one model"))
    common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint="required")
    common(sub.add_parser("ablate", help="run the configured ablation grid"))
    common(sub.add_parser("viz", help="write PNG overlays"), checkpoint="optional")
    return parser


def _load(args):
    cfg = load_config(args.config, args.set)
    data = ex.load_data(cfg, getattr(args, "data", None))
    return cfg, data


def cmd_gen_data(args) -> None:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    data = ex.generate_data(cfg)
    ex.write_data(data, out, cfg.gen_config().digest())
    ex.write_run_metadata(cfg, out, data)
    for part in (ex.TRAIN_DIR, ex.EVAL_DIR):
        read_manifest(out / part)
    if ex.read_data(out).hash != data.hash:
        raise DatasetFormatError("written dataset does not read back identically")


def cmd_train(args) -> None:
    cfg, data = _load(args)
    out = Path(args.out)
    _, ckpt, _ = ex.train_run(cfg, data, out)
    if ckpt_io.load(out / "checkpoint.bin") != ckpt:
        raise ckpt_io.CheckpointError("checkpoint does not read back identically")


def cmd_eval(args) -> None:
    cfg = load_config(args.config, args.set)
    model = ex.load_model(cfg, args.checkpoint)
    data = ex.load_data(cfg, args.data)
    out = Path(args.out)
    report = ex.evaluate_model(cfg, model, data.eval)
    ex.write_run_metadata(cfg, out, data)
    ex.write_eval(cfg, Path(args.checkpoint).parent.name or "run", report, out)
    print(f"AP_A {report.ap_a:.4f}  AP_B {report.ap_b:.4f}")


def cmd_ablate(args) -> None:
    cfg, data = _load(args)
    out = Path(args.out)
    ex.write_run_metadata(cfg, out, data)
    results = ex.run_grid(cfg, data, out)
    for path in ex.write_ablation(cfg, results, out):
        print(path.read_text(encoding="utf-8"), end="")


def cmd_viz(args) -> None:
    cfg, data = _load(args)
    out = Path(args.out)
    scenes = data.eval[: cfg["viz.images"]]
    detections = None
    if args.checkpoint:
        model = ex.load_model(cfg, args.checkpoint)
        detections = model.detect(scenes, seed=cfg["eval.seed"], jitter=cfg["eval.jitter"])
    ex.write_run_metadata(cfg, out, data)
    paths = write_overlays(scenes, cfg.split_config(), out / "overlays", detections)
    if len(paths) != len(scenes) or not all(p.stat().st_size for p in paths):
        raise OSError("overlay images were not all written")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "viz": cmd_viz}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        # validate before touching the output directory
        load_config(args.config, args.set)
        COMMANDS[args.command](args)
    except (ConfigError, DatasetFormatError, ckpt_io.CheckpointError, ValueError, OSError) as exc:
        print(f"maskx {args.command}: error: {exc}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
