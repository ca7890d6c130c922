"""``neounet`` command line: train, eval, infer, bench, gen-data.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import RunConfig
from .data import (FolderDataset, MaskCodec, build_index, load_image, load_mask,
                   make_batch, make_codec)
from .encoder import load_pretrained
from .exceptions import ConfigError, DataIntegrityError
from .metrics import ConfusionAccumulator, benchmark_fps, format_table
from .network import infer_labels
from .synthetic import SyntheticSpec, generate
from .training import (build_model, fit, load_checkpoint, predict_dataset, save_checkpoint,
                       transfer_weights)

logger = logging.getLogger("neounet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _require_dataset(path) -> Path:
    path = Path(path)
    for sub in (path, path / "images", path / "masks"):
        if not sub.is_dir():
            raise UsageError(f"dataset directory not found: {sub}")
    return path


def _dataset(path, codec=None, policy=None, seed=0):
    index = build_index(_require_dataset(path), codec=codec)
    if len(index) == 0:
        raise UsageError(f"no images found under {Path(path) / 'images'}")
    return FolderDataset(index, codec=codec, policy=policy, seed=seed)


def cmd_train(args) -> int:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.epochs is not None:
        config.train.total_epochs = args.epochs
        if config.train.warmup_epochs >= max(args.epochs, 1):
            config.train.warmup_epochs = max(args.epochs - 1, 0)
    if args.seed is not None:
        config.train.seed = args.seed
    if args.output:
        config.output_dir = args.output
    if args.train_dir:
        config.data.train_dir = args.train_dir
    if args.valid_dir:
        config.data.valid_dir = args.valid_dir
    if args.workers is not None:
        config.workers = args.workers
    config = RunConfig.from_dict(config.to_dict())  # re-validate after overrides
    if not config.data.train_dir:
        raise UsageError("data.train_dir is not set")
    codec = config.data.make_codec()
    policy = config.data.augmentation if config.data.augment else None
    train = _dataset(config.data.train_dir, codec, policy, config.train.seed)
    valid = _dataset(config.data.valid_dir or config.data.train_dir, codec)

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(out / "config.resolved.yaml")
    logger.info("resolved config written to %s", out / "config.resolved.yaml")

    model = build_model(config.network, config.train.seed)
    if config.pretrained:
        missing = load_pretrained(model.encoder, config.pretrained)
        logger.info("loaded pretrained encoder weights; %d tensors left at init", len(missing))
    if config.init_from:
        skipped = transfer_weights(model, config.init_from)
        logger.info("initialised from %s; %d tensors left at init", config.init_from, len(skipped))
    resume = out / "last.pt" if args.resume and (out / "last.pt").exists() else None
    _, history = fit(model, train, valid, config.train, out, config.device, resume=resume,
                     workers=config.workers)
    if config.train.total_epochs == 0:
        save_checkpoint(out / "best.pt", model, 0)
    print(json.dumps(history[-1] if history else {"epochs": 0}))
    return EXIT_OK


def _write_report(out_dir, summary, name):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(summary, indent=1))
    (out_dir / "metrics.txt").write_text(format_table(summary, name) + "\n")


def cmd_eval(args) -> int:
    root = _require_dataset(args.dataset)
    codec = make_codec(args.mask_format)
    index = build_index(root, split="test", codec=codec)
    if len(index) == 0:
        raise UsageError(f"no images found under {root / 'images'}")
    acc = ConfusionAccumulator()
    if args.predictions:
        pred_dir = Path(args.predictions)
        if not pred_dir.is_dir():
            raise UsageError(f"predictions directory not found: {pred_dir}")
        data = FolderDataset(index, codec)
        for i, entry in enumerate(index.entries):
            pred = load_mask(pred_dir / Path(entry.mask).name, codec)
            _, truth = make_batch([data.raw(i)], args.size, allowed_scales=None)
            if pred.shape != (args.size, args.size):
                pred = np.asarray(Image.fromarray(pred).resize((args.size, args.size), Image.NEAREST))
            acc.accumulate(pred, truth[0].numpy())
        name = pred_dir.name
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        model, _ = load_checkpoint(args.checkpoint)
        data = FolderDataset(index, codec)
        dump = Path(args.dump_predictions) if args.dump_predictions else None
        if dump:
            dump.mkdir(parents=True, exist_ok=True)
        for entry, (pred, truth) in zip(index.entries,
                                        predict_dataset(model, data, args.size, args.threshold)):
            acc.accumulate(pred, truth)
            if dump:
                Image.fromarray(codec.encode(pred)).save(dump / Path(entry.mask).name)
        name = "NeoUNet"
    summary = acc.summary()
    summary["counts"] = acc.counts
    summary["eval_size"] = args.size
    summary["unknown_policy"] = "unknown truth counted for seg, excluded from non/neo"
    if args.output:
        _write_report(args.output, summary, name)
    print(format_table(summary, name))
    return EXIT_OK


def _overlay(image, labels, codec, alpha=0.45):
    color = codec.encode(labels).astype(np.float32) / 255.0
    fg = (labels > 0)[..., None]
    return np.where(fg, (1 - alpha) * image + alpha * color, image)


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    codec = MaskCodec()
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in args.images:
        path = Path(path)
        try:
            image = load_image(path)
        except (OSError, ValueError) as exc:
            print(f"error: cannot read {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        batch, _ = make_batch([(image, None)], args.size, allowed_scales=None)
        with torch.no_grad():
            head = model(batch)[-1]
        labels = infer_labels(head, args.threshold, image.shape[:2])[0].numpy()
        Image.fromarray(codec.encode(labels)).save(out / f"{path.stem}_mask.png")
        overlay = (_overlay(image, labels, codec) * 255).round().astype(np.uint8)
        Image.fromarray(overlay).save(out / f"{path.stem}_overlay.png")
        areas = np.bincount(labels.ravel(), minlength=3)
        print(f"{path.name}: background={areas[0]} non_neoplastic={areas[1]} neoplastic={areas[2]}")
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_bench(args) -> int:
    root = _require_dataset(args.dataset)
    index = build_index(root, split="test")
    if len(index) < args.num_images:
        raise UsageError(f"bench needs at least {args.num_images} images, found {len(index)} in {root}")
    data = FolderDataset(index, cache=False)
    images = [make_batch([(data.raw(i)[0], None)], args.size, allowed_scales=None)[0]
              for i in range(args.num_images)]
    if args.fake_latency is not None:
        # protocol self-check: a stub that spins for a fixed time. Spinning on the
        # same clock avoids sleep() overshoot from the scheduler.
        delay = args.fake_latency / 1000.0

        def infer(_x):
            end = time.perf_counter() + delay
            while time.perf_counter() < end:
                pass
        name = f"constant-{args.fake_latency}ms"
    else:
        if not args.checkpoint:
            raise UsageError("bench needs --checkpoint or --fake-latency")
        model, _ = load_checkpoint(args.checkpoint)
        model.eval()

        def infer(x):
            with torch.no_grad():
                return model(x)
        name = "NeoUNet"
    report = benchmark_fps(infer, images, warmup=args.warmup, n_images=args.num_images)
    lat = report.pop("per_image_latencies")
    report["model"] = name
    report["note"] = f"{args.warmup} warm-up iterations excluded from timing; batch size 1"
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps({**report, "latencies": lat}, indent=1))
    print(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.spec:
        import yaml

        spec = SyntheticSpec(**(yaml.safe_load(Path(args.spec).read_text()) or {}))
    else:
        spec = SyntheticSpec()
    overrides = {"num_images": args.num_images, "image_size": args.size, "seed": args.seed}
    for key, value in overrides.items():
        if value is not None:
            setattr(spec, key, value)
    if args.unknown_prob is not None:
        non, neo, _ = spec.class_mix
        rest = 1 - args.unknown_prob
        spec.class_mix = (rest * non / (non + neo), rest * neo / (non + neo), args.unknown_prob)
    spec = SyntheticSpec(**spec.to_dict())
    generate(spec, args.output)
    print(f"wrote {spec.num_images} images to {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="neounet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model from a run config")
    p.add_argument("config", nargs="?", help="YAML run config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--output")
    p.add_argument("--train-dir")
    p.add_argument("--valid-dir")
    p.add_argument("--resume", action="store_true", help="continue from OUTPUT/last.pt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="micro-averaged Dice/IoU on a dataset")
    p.add_argument("dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="directory of colour-coded predicted masks")
    p.add_argument("--size", type=int, default=352)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--output")
    p.add_argument("--dump-predictions")
    p.add_argument("--mask-format", choices=("color", "binary"), default="color")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="predict masks and overlays")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--size", type=int, default=352)
    p.add_argument("--output", default="predictions")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", parents=[common], help="FPS over 100 images, batch size 1")
    p.add_argument("dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--size", type=int, default=352)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--num-images", type=int, default=100)
    p.add_argument("--fake-latency", type=float, help="milliseconds; benchmark a sleeping stub")
    p.add_argument("--output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("output")
    p.add_argument("--spec", help="YAML file with SyntheticSpec fields")
    p.add_argument("--num-images", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--unknown-prob", type=float)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is not None:
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataIntegrityError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
