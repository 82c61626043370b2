"""``mafnet`` command line: gen, train, eval, ablate, visualize."""

from __future__ import annotations

import argparse
import collections
import csv
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path

from . import ablation
from .checkpoint import load_checkpoint, load_config_file, save_checkpoint
from .data import MANIFEST, FormatError, SynthSpec, generate_synthetic, read_dataset, stack_images, write_dataset
from .mlfe import EVAL
from .model import ConfigError, MafConfig, init_params, maf_forward
from .tensor import Tensor
from .train import TrainConfig, evaluate, train
from .viz import load_image, overlay, write_ppm

log = logging.getLogger("mafnet")

EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit code is nonzero."""


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dataset_dir(path: str | None, flag: str) -> Path:
    if path is None:
        raise CliError(f"{flag} is required")
    p = Path(path)
    if not (p / MANIFEST).is_file():
        raise CliError(f"{flag} {p}: not a dataset directory (no {MANIFEST})")
    return p


def _out_dir(path: str | None) -> Path:
    if path is None:
        raise CliError("--out is required")
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise CliError(f"--out {p} exists and is not a directory")
    parent = p if p.exists() else p.parent
    if parent.exists() and not os.access(parent, os.W_OK):
        raise CliError(f"--out {p} is not writable")
    return p


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"seeds must be integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("seeds list is empty")
    return seeds


def _configs(args) -> tuple[MafConfig, TrainConfig, list[int]]:
    if args.config:
        if not Path(args.config).is_file():
            raise CliError(f"--config {args.config}: no such file")
        config, tc, extras = load_config_file(args.config)
    else:
        config, tc, extras = MafConfig(), TrainConfig(), {}
    seeds = _parse_seeds(extras["seeds"]) if "seeds" in extras else [tc.seed]
    if args.seed is not None:
        tc = dataclasses.replace(tc, seed=args.seed)
        seeds = [args.seed]
    if getattr(args, "seeds", None):
        seeds = _parse_seeds(args.seeds)
    return config, tc, seeds


def _check_size(config: MafConfig, samples, flag: str) -> None:
    shape = samples[0].image.shape
    if shape != (1,) + tuple(config.image_size):
        raise CliError(f"{flag} images are {shape}, config expects 1x{config.image_size[0]}x{config.image_size[1]}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = _out_dir(args.out)
    spec = SynthSpec(count=args.count, seed=0 if args.seed is None else args.seed,
                     image_size=args.image_size, occlusion=args.occlusion, noise_std=args.noise)
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    samples = generate_synthetic(spec)
    write_dataset(out, samples)
    cells = collections.Counter((s.label, s.occluded) for s in samples)
    print("label,occluded,count")
    for label in (0, 1):
        for occ in (False, True):
            print(f"{label},{'true' if occ else 'false'},{cells[(label, occ)]}")
    return 0


def cmd_train(args) -> int:
    config, tc, _ = _configs(args)
    data = _dataset_dir(args.data, "--data")
    test = _dataset_dir(args.test_data, "--test-data") if args.test_data else data
    out = _out_dir(args.out)
    train_set, _ = read_dataset(data)
    test_set = train_set if test == data else read_dataset(test)[0]
    _check_size(config, train_set, "--data")
    _check_size(config, test_set, "--test-data")
    params = init_params(config, tc.seed)
    params, history = train(config, params, train_set, test_set, tc)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint", config, params)
    _write_text(out / "history.csv", history.to_csv())
    last = history.records[-1]
    print(f"acc={last.test_acc:.4f} f1={last.test_f1:.4f}")
    return 0


def cmd_eval(args) -> int:
    if args.checkpoint is None or not Path(args.checkpoint).is_dir():
        raise CliError(f"--checkpoint {args.checkpoint}: no such checkpoint directory")
    data = _dataset_dir(args.data, "--data")
    out = _out_dir(args.out or ".")
    config, params = load_checkpoint(args.checkpoint)
    samples, paths = read_dataset(data)
    _check_size(config, samples, "--data")
    acc, f1, preds = evaluate(params, samples, config)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "label", "pred"])
    writer.writerows(zip(paths, (s.label for s in samples), (int(p) for p in preds)))
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "predictions.csv", buf.getvalue())
    print(f"acc={acc:.4f} f1={f1:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config, tc, seeds = _configs(args)
    data = _dataset_dir(args.data, "--data")
    test = _dataset_dir(args.test_data, "--test-data") if args.test_data else data
    out = _out_dir(args.out)
    if args.jobs < 1:
        raise CliError("--jobs must be >= 1")
    train_set, _ = read_dataset(data)
    test_set = train_set if test == data else read_dataset(test)[0]
    _check_size(config, train_set, "--data")
    _check_size(config, test_set, "--test-data")
    jobs = ablation.plan(config, seeds)
    out.mkdir(parents=True, exist_ok=True)
    results = ablation.run_sweep(jobs, tc, train_set, {"test": test_set}, out / "jobs", args.jobs)
    report = ablation.report_csv(results, "test")
    _write_text(out / "ablation.csv", report)
    sys.stdout.write(report)
    return 0


def cmd_visualize(args) -> int:
    if args.checkpoint is None or not Path(args.checkpoint).is_dir():
        raise CliError(f"--checkpoint {args.checkpoint}: no such checkpoint directory")
    if args.image is None or not Path(args.image).is_file():
        raise CliError(f"--image {args.image}: no such file")
    if args.out is None:
        raise CliError("--out is required (path of the .ppm to write)")
    out = Path(args.out)
    if not out.parent.is_dir():
        raise CliError(f"--out {out}: parent directory does not exist")
    config, params = load_checkpoint(args.checkpoint)
    if params.mlfe is None:
        raise CliError("checkpoint has no multi-local attention module to visualize")
    try:
        image = load_image(args.image)
    except (ValueError, IndexError) as e:
        raise CliError(f"--image {args.image}: cannot load ({e})") from None
    if image.shape != tuple(config.image_size):
        raise CliError(f"--image is {image.shape}, checkpoint expects {config.image_size}")
    _, stack = maf_forward(Tensor(image[None]), params, config, None, EVAL)
    write_ppm(out, overlay(image, stack.fused()))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (model and trainer fields, seeds)")
    common.add_argument("--seed", type=int, help="seed (dataset seed for gen, run seed otherwise)")
    common.add_argument("--out", help="output directory (output .ppm file for visualize)")
    common.add_argument("--jobs", type=int, default=1, help="parallel training jobs (ablate)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="mafnet", description="Multi-attention fusion drowsiness classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=SynthSpec.count, help="number of images")
    p.add_argument("--occlusion", type=float, default=SynthSpec.occlusion, help="probability an image is occluded")
    p.add_argument("--noise", type=float, default=SynthSpec.noise_std, help="pixel noise standard deviation")
    p.add_argument("--image-size", type=int, default=SynthSpec.image_size, help="square image side in pixels")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--test-data", help="held-out dataset for per-epoch metrics (default: --data)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint directory written by train")
    p.add_argument("--data", help="dataset directory to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="module-removal and LANet-count sweep")
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--test-data", help="held-out dataset for the report (default: --data)")
    p.add_argument("--seeds", help="comma-separated seed list (overrides --seed and the config)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", parents=[common], help="attention heat-map overlay as PPM")
    p.add_argument("--checkpoint", help="checkpoint directory written by train")
    p.add_argument("--image", help="MAFT tensor or binary PGM")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"mafnet {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as e:
        print(f"mafnet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as e:
        print(f"mafnet {args.command}: format error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"mafnet {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
