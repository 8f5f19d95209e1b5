""" Commandline scripts """
import argparse
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .config import PRESETS, RunConfig, load_config
from .data import generate_synthetic, load_refcoco_dir, write_refcoco_dir
from .data.synthetic import SyntheticSceneSpec
from .exceptions import CrossModalSegError, UsageError
from .models import Triplet
from .storage import get_storage_impl
from .training import ablate as run_ablation
from .training import compare_decoders as run_decoder_comparison
from .training import evaluate as evaluate_checkpoint
from .training import predict as predict_mask
from .training import study_table, train as train_model
from .util import get_cache_dir, parse_override

LOG = logging.getLogger(__name__)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _run(fxn: Callable[[argparse.Namespace], None], args: argparse.Namespace) -> None:
    _setup_logging(getattr(args, "verbose", False))
    try:
        fxn(args)
    except CrossModalSegError as e:
        LOG.error("%s", e)
        sys.exit(1)


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument(
        "--preset", choices=sorted(PRESETS), help="Base preset when the config names none"
    )
    parser.add_argument("--data", help="Dataset directory (default: data.root or the cache)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--device")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override any dotted config key, e.g. --set encoder.image_size=128",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")


def parse_set_args(pairs: List[str]) -> Dict[str, object]:
    """Turn ``key=value`` strings into an overrides dict"""
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError("Expected KEY=VALUE, got %r" % pair)
        key, value = pair.split("=", 1)
        overrides[key.strip()] = parse_override(value)
    return overrides


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Config file, then ``--set`` overrides, then the dedicated flags"""
    overrides = parse_set_args(args.set)
    for flag, key in (
        ("seed", "seed"),
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("lr", "optimizer.lr"),
        ("device", "device"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "data", None):
        overrides["data.root"] = args.data
    return load_config(args.config, overrides, preset=args.preset)


def _dataset_root(cfg: RunConfig) -> str:
    return cfg.data.root or os.path.join(get_cache_dir(), "synthetic")


def load_dataset(cfg: RunConfig) -> List[Triplet]:
    return load_refcoco_dir(_dataset_root(cfg))


def checkpoint_location(path: str) -> Tuple[object, str]:
    """
    Storage backend and checkpoint name for a checkpoint path

    ``runs/exp/best`` is a file checkpoint; ``s3://bucket/prefix/best`` an S3 one.

    """
    path = path.rstrip("/")
    if path.startswith("s3://"):
        bucket, _, key = path[len("s3://") :].partition("/")
        prefix, _, name = key.rpartition("/")
        settings = {"storage.backend": "s3", "storage.bucket": bucket, "storage.prefix": prefix}
    else:
        directory, name = os.path.split(os.path.abspath(path))
        settings = {"storage.backend": "file", "storage.dir": directory}
    return get_storage_impl(settings)(), name


def train(argv=None):
    """Train a model and save its best and last checkpoints"""
    if argv is None:
        argv = sys.argv[1:]
    parser = argparse.ArgumentParser(description=train.__doc__)
    _add_config_args(parser)
    parser.add_argument("--resume", help="Continue from this checkpoint name in the run directory")
    args = parser.parse_args(argv)

    def _train(args):
        cfg = config_from_args(args)
        result = train_model(cfg, load_dataset(cfg), resume=args.resume)
        print(
            "Best val mIoU %.4f; checkpoints in %s"
            % (result.state.best_val_miou, result.storage.describe("best"))
        )

    _run(_train, args)


def evaluate(argv=None):
    """Evaluate a checkpoint on one split of a dataset"""
    if argv is None:
        argv = sys.argv[1:]
    parser = argparse.ArgumentParser(description=evaluate.__doc__)
    parser.add_argument("--checkpoint", required=True, help="Checkpoint path")
    parser.add_argument("--data", required=True, help="Dataset directory")
    parser.add_argument("--split", default="test", help="(default %(default)s)")
    parser.add_argument("--config", help="Refuse to evaluate unless this config matches")
    parser.add_argument("--json", help="Also write the report as JSON to this file")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    def _evaluate(args):
        storage, name = checkpoint_location(args.checkpoint)
        cfg = load_config(args.config) if args.config else None
        triplets = load_refcoco_dir(args.data, args.split)
        report = evaluate_checkpoint(storage, name, triplets, args.split, cfg)
        if args.json:
            with open(args.json, "w") as ofile:
                ofile.write(report.to_json())
        print(report.to_table("%s on %s" % (name, args.split)), end="")

    _run(_evaluate, args)


def predict(argv=None):
    """Segment the object an expression refers to in one image"""
    if argv is None:
        argv = sys.argv[1:]
    parser = argparse.ArgumentParser(description=predict.__doc__)
    parser.add_argument("--checkpoint", required=True, help="Checkpoint path")
    parser.add_argument("--image", required=True)
    parser.add_argument("--expr", required=True, help="Referring expression")
    parser.add_argument("-o", "--out", help="Mask PNG (default <image>_mask.png)")
    parser.add_argument(
        "--overlay",
        nargs="?",
        const="",
        help="Also write an overlay PNG (default <image>_overlay.png)",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    def _predict(args):
        stem = os.path.splitext(args.image)[0]
        out = args.out or stem + "_mask.png"
        overlay = None
        if args.overlay is not None:
            overlay = args.overlay or stem + "_overlay.png"
        storage, name = checkpoint_location(args.checkpoint)
        with Image.open(args.image) as img:
            image = np.asarray(img.convert("RGB"), dtype=np.uint8)
        mask = predict_mask(storage, name, image, args.expr, out, overlay)
        print("Wrote %s (%d foreground pixels)" % (out, int(mask.sum())))

    _run(_predict, args)


def make_synthetic(argv=None):
    """Generate a synthetic referring-expression dataset"""
    if argv is None:
        argv = sys.argv[1:]
    parser = argparse.ArgumentParser(description=make_synthetic.__doc__)
    parser.add_argument("--out", help="Output directory (default: the dataset cache)")
    parser.add_argument("--count", type=int, default=16, help="(default %(default)s)")
    parser.add_argument("--seed", type=int, default=0, help="(default %(default)s)")
    parser.add_argument("--canvas-size", type=int, default=64, help="(default %(default)s)")
    parser.add_argument("--shapes", type=int, default=2, help="Shapes per scene")
    parser.add_argument("--mask-format", choices=("png", "rle"), default="png")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    def _make(args):
        out = args.out or os.path.join(get_cache_dir(), "synthetic")
        spec = SyntheticSceneSpec(
            canvas_size=args.canvas_size,
            num_shapes=args.shapes,
            referrals_per_scene=min(2, args.shapes),
        )
        triplets = generate_synthetic(args.seed, args.count, spec)
        path = write_refcoco_dir(triplets, out, args.mask_format)
        print("Wrote %d triplets to %s" % (len(triplets), path))

    _run(_make, args)


def ablate(argv=None):
    """Train the SMGAM/TCMD ablation variants and print a comparison table"""
    if argv is None:
        argv = sys.argv[1:]
    parser = argparse.ArgumentParser(description=ablate.__doc__)
    _add_config_args(parser)
    parser.add_argument(
        "--submodules",
        action="store_true",
        help="Also train LGVLA-only and VGLVA-only variants",
    )
    parser.add_argument("--split", default="test", help="(default %(default)s)")
    args = parser.parse_args(argv)

    def _ablate(args):
        cfg = config_from_args(args)
        rows = run_ablation(cfg, load_dataset(cfg), args.submodules, args.split)
        print(study_table(rows, "Ablation on %s" % args.split), end="")
        for row in rows:
            print("%-12s %d parameters" % (row.name, row.parameters))

    _run(_ablate, args)


def compare_decoders(argv=None):
    """Train the full model with each decoder variant and print a comparison table"""
    if argv is None:
        argv = sys.argv[1:]
    parser = argparse.ArgumentParser(description=compare_decoders.__doc__)
    _add_config_args(parser)
    parser.add_argument("--split", default="test", help="(default %(default)s)")
    args = parser.parse_args(argv)

    def _compare(args):
        cfg = config_from_args(args)
        rows = run_decoder_comparison(cfg, load_dataset(cfg), args.split)
        print(study_table(rows, "Decoders on %s" % args.split), end="")

    _run(_compare, args)


COMMANDS = {
    "train": train,
    "evaluate": evaluate,
    "predict": predict,
    "make-synthetic": make_synthetic,
    "ablate": ablate,
    "compare-decoders": compare_decoders,
}


def main(argv: Optional[List[str]] = None):
    """Dispatch ``crossmodal-seg <command> ...``"""
    if argv is None:
        argv = sys.argv[1:]
    if not argv or argv[0] not in COMMANDS:
        print("usage: crossmodal-seg {%s} ..." % ",".join(COMMANDS), file=sys.stderr)
        sys.exit(2)
    COMMANDS[argv[0]](argv[1:])
