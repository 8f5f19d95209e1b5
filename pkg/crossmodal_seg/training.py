"""
Training, evaluation, prediction and the ablation studies

Checkpoints ``best`` (highest validation mIoU) and ``last`` (resumable) go to
the storage backend configured in ``RunConfig.storage``. One JSON record per
epoch is appended to ``<output_dir>/<run_name>/history.jsonl``.

"""
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .checkpoint import load_checkpoint, load_resume_state, read_manifest, save_checkpoint
from .config import RunConfig, config_hash, dump_config
from .data import (
    ReferringDataset,
    Vocabulary,
    compute_normalization,
    make_loader,
    split_triplets,
)
from .data.preprocess import normalize_image, resize_image
from .data.refcoco import write_mask_png
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    InputError,
    TrainingDivergedError,
)
from .losses import combined_loss
from .metrics import EvalAccumulator, EvalReport, render_table
from .models import Triplet
from .modeling import CrossModalSegmenter, binarize, build_model, parameter_count
from .storage import get_storage_impl

LOG = logging.getLogger(__name__)

HISTORY = "history.jsonl"


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """``base_lr * (1 - step / total_steps) ** power``, clamped at the last step"""
    if total_steps <= 0:
        raise ConfigurationError("total_steps must be positive")
    progress = min(max(step, 0), total_steps) / float(total_steps)
    return base_lr * (1.0 - progress) ** power


def lr_factor(cfg: RunConfig, total_steps: int):
    """Multiplicative schedule for :class:`torch.optim.lr_scheduler.LambdaLR`"""
    if cfg.schedule.kind == "constant":
        return lambda step: 1.0
    power = cfg.schedule.power
    return lambda step: poly_lr(1.0, step, total_steps, power)


@dataclass
class TrainState:

    """
    Progress of a training run

    ``best_val_miou`` is None until the first validation and never decreases.

    """

    step: int = 0
    epoch: int = 0
    current_lr: float = 0.0
    best_val_miou: Optional[float] = None
    total_steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainState":
        return cls(**data)


class TrainResult(object):

    """What :func:`train` returns"""

    def __init__(self, model, cfg, vocab, normalization, state, history, storage):
        self.model = model
        self.cfg = cfg
        self.vocab = vocab
        self.normalization = normalization
        self.state = state
        self.history = history
        self.storage = storage

    @property
    def losses(self) -> List[float]:
        return [record["loss"] for record in self.history]


def prepare_preprocessing(
    cfg: RunConfig, triplets: Sequence[Triplet]
) -> Tuple[RunConfig, Vocabulary, Dict[str, List[float]]]:
    """Build the vocabulary and normalization from the training split"""
    train_set = split_triplets(triplets, "train")
    if not train_set:
        raise InputError("The dataset has no train split")
    vocab = Vocabulary.build(t.expression for t in train_set)
    if cfg.encoder.text_vocab_size == 0:
        cfg = cfg.replace(**{"encoder.text_vocab_size": len(vocab)})
    elif cfg.encoder.text_vocab_size < len(vocab):
        raise ConfigurationError(
            "encoder.text_vocab_size=%d is smaller than the vocabulary (%d)"
            % (cfg.encoder.text_vocab_size, len(vocab))
        )
    if cfg.data.mean is not None and cfg.data.std is not None:
        normalization = {"mean": list(cfg.data.mean), "std": list(cfg.data.std)}
    else:
        normalization = compute_normalization(train_set)
    return cfg, vocab, normalization


def build_optimizer(model: CrossModalSegmenter, cfg: RunConfig) -> torch.optim.Optimizer:
    """AdamW; encoder parameters may use a scaled learning rate"""
    backbone, rest = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        (backbone if name.startswith("encoders.") else rest).append(param)
    groups = []
    if backbone:
        groups.append(
            {"params": backbone, "lr": cfg.optimizer.lr * cfg.optimizer.backbone_lr_scale}
        )
    groups.append({"params": rest, "lr": cfg.optimizer.lr})
    return torch.optim.AdamW(groups, lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay)


@torch.no_grad()
def evaluate_model(
    model: CrossModalSegmenter,
    dataset: ReferringDataset,
    cfg: RunConfig,
    categories: Optional[Sequence[str]] = None,
) -> EvalReport:
    """Score a model on a preprocessed dataset at model resolution"""
    was_training = model.training
    model.eval()
    acc = EvalAccumulator(cfg.eval.thresholds, cfg.eval.empty_iou)
    loader = make_loader(dataset, cfg.batch_size, num_workers=cfg.data.num_workers)
    device = next(model.parameters()).device
    for batch in loader:
        preds = model.predict_mask(
            batch["image"].to(device), batch["token_ids"].to(device), batch["pad_mask"].to(device)
        ).cpu()
        for i, index in enumerate(batch["index"].tolist()):
            category = categories[index] if categories is not None else None
            acc.add(preds[i].numpy(), batch["mask"][i].numpy(), category)
    model.train(was_training)
    return acc.finalize()


class Trainer(object):

    """
    Owns the model, optimizer and schedule of one run

    Parameters
    ----------
    cfg : :class:`~crossmodal_seg.config.RunConfig`
        With ``encoder.text_vocab_size`` already set
    train_set : :class:`~crossmodal_seg.data.ReferringDataset`
    model : :class:`~crossmodal_seg.modeling.CrossModalSegmenter`, optional
        Defaults to a freshly built model

    """

    def __init__(self, cfg: RunConfig, train_set: ReferringDataset, model=None):
        self.cfg = cfg
        self.train_set = train_set
        self.device = torch.device(cfg.device)
        self.model = (model or build_model(cfg)).to(self.device)
        self.steps_per_epoch = int(math.ceil(len(train_set) / float(cfg.batch_size)))
        self.state = TrainState(total_steps=self.steps_per_epoch * cfg.epochs)
        self.optimizer = build_optimizer(self.model, cfg)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, lr_factor(cfg, self.state.total_steps)
        )
        self.state.current_lr = self.current_lr

    @property
    def current_lr(self) -> float:
        return float(self.optimizer.param_groups[-1]["lr"])

    def resume_state(self) -> Dict[str, Any]:
        return {
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "train_state": self.state.to_dict(),
        }

    def restore(self, resume: Mapping[str, Any]) -> None:
        self.optimizer.load_state_dict(resume["optimizer"])
        self.scheduler.load_state_dict(resume["scheduler"])
        torch.set_rng_state(resume["torch_rng"])
        self.state = TrainState.from_dict(resume["train_state"])

    def train_step(self, batch: Mapping[str, torch.Tensor]) -> Dict[str, float]:
        """One forward/backward/update; returns the loss terms"""
        self.model.train()
        logits = self.model(
            batch["image"].to(self.device),
            batch["token_ids"].to(self.device),
            batch["pad_mask"].to(self.device),
        )
        terms = combined_loss(logits, batch["mask"].to(self.device), self.cfg.loss)
        lr = self.current_lr
        if not torch.isfinite(terms.total):
            ids = [self.train_set.triplets[i].ident for i in batch["index"].tolist()]
            raise TrainingDivergedError(self.state.step, lr, ids)
        self.optimizer.zero_grad()
        terms.total.backward()
        self.optimizer.step()
        self.scheduler.step()
        self.state.step += 1
        self.state.current_lr = self.current_lr
        return {
            "loss": float(terms.total),
            "loss_ce": float(terms.ce),
            "loss_dice": float(terms.dice),
            "lr": lr,
        }

    def train_epoch(self, epoch: int) -> Dict[str, float]:
        """Run one epoch in the (seed, epoch) data order; returns mean loss terms"""
        loader = make_loader(
            self.train_set,
            self.cfg.batch_size,
            shuffle=True,
            seed=self.cfg.seed,
            epoch=epoch,
            num_workers=self.cfg.data.num_workers,
        )
        sums = {"loss": 0.0, "loss_ce": 0.0, "loss_dice": 0.0}
        count = 0
        for batch in loader:
            terms = self.train_step(batch)
            for key in sums:
                sums[key] += terms[key]
            count += 1
        self.state.epoch = epoch
        return {key: value / max(count, 1) for key, value in sums.items()}


def train(
    cfg: RunConfig,
    triplets: Sequence[Triplet],
    storage=None,
    resume: Optional[str] = None,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """
    Train a model and keep the best and last checkpoints

    Parameters
    ----------
    cfg : :class:`~crossmodal_seg.config.RunConfig`
    triplets : list
        Must contain train and val splits
    storage : :class:`~crossmodal_seg.storage.ICheckpointStorage`, optional
        Defaults to the backend configured in ``cfg.storage``
    resume : str, optional
        Name of a resumable checkpoint in ``storage`` to continue from
    stop_after : int, optional
        Stop after this many epochs in this invocation (the schedule still
        spans ``cfg.epochs``)

    Returns
    -------
    result : :class:`.TrainResult`

    Raises
    ------
    exc : :class:`~crossmodal_seg.exceptions.TrainingDivergedError`
        If the loss becomes NaN or infinite

    """
    if storage is None:
        storage = get_storage_impl(cfg.storage_settings())()
    if resume is not None:
        manifest = read_manifest(storage, resume)
        cfg = RunConfig.from_dict(manifest["config"])
        vocab = Vocabulary(manifest["vocab"])
        normalization = manifest["normalization"]
    else:
        cfg, vocab, normalization = prepare_preprocessing(cfg, triplets)
    val_triplets = split_triplets(triplets, "val")
    if not val_triplets:
        raise InputError("The dataset has no val split")
    train_set = _dataset(cfg, split_triplets(triplets, "train"), vocab, normalization, augment=True)
    val_set = _dataset(cfg, val_triplets, vocab, normalization)
    val_categories = [t.category for t in val_triplets]

    history = []  # type: List[dict]
    run_dir = cfg.run_dir()
    if not os.path.exists(run_dir):
        os.makedirs(run_dir)
    history_path = os.path.join(run_dir, HISTORY)
    dump_config(cfg, os.path.join(run_dir, "config.json"))

    if resume is not None:
        loaded = load_checkpoint(storage, resume, cfg.device)
        trainer = Trainer(cfg, train_set, model=loaded.model)
        trainer.restore(load_resume_state(storage, resume))
        start = trainer.state.epoch + 1
        history = _read_history(history_path, start)
        LOG.info("Resuming %s at epoch %d (step %d)", cfg.run_name, start, trainer.state.step)
    else:
        trainer = Trainer(cfg, train_set)
        start = 1
    _write_history(history_path, history)

    stop = cfg.epochs if stop_after is None else min(cfg.epochs, start - 1 + stop_after)
    started = time.time()
    for epoch in range(start, stop + 1):
        terms = trainer.train_epoch(epoch)
        report = evaluate_model(trainer.model, val_set, cfg, val_categories)
        record = dict(terms)
        record.update(
            {
                "epoch": epoch,
                "step": trainer.state.step,
                "lr": trainer.state.current_lr,
                "val": report.to_dict(),
                "elapsed": time.time() - started,
            }
        )
        history.append(record)
        with open(history_path, "a") as ofile:
            ofile.write(json.dumps(record, sort_keys=True) + "\n")
        LOG.info(
            "epoch %d/%d step %d lr %.3g loss %.4f (ce %.4f dice %.4f) val mIoU %.4f",
            epoch,
            cfg.epochs,
            trainer.state.step,
            trainer.state.current_lr,
            terms["loss"],
            terms["loss_ce"],
            terms["loss_dice"],
            report.miou,
        )
        best = trainer.state.best_val_miou
        if best is None or report.miou > best:
            trainer.state.best_val_miou = report.miou
            save_checkpoint(
                storage, "best", trainer.model, cfg, vocab.tokens, normalization,
                trainer.state.to_dict(),
            )
        save_checkpoint(
            storage, "last", trainer.model, cfg, vocab.tokens, normalization,
            trainer.state.to_dict(), trainer.resume_state(),
        )
    return TrainResult(
        trainer.model, cfg, vocab, normalization, trainer.state, history, storage
    )


def _dataset(cfg, triplets, vocab, normalization, augment=False) -> ReferringDataset:
    return ReferringDataset(
        triplets,
        cfg.encoder.image_size,
        vocab,
        normalization,
        cfg.encoder.max_tokens,
        hflip=augment and cfg.data.hflip,
        vflip=augment and cfg.data.vflip,
        rotate=augment and cfg.data.rotate,
        seed=cfg.seed,
    )


def _read_history(path: str, before_epoch: int) -> List[dict]:
    if not os.path.exists(path):
        return []
    with open(path, "r") as ifile:
        records = [json.loads(line) for line in ifile if line.strip()]
    return [r for r in records if r["epoch"] < before_epoch]


def _write_history(path: str, history: Sequence[dict]) -> None:
    with open(path, "w") as ofile:
        for record in history:
            ofile.write(json.dumps(record, sort_keys=True) + "\n")


def evaluate(
    storage,
    name: str,
    triplets: Sequence[Triplet],
    split: str = "test",
    cfg: Optional[RunConfig] = None,
) -> EvalReport:
    """
    Evaluate a stored checkpoint on one split

    If ``cfg`` is given, its config hash (with the checkpoint's vocabulary and
    normalization) must equal the checkpoint's.

    """
    loaded = load_checkpoint(storage, name)
    if cfg is not None:
        expected = loaded.manifest["config_hash"]
        actual = config_hash(cfg, loaded.vocab, loaded.normalization)
        if actual != expected:
            raise CheckpointError(
                "Refusing to evaluate %s: the given config hashes to %s but the "
                "checkpoint was trained with %s; model shapes or preprocessing differ"
                % (storage.describe(name), actual[:12], expected[:12])
            )
    selected = split_triplets(triplets, split)
    if not selected:
        raise InputError("The dataset has no %s split" % split)
    dataset = _dataset(loaded.cfg, selected, Vocabulary(loaded.vocab), loaded.normalization)
    return evaluate_model(loaded.model, dataset, loaded.cfg, [t.category for t in selected])


@torch.no_grad()
def predict(
    storage,
    name: str,
    image: np.ndarray,
    expression: str,
    mask_path: Optional[str] = None,
    overlay_path: Optional[str] = None,
) -> np.ndarray:
    """
    Segment the object an expression refers to

    Parameters
    ----------
    storage : :class:`~crossmodal_seg.storage.ICheckpointStorage`
    name : str
        Checkpoint name
    image : :class:`numpy.ndarray`
        uint8 (H, W, 3) image of any size
    expression : str
    mask_path : str, optional
        Write the mask here as a PNG
    overlay_path : str, optional
        Write the image with the mask blended in red

    Returns
    -------
    mask : :class:`numpy.ndarray`
        Boolean (H, W) mask at the original image size

    """
    if not expression or not expression.strip():
        raise InputError("Expression must not be empty")
    loaded = load_checkpoint(storage, name)
    cfg = loaded.cfg
    model = loaded.model.eval()
    tokens = Vocabulary(loaded.vocab).encode(expression, cfg.encoder.max_tokens)
    pixels = normalize_image(resize_image(image, cfg.encoder.image_size), loaded.normalization)
    logits = model(pixels[None], tokens.token_ids[None], tokens.pad_mask[None])
    logits = F.interpolate(logits, size=image.shape[:2], mode="bilinear", align_corners=False)
    mask = binarize(logits)[0].numpy().astype(bool)
    if mask_path is not None:
        write_mask_png(mask, mask_path)
    if overlay_path is not None:
        render_overlay(image, mask).save(overlay_path)
    return mask


def render_overlay(image: np.ndarray, mask: np.ndarray, alpha: int = 128) -> Image.Image:
    """Alpha-blend a red mask over an image"""
    base = Image.fromarray(image).convert("RGBA")
    layer = Image.new("RGBA", base.size, (255, 0, 0, 0))
    layer.putalpha(Image.fromarray(np.asarray(mask, dtype=np.uint8) * alpha))
    return Image.alpha_composite(base, layer).convert("RGB")


ABLATIONS = (
    ("baseline", {"use_smgam_lgvla": False, "use_smgam_vglva": False, "decoder_variant": "standard"}),
    ("smgam", {"use_smgam_lgvla": True, "use_smgam_vglva": True, "decoder_variant": "standard"}),
    ("tcmd", {"use_smgam_lgvla": False, "use_smgam_vglva": False, "decoder_variant": "tcmd"}),
    ("full", {"use_smgam_lgvla": True, "use_smgam_vglva": True, "decoder_variant": "tcmd"}),
)
SUBMODULE_ABLATIONS = (
    ("lgvla+tcmd", {"use_smgam_lgvla": True, "use_smgam_vglva": False, "decoder_variant": "tcmd"}),
    ("vglva+tcmd", {"use_smgam_lgvla": False, "use_smgam_vglva": True, "decoder_variant": "tcmd"}),
)


class StudyRow(object):

    """One trained variant of a comparison study"""

    def __init__(self, name: str, cfg: RunConfig, parameters: int, report: EvalReport):
        self.name = name
        self.cfg = cfg
        self.parameters = parameters
        self.report = report


def run_study(
    cfg: RunConfig,
    triplets: Sequence[Triplet],
    variants: Sequence[Tuple[str, Mapping[str, Any]]],
    split: str = "test",
) -> List[StudyRow]:
    """Train every variant from the same seed and evaluate its best checkpoint"""
    rows = []
    for name, overrides in variants:
        variant_cfg = cfg.replace(run_name="%s-%s" % (cfg.run_name, name), **overrides)
        LOG.info("Training variant %s", name)
        result = train(variant_cfg, triplets)
        selected = split_triplets(triplets, split) or split_triplets(triplets, "val")
        report = evaluate(result.storage, "best", selected, selected[0].split)
        rows.append(StudyRow(name, result.cfg, parameter_count(result.model), report))
    return rows


def study_table(rows: Sequence[StudyRow], title: str) -> str:
    return render_table([(row.name, row.report) for row in rows], title)


def ablate(
    cfg: RunConfig,
    triplets: Sequence[Triplet],
    include_submodules: bool = False,
    split: str = "test",
) -> List[StudyRow]:
    """Toggle SMGAM and TCMD: baseline, SMGAM only, TCMD only, both"""
    variants = list(ABLATIONS)
    if include_submodules:
        variants.extend(SUBMODULE_ABLATIONS)
    return run_study(cfg, triplets, variants, split)


def compare_decoders(
    cfg: RunConfig, triplets: Sequence[Triplet], split: str = "test"
) -> List[StudyRow]:
    """Swap the decoder (tcmd, standard, oad) behind the full alignment module"""
    variants = [
        (
            variant,
            {"use_smgam_lgvla": True, "use_smgam_vglva": True, "decoder_variant": variant},
        )
        for variant in ("tcmd", "standard", "oad")
    ]
    return run_study(cfg, triplets, variants, split)
