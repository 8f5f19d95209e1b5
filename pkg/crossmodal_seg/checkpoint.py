"""
Checkpoint format

A checkpoint is three files in a :class:`~crossmodal_seg.storage.ICheckpointStorage`:

``weights.npz``
    Flat ``{parameter name: array}`` map of the model state dict
``manifest.json``
    Format version, run config, config hash, per-parameter shape and dtype,
    vocabulary, normalization, train state and a SHA-256 of ``weights.npz``
``optimizer.pt``
    Optimizer, scheduler and RNG state; only in resumable checkpoints

"""
import hashlib
import io
import json
import logging
import os
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .config import RunConfig, config_hash
from .exceptions import CheckpointError
from .modeling import CrossModalSegmenter, build_model

LOG = logging.getLogger(__name__)

FORMAT_VERSION = 1
WEIGHTS = "weights.npz"
MANIFEST = "manifest.json"
OPTIMIZER = "optimizer.pt"


class LoadedCheckpoint(NamedTuple):
    model: CrossModalSegmenter
    cfg: RunConfig
    vocab: List[str]
    normalization: Dict[str, List[float]]
    train_state: Dict[str, Any]
    manifest: Dict[str, Any]


def encode_weights(module: nn.Module) -> bytes:
    """Serialize a state dict as an uncompressed npz archive"""
    arrays = {
        name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def decode_weights(data: bytes) -> Dict[str, np.ndarray]:
    with np.load(io.BytesIO(data), allow_pickle=False) as archive:
        return {name: archive[name] for name in archive.files}


def save_checkpoint(
    storage,
    name: str,
    model: CrossModalSegmenter,
    cfg: RunConfig,
    vocab: List[str],
    normalization: Mapping[str, List[float]],
    train_state: Optional[Mapping[str, Any]] = None,
    resume_state: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Write a checkpoint

    Parameters
    ----------
    storage : :class:`~crossmodal_seg.storage.ICheckpointStorage`
    name : str
    model : :class:`~crossmodal_seg.modeling.CrossModalSegmenter`
    cfg : :class:`~crossmodal_seg.config.RunConfig`
    vocab : list
        Vocabulary tokens in id order
    normalization : dict
        ``{"mean": [...], "std": [...]}``
    train_state : dict, optional
        JSON-serializable training progress
    resume_state : dict, optional
        Optimizer/scheduler/RNG state; written to ``optimizer.pt``

    Returns
    -------
    manifest : dict

    """
    weights = encode_weights(model)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg, vocab, normalization),
        "parameters": {
            key: {"shape": list(value.shape), "dtype": str(value.dtype).replace("torch.", "")}
            for key, value in model.state_dict().items()
        },
        "vocab": list(vocab),
        "normalization": dict(normalization),
        "train_state": dict(train_state or {}),
        "weights_sha256": hashlib.sha256(weights).hexdigest(),
    }
    files = {
        WEIGHTS: weights,
        MANIFEST: json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"),
    }
    if resume_state is not None:
        buf = io.BytesIO()
        torch.save(dict(resume_state), buf)
        files[OPTIMIZER] = buf.getvalue()
    storage.save(name, files)
    LOG.info("Saved checkpoint %s", storage.describe(name))
    return manifest


def read_manifest(storage, name: str) -> Dict[str, Any]:
    try:
        return json.loads(storage.read(name, MANIFEST).decode("utf-8"))
    except ValueError as e:
        raise CheckpointError("Corrupt manifest in %s: %s" % (storage.describe(name), e))


def load_checkpoint(storage, name: str, device: str = "cpu") -> LoadedCheckpoint:
    """
    Rebuild the model stored in a checkpoint

    Raises
    ------
    exc : :class:`~crossmodal_seg.exceptions.CheckpointError`
        If files are missing, the weights do not match the manifest or the
        stored config does not hash to the stored config hash

    """
    manifest = read_manifest(storage, name)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            "Unsupported checkpoint format %r" % manifest.get("format_version")
        )
    data = storage.read(name, WEIGHTS)
    if hashlib.sha256(data).hexdigest() != manifest["weights_sha256"]:
        raise CheckpointError("Weights of %s do not match the manifest" % storage.describe(name))
    cfg = RunConfig.from_dict(manifest["config"])
    vocab = manifest["vocab"]
    normalization = manifest["normalization"]
    if config_hash(cfg, vocab, normalization) != manifest["config_hash"]:
        raise CheckpointError(
            "Config hash mismatch in %s; the manifest was edited or written by an "
            "incompatible version" % storage.describe(name)
        )
    arrays = decode_weights(data)
    for key, meta in manifest["parameters"].items():
        if key not in arrays or list(arrays[key].shape) != meta["shape"]:
            raise CheckpointError("Parameter %s does not match the manifest" % key)
    model = build_model(cfg)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.to(device)
    return LoadedCheckpoint(
        model, cfg, vocab, normalization, manifest.get("train_state", {}), manifest
    )


def load_resume_state(storage, name: str) -> Dict[str, Any]:
    """Optimizer, scheduler and RNG state of a resumable checkpoint"""
    if not storage.exists(name, OPTIMIZER):
        raise CheckpointError("Checkpoint %s is not resumable" % storage.describe(name))
    with storage.open(name, OPTIMIZER) as ifile:
        return torch.load(io.BytesIO(ifile.read()), map_location="cpu", weights_only=False)


def load_pretrained(
    module: nn.Module, path: str, prefix: str = "", strict: bool = False
) -> Tuple[List[str], List[str]]:
    """
    Load externally exported weights into a module

    Parameters
    ----------
    module : :class:`torch.nn.Module`
        The whole model or one of its components
    path : str
        A ``.npz`` file or a checkpoint directory containing ``weights.npz``
    prefix : str, optional
        Only keys under this prefix are used, with the prefix stripped, e.g.
        ``"encoders.vision."`` to load a backbone into a
        :class:`~crossmodal_seg.modeling.encoders.VisionBackbone`
    strict : bool, optional
        Raise if any module parameter is missing or any key is unused

    Returns
    -------
    missing : list
        Module keys that were not in the file
    unexpected : list
        File keys under ``prefix`` that the module does not have

    """
    if os.path.isdir(path):
        path = os.path.join(path, WEIGHTS)
    try:
        with open(path, "rb") as ifile:
            arrays = decode_weights(ifile.read())
    except (OSError, ValueError) as e:
        raise CheckpointError("Could not read pretrained weights %s: %s" % (path, e))
    selected = {
        key[len(prefix) :]: value for key, value in arrays.items() if key.startswith(prefix)
    }
    own = module.state_dict()
    missing = sorted(k for k in own if k not in selected)
    unexpected = sorted(k for k in selected if k not in own)
    if strict and (missing or unexpected):
        raise CheckpointError(
            "Pretrained weights do not match: missing %s, unexpected %s"
            % (missing, unexpected)
        )
    update = {}
    for key, value in selected.items():
        if key not in own:
            continue
        if tuple(own[key].shape) != value.shape:
            raise CheckpointError(
                "Shape mismatch for %s%s: %s vs %s"
                % (prefix, key, tuple(own[key].shape), value.shape)
            )
        update[key] = torch.from_numpy(value).to(own[key].dtype)
    module.load_state_dict(update, strict=False)
    LOG.info(
        "Loaded %d pretrained tensors from %s (%d missing, %d unexpected)",
        len(update),
        path,
        len(missing),
        len(unexpected),
    )
    return missing, unexpected
