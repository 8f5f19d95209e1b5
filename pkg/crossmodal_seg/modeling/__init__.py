""" Model assembly """
import logging

import torch

from crossmodal_seg.config import NUM_STAGES, RunConfig
from crossmodal_seg.exceptions import BuildError, ConfigurationError

from .segmenter import CrossModalSegmenter, binarize

LOG = logging.getLogger(__name__)


def _check_edges(cfg: RunConfig) -> None:
    channels = cfg.encoder.stage_channels
    if len(channels) != NUM_STAGES:
        raise BuildError(
            "encoder.stage_channels has %d entries, expected %d" % (len(channels), NUM_STAGES)
        )
    for i in range(NUM_STAGES - 1):
        if channels[i + 1] != 2 * channels[i]:
            raise BuildError(
                "Edge encoders.vision.stage%d -> stage%d: %d channels cannot feed a "
                "patch merge producing %d" % (i + 1, i + 2, channels[i], channels[i + 1])
            )
    if cfg.encoder.text_vocab_size < 3:
        raise BuildError(
            "Edge vocabulary -> encoders.text: text_vocab_size is %d; build the "
            "vocabulary before the model" % cfg.encoder.text_vocab_size
        )


def build_model(cfg: RunConfig, seed=None) -> CrossModalSegmenter:
    """
    Wire encoders, SMGAM (per the enabled flags) and the decoder variant

    Parameters
    ----------
    cfg : :class:`~crossmodal_seg.config.RunConfig`
    seed : int, optional
        Initialization seed. Defaults to ``cfg.seed``. The global torch RNG is
        left untouched.

    """
    try:
        cfg.validate()
    except ConfigurationError as e:
        raise BuildError(str(e))
    _check_edges(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed if seed is None else seed)
        model = CrossModalSegmenter(cfg)
    counts = model.component_parameters()
    LOG.info(
        "Built %s model (lgvla=%s, vglva=%s): %d parameters (%s)",
        cfg.decoder_variant,
        cfg.use_smgam_lgvla,
        cfg.use_smgam_vglva,
        sum(counts.values()),
        ", ".join("%s=%d" % item for item in sorted(counts.items())),
    )
    return model


def parameter_count(model: torch.nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


__all__ = ["CrossModalSegmenter", "binarize", "build_model", "parameter_count"]
