""" The assembled referring segmentation model """
from typing import NamedTuple, Optional

import torch
from torch import nn

from crossmodal_seg.config import RunConfig
from crossmodal_seg.exceptions import InputError
from crossmodal_seg.models import VisualFeaturePyramid

from .decoders import IDecoder, build_decoder
from .encoders import TextEncoder, VisionBackbone
from .smgam import SMGAM, AlignmentResult


class Encoders(nn.Module):

    """Container so the encoder parameters live under ``encoders.*``"""

    def __init__(self, cfg: RunConfig):
        super(Encoders, self).__init__()
        self.vision = VisionBackbone(cfg.encoder)
        self.text = TextEncoder(cfg.encoder)


class SegmenterFeatures(NamedTuple):

    """Intermediate results of one forward pass"""

    language: torch.Tensor
    alignment: Optional[AlignmentResult]
    pyramid: VisualFeaturePyramid
    logits: torch.Tensor


class CrossModalSegmenter(nn.Module):

    """
    Encoders, optional alignment module and a decoder variant

    The decoder is registered under its variant name, so TCMD parameters are
    named ``tcmd.*``.

    """

    def __init__(self, cfg: RunConfig):
        super(CrossModalSegmenter, self).__init__()
        self.cfg = cfg
        self.encoders = Encoders(cfg)
        self.smgam = SMGAM(cfg) if cfg.smgam_enabled else None
        self.decoder_name = cfg.decoder_variant
        self.add_module(self.decoder_name, build_decoder(cfg))
        if cfg.encoder.freeze_text:
            for param in self.encoders.text.parameters():
                param.requires_grad_(False)

    @property
    def decoder(self) -> IDecoder:
        return getattr(self, self.decoder_name)

    def component_parameters(self) -> dict:
        """Parameter count per top-level component"""
        counts = {}
        for name, module in self.named_children():
            counts[name] = sum(p.numel() for p in module.parameters())
        return counts

    def forward_features(
        self, image: torch.Tensor, token_ids: torch.Tensor, pad_mask: torch.Tensor
    ) -> SegmenterFeatures:
        if image.shape[0] != token_ids.shape[0]:
            raise InputError(
                "Batch size mismatch: %d images, %d expressions"
                % (image.shape[0], token_ids.shape[0])
            )
        pad_mask = pad_mask.bool()
        language = self.encoders.text(token_ids, pad_mask)
        if self.smgam is None:
            alignment = None
            pyramid = self.encoders.vision(image)
        else:
            alignment = self.smgam(self.encoders.vision, image, language, pad_mask)
            pyramid, language = alignment.pyramid, alignment.language
        logits = self.decoder(pyramid, language, pad_mask, tuple(image.shape[-2:]))
        return SegmenterFeatures(language, alignment, VisualFeaturePyramid(pyramid), logits)

    def forward(
        self, image: torch.Tensor, token_ids: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        """
        Parameters
        ----------
        image : Tensor (B, 3, H, W)
        token_ids : LongTensor (B, N)
        pad_mask : BoolTensor (B, N)

        Returns
        -------
        logits : Tensor (B, 2, H, W)

        """
        return self.forward_features(image, token_ids, pad_mask).logits

    @torch.no_grad()
    def predict_mask(
        self, image: torch.Tensor, token_ids: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        """Binary (B, H, W) masks; ties go to background"""
        return binarize(self.forward(image, token_ids, pad_mask))


def binarize(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over the two class channels with ties broken toward background"""
    return (logits[:, 1] > logits[:, 0]).to(torch.uint8)
