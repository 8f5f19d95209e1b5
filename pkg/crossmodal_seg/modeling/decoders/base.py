""" Base class for segmentation decoders """
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from crossmodal_seg.config import NUM_STAGES, RunConfig
from crossmodal_seg.exceptions import InputError

from ..blocks import SegBlock


class IDecoder(nn.Module):

    """
    Top-down decoder over the enhanced visual pyramid

    Y4 is the stage-4 map. For i = 3, 2, 1 the previous Y is bilinearly
    upsampled 2x, concatenated with the stage-i map along channels and passed
    through a seg block mapping (C_{i+1} + C_i) -> C_i. Subclasses may
    post-process the fused stages with :meth:`refine`. A 1x1 convolution gives
    two class score maps, bilinearly upsampled to the input resolution.

    """

    #: Whether the forward pass reads the language features
    uses_language = False
    #: Use adaptive rotated convolutions in the seg blocks
    rotated = False

    def __init__(self, stage_channels: Sequence[int]):
        super(IDecoder, self).__init__()
        self.stage_channels = list(stage_channels)
        for i in range(1, NUM_STAGES):
            self.add_module(
                "fuse%d" % i,
                SegBlock(
                    stage_channels[i] + stage_channels[i - 1],
                    stage_channels[i - 1],
                    rotated=self.rotated,
                ),
            )
        self.classifier = nn.Conv2d(stage_channels[0], 2, kernel_size=1)

    @classmethod
    def configure(cls, cfg: RunConfig) -> dict:
        """Turn a run config into constructor kwargs"""
        return {"stage_channels": cfg.encoder.stage_channels}

    def refine(
        self, index: int, fused: torch.Tensor, language: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """Hook applied to the fused map of stage ``index``"""
        return fused

    def forward(
        self,
        pyramid: List[torch.Tensor],
        language: torch.Tensor,
        mask: torch.Tensor,
        output_size: Tuple[int, int],
    ) -> torch.Tensor:
        """
        Parameters
        ----------
        pyramid : list of Tensor
            The four enhanced maps, each (B, C_i, H_i, W_i)
        language : Tensor (B, N, C_t)
            L5
        mask : BoolTensor (B, N)
        output_size : (H, W)

        Returns
        -------
        logits : Tensor (B, 2, H, W)

        """
        if len(pyramid) != NUM_STAGES or any(p is None for p in pyramid):
            raise InputError("Decoder needs all %d pyramid stages" % NUM_STAGES)
        for stage, channels in zip(pyramid, self.stage_channels):
            if stage.shape[1] != channels:
                raise InputError(
                    "Pyramid stage has %d channels, expected %d" % (stage.shape[1], channels)
                )
        y = pyramid[NUM_STAGES - 1]
        for index in range(NUM_STAGES - 1, 0, -1):
            skip = pyramid[index - 1]
            up = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = getattr(self, "fuse%d" % index)(torch.cat([up, skip], dim=1))
            y = self.refine(index, y, language, mask)
        logits = self.classifier(y)
        return F.interpolate(logits, size=output_size, mode="bilinear", align_corners=False)
