"""
Vision backbone and text encoder

Both are miniature from-scratch implementations with the stage/shape contract
of a hierarchical windowed vision transformer and a transformer text encoder.
Pretrained weights exported under the same parameter names can be loaded with
:func:`crossmodal_seg.checkpoint.load_pretrained`.

Parameter naming::

    encoders.vision.patch_embed.{proj,norm}.*
    encoders.vision.stages.{0..3}.{merge,blocks.{j},norm}.*
    encoders.text.{token_embed,pos_embed,blocks.{j},norm}.*

"""
import logging
from typing import List

import torch
from torch import nn

from crossmodal_seg.config import NUM_STAGES, EncoderConfig
from crossmodal_seg.exceptions import ConfigurationError, InputError, UsageError
from crossmodal_seg.models import LanguageFeatures, TokenizedExpression

from .attention import TransformerBlock, WindowedTransformerBlock

LOG = logging.getLogger(__name__)


class PatchEmbed(nn.Module):

    """Non-overlapping patch projection followed by LayerNorm"""

    def __init__(self, patch_size: int, channels: int):
        super(PatchEmbed, self).__init__()
        self.proj = nn.Conv2d(3, channels, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(channels)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = self.proj(image)
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class PatchMerging(nn.Module):

    """Concatenate each 2x2 neighbourhood and project 4C -> 2C"""

    def __init__(self, channels: int):
        super(PatchMerging, self).__init__()
        self.norm = nn.LayerNorm(4 * channels)
        self.reduction = nn.Linear(4 * channels, 2 * channels, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 2, 3, 1)
        x = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]],
            dim=-1,
        )
        return self.reduction(self.norm(x)).permute(0, 3, 1, 2)


class VisionStage(nn.Module):

    """Optional patch merging, ``depth`` transformer blocks, output LayerNorm"""

    def __init__(self, cfg: EncoderConfig, index: int):
        super(VisionStage, self).__init__()
        channels = cfg.stage_channels[index]
        self.merge = PatchMerging(channels // 2) if index > 0 else None
        self.blocks = nn.ModuleList(
            [
                WindowedTransformerBlock(
                    channels, cfg.num_heads, cfg.window_size, cfg.mlp_ratio, cfg.dropout
                )
                for _ in range(cfg.stage_depths[index])
            ]
        )
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.merge is not None:
            x = self.merge(x)
        batch, channels, height, width = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        for block in self.blocks:
            tokens = block(tokens, (height, width))
        tokens = self.norm(tokens)
        return tokens.transpose(1, 2).reshape(batch, channels, height, width)


class VisionBackbone(nn.Module):

    """Four-stage hierarchical encoder: H/4, H/8, H/16, H/32"""

    def __init__(self, cfg: EncoderConfig):
        super(VisionBackbone, self).__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.stage_channels[0])
        self.stages = nn.ModuleList([VisionStage(cfg, i) for i in range(NUM_STAGES)])

    def stem(self, image: torch.Tensor) -> torch.Tensor:
        """
        Patch embedding and the first stage

        Parameters
        ----------
        image : Tensor (B, 3, H, W)
            Normalized image; H and W must equal ``image_size``

        Returns
        -------
        V1 : Tensor (B, C1, H/4, W/4)

        """
        if image.dim() != 4 or image.shape[1] != 3:
            raise InputError("Expected a (B, 3, H, W) image, got %s" % list(image.shape))
        if not torch.isfinite(image).all():
            raise InputError("Image contains non-finite values")
        size = self.cfg.image_size
        height, width = image.shape[-2:]
        if (height, width) != (size, size):
            raise InputError(
                "Image size %dx%d does not match image_size %d; resize before the model"
                % (height, width, size)
            )
        return self.stages[0](self.patch_embed(image))

    def stage(self, index: int, features: torch.Tensor) -> torch.Tensor:
        """
        Run backbone stage ``index`` (2..4) on the enhanced previous map

        Halves the spatial dims and doubles the channels.

        """
        if not 2 <= index <= NUM_STAGES:
            raise UsageError("Stage index must be in 2..%d, got %r" % (NUM_STAGES, index))
        expected = self.cfg.stage_channels[index - 2]
        if features.shape[1] != expected:
            raise InputError(
                "Stage %d expects %d input channels, got %d"
                % (index, expected, features.shape[1])
            )
        return self.stages[index - 1](features)

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        """Plain pyramid without any cross-modal enhancement"""
        pyramid = [self.stem(image)]
        for index in range(2, NUM_STAGES + 1):
            pyramid.append(self.stage(index, pyramid[-1]))
        return pyramid


class TextEncoder(nn.Module):

    """Token + position embedding followed by transformer blocks"""

    def __init__(self, cfg: EncoderConfig):
        super(TextEncoder, self).__init__()
        if cfg.text_vocab_size < 3:
            raise ConfigurationError(
                "encoder.text_vocab_size must cover the reserved ids, got %d"
                % cfg.text_vocab_size
            )
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.text_vocab_size, cfg.text_dim, padding_idx=0)
        self.pos_embed = nn.Embedding(cfg.max_tokens, cfg.text_dim)
        self.blocks = nn.ModuleList(
            [
                TransformerBlock(cfg.text_dim, cfg.num_heads, cfg.mlp_ratio, cfg.dropout)
                for _ in range(cfg.text_depth)
            ]
        )
        self.norm = nn.LayerNorm(cfg.text_dim)

    def forward(self, token_ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        """
        Parameters
        ----------
        token_ids : LongTensor (B, N)
        pad_mask : BoolTensor (B, N)
            True for real tokens

        Returns
        -------
        L1 : Tensor (B, N, C_t)

        """
        if token_ids.shape[-1] > self.cfg.max_tokens:
            raise InputError(
                "Expression has %d tokens, more than max_tokens=%d"
                % (token_ids.shape[-1], self.cfg.max_tokens)
            )
        if int(token_ids.min()) < 0 or int(token_ids.max()) >= self.cfg.text_vocab_size:
            raise InputError(
                "Token id out of vocabulary (size %d)" % self.cfg.text_vocab_size
            )
        positions = torch.arange(token_ids.shape[-1], device=token_ids.device)
        x = self.token_embed(token_ids) + self.pos_embed(positions)[None]
        for block in self.blocks:
            x = block(x, key_mask=pad_mask)
        return self.norm(x)

    def encode(self, expr: TokenizedExpression) -> LanguageFeatures:
        """Encode one (N,) or batched (B, N) expression into L1"""
        expr.validate(self.cfg.text_vocab_size)
        token_ids, pad_mask = expr.token_ids, expr.pad_mask
        if token_ids.dim() == 1:
            token_ids, pad_mask = token_ids[None], pad_mask[None]
        return LanguageFeatures(self.forward(token_ids, pad_mask), pad_mask, stage=1)
