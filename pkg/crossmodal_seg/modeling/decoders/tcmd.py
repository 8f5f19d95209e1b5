""" Text-conditioned decoder """
from typing import Sequence, Tuple

import torch
from torch import nn

from crossmodal_seg.config import RunConfig

from ..attention import FeedForward, MultiHeadAttention
from .base import IDecoder


class TransformerDecoderLayer(nn.Module):

    """
    Post-norm decoder layer: self-attention over visual tokens, cross-attention
    with the language memory as key/value, feed-forward. Each sublayer has a
    residual connection followed by LayerNorm.

    """

    def __init__(self, dim: int, num_heads: int, ffn_ratio: int = 4, dropout: float = 0.0):
        super(TransformerDecoderLayer, self).__init__()
        self.self_attn = MultiHeadAttention(dim, num_heads, dropout=dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, num_heads, dropout=dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio, dropout)
        self.norm3 = nn.LayerNorm(dim)

    def forward(
        self, target: torch.Tensor, memory: torch.Tensor, memory_mask: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Parameters
        ----------
        target : Tensor (B, T, dim)
            Flattened visual tokens
        memory : Tensor (B, N, dim)
        memory_mask : BoolTensor (B, N)
            True for real tokens; padded rows get zero cross-attention weight

        Returns
        -------
        tokens : Tensor (B, T, dim)
        cross_weights : Tensor (B, heads, T, N)

        """
        x = self.norm1(target + self.self_attn(target, target)[0])
        attended, cross_weights = self.cross_attn(x, memory, key_mask=memory_mask)
        x = self.norm2(x + attended)
        return self.norm3(x + self.ffn(x)), cross_weights


class TCMDecoder(IDecoder):

    """
    Seg blocks with adaptive rotated convolutions; the fused maps of stages 3
    and 2 are flattened to tokens at their own resolution and refined by one
    transformer decoder layer each, with L5 (projected per stage to the stage
    width) as memory.

    """

    uses_language = True
    rotated = True
    refined_stages = (3, 2)

    def __init__(
        self,
        stage_channels: Sequence[int],
        text_dim: int,
        num_heads: int,
        ffn_ratio: int = 4,
        dropout: float = 0.0,
    ):
        super(TCMDecoder, self).__init__(stage_channels)
        for index in self.refined_stages:
            channels = stage_channels[index - 1]
            self.add_module("memory_proj%d" % index, nn.Linear(text_dim, channels))
            self.add_module(
                "layer%d" % index,
                TransformerDecoderLayer(channels, num_heads, ffn_ratio, dropout),
            )

    @classmethod
    def configure(cls, cfg: RunConfig) -> dict:
        kwargs = super(TCMDecoder, cls).configure(cfg)
        kwargs.update(
            {
                "text_dim": cfg.encoder.text_dim,
                "num_heads": cfg.decoder.num_heads or cfg.encoder.num_heads,
                "ffn_ratio": cfg.decoder.ffn_ratio,
                "dropout": cfg.encoder.dropout,
            }
        )
        return kwargs

    def refine(self, index, fused, language, mask):
        if index not in self.refined_stages:
            return fused
        batch, channels, height, width = fused.shape
        tokens = fused.flatten(2).transpose(1, 2)
        memory = getattr(self, "memory_proj%d" % index)(language)
        tokens, _ = getattr(self, "layer%d" % index)(tokens, memory, mask)
        return tokens.transpose(1, 2).reshape(batch, channels, height, width)
