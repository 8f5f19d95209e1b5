""" Multi-head attention building blocks """
import math
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from crossmodal_seg.exceptions import ConfigurationError


class MultiHeadAttention(nn.Module):

    """
    Scaled dot-product attention that returns its per-head weights

    Queries of width ``dim`` attend over keys/values of width ``key_dim``; all
    three are projected to ``dim`` and split into ``num_heads`` heads. Logits
    are scaled by the square root of the per-head width. Keys whose mask entry
    is False receive exactly zero weight.

    Parameters
    ----------
    dim : int
        Query width and projected width
    num_heads : int
    key_dim : int, optional
        Width of the key/value inputs (default ``dim``)
    out_proj : bool, optional
        Apply a final linear layer to the merged heads (default True)
    dropout : float, optional
        Dropout applied to the attention weights during training

    """

    def __init__(
        self,
        dim: int,
        num_heads: int,
        key_dim: Optional[int] = None,
        out_proj: bool = True,
        dropout: float = 0.0,
    ):
        super(MultiHeadAttention, self).__init__()
        if dim % num_heads:
            raise ConfigurationError(
                "Attention width %d is not divisible by %d heads" % (dim, num_heads)
            )
        key_dim = key_dim or dim
        self.dim = dim
        self.key_dim = key_dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(key_dim, dim)
        self.v_proj = nn.Linear(key_dim, dim)
        self.out_proj = nn.Linear(dim, dim) if out_proj else None
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.view(batch, length, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: Optional[torch.Tensor] = None,
        key_mask: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Parameters
        ----------
        query : Tensor (B, Q, dim)
        key : Tensor (B, K, key_dim)
        value : Tensor (B, K, key_dim), optional
            Defaults to ``key``
        key_mask : BoolTensor (B, K), optional
            True for real keys

        Returns
        -------
        output : Tensor (B, Q, dim)
        weights : Tensor (B, num_heads, Q, K)

        """
        if query.shape[-1] != self.dim or key.shape[-1] != self.key_dim:
            raise ConfigurationError(
                "Attention expects widths (%d, %d), got (%d, %d)"
                % (self.dim, self.key_dim, query.shape[-1], key.shape[-1])
            )
        if value is None:
            value = key
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        logits = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = torch.matmul(self.dropout(weights), v)
        batch, _, length, _ = out.shape
        out = out.transpose(1, 2).reshape(batch, length, self.dim)
        if self.out_proj is not None:
            out = self.out_proj(out)
        return out, weights


class FeedForward(nn.Sequential):

    """Linear -> GELU -> Linear"""

    def __init__(self, dim: int, ratio: int = 4, dropout: float = 0.0):
        super(FeedForward, self).__init__(
            nn.Linear(dim, dim * ratio),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(dim * ratio, dim),
        )


class TransformerBlock(nn.Module):

    """Pre-norm self-attention block used by both encoders"""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4, dropout: float = 0.0):
        super(TransformerBlock, self).__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, dropout=dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio, dropout)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None):
        h = self.norm1(x)
        x = x + self.attn(h, h, key_mask=key_mask)[0]
        return x + self.mlp(self.norm2(x))


class WindowedTransformerBlock(TransformerBlock):

    """
    Transformer block over a 2-D token grid

    With ``window_size`` None the attention is global. Otherwise the grid is
    zero-padded to a multiple of the window size and attention is restricted to
    non-overlapping windows; padded positions are masked out as keys.

    """

    def __init__(
        self,
        dim: int,
        num_heads: int,
        window_size: Optional[int] = None,
        mlp_ratio: int = 4,
        dropout: float = 0.0,
    ):
        super(WindowedTransformerBlock, self).__init__(dim, num_heads, mlp_ratio, dropout)
        self.window_size = window_size

    def forward(self, x: torch.Tensor, size: Tuple[int, int]):  # type: ignore[override]
        height, width = size
        if self.window_size is None or (
            height <= self.window_size and width <= self.window_size
        ):
            return super(WindowedTransformerBlock, self).forward(x)
        batch, _, dim = x.shape
        ws = self.window_size
        pad_h = (ws - height % ws) % ws
        pad_w = (ws - width % ws) % ws
        grid = x.reshape(batch, height, width, dim)
        valid = x.new_ones(batch, height, width)
        if pad_h or pad_w:
            grid = F.pad(grid, (0, 0, 0, pad_w, 0, pad_h))
            valid = F.pad(valid, (0, pad_w, 0, pad_h))
        hp, wp = height + pad_h, width + pad_w
        windows = _partition(grid, ws)
        window_mask = _partition(valid.unsqueeze(-1), ws).squeeze(-1) > 0.5

        h = self.norm1(windows)
        windows = windows + self.attn(h, h, key_mask=window_mask)[0]
        grid = _merge(windows, ws, batch, hp, wp)[:, :height, :width, :]
        x = grid.reshape(batch, height * width, dim)
        return x + self.mlp(self.norm2(x))


def _partition(grid: torch.Tensor, ws: int) -> torch.Tensor:
    batch, height, width, dim = grid.shape
    grid = grid.view(batch, height // ws, ws, width // ws, ws, dim)
    return grid.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, dim)


def _merge(windows: torch.Tensor, ws: int, batch: int, height: int, width: int):
    dim = windows.shape[-1]
    grid = windows.view(batch, height // ws, width // ws, ws, ws, dim)
    return grid.permute(0, 1, 3, 2, 4, 5).reshape(batch, height, width, dim)
