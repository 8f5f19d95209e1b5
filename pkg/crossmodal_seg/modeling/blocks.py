""" Convolutional blocks for the segmentation decoders """
import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from crossmodal_seg.exceptions import ConfigurationError


def rotate_kernel(weight: torch.Tensor, angle: torch.Tensor) -> torch.Tensor:
    """
    Rotate a square kernel by bilinear resampling of its taps

    The rotated kernel at tap offset p reads the base kernel at R(-angle) p.
    Taps that fall outside the base kernel read zero. An angle of exactly zero
    reproduces the base kernel.

    Parameters
    ----------
    weight : Tensor (O, I, k, k)
    angle : Tensor (B,)
        Radians

    Returns
    -------
    kernels : Tensor (B, O, I, k, k)

    """
    out_ch, in_ch, size, _ = weight.shape
    batch = angle.shape[0]
    lin = torch.linspace(-1.0, 1.0, size, dtype=weight.dtype, device=weight.device)
    yy, xx = torch.meshgrid(lin, lin, indexing="ij")
    cos = torch.cos(angle).to(weight.dtype)[:, None, None]
    sin = torch.sin(angle).to(weight.dtype)[:, None, None]
    src_x = cos * xx + sin * yy
    src_y = -sin * xx + cos * yy
    grid = torch.stack([src_x, src_y], dim=-1)
    taps = weight.reshape(1, out_ch * in_ch, size, size).expand(batch, -1, -1, -1).contiguous()
    rotated = F.grid_sample(
        taps, grid, mode="bilinear", padding_mode="zeros", align_corners=True
    )
    return rotated.reshape(batch, out_ch, in_ch, size, size)


class AdaptiveRotatedConv2d(nn.Module):

    """
    3x3 convolution whose kernel is rotated by a per-sample predicted angle

    The angle head is global average pooling -> linear -> Tanh scaled to
    (-pi/2, pi/2). Parameter names ``weight`` and ``bias`` match
    :class:`torch.nn.Conv2d` so a plain convolution can share the base kernel.

    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super(AdaptiveRotatedConv2d, self).__init__()
        if kernel_size % 2 != 1:
            raise ConfigurationError("Rotated convolution needs an odd kernel size")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.padding = kernel_size // 2
        self.weight = nn.Parameter(
            torch.empty(out_channels, in_channels, kernel_size, kernel_size)
        )
        self.bias = nn.Parameter(torch.empty(out_channels))
        self.angle_head = nn.Linear(in_channels, 1)
        fan_in = in_channels * kernel_size * kernel_size
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        bound = 1 / math.sqrt(fan_in)
        nn.init.uniform_(self.bias, -bound, bound)

    def predict_angle(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(2, 3))
        return torch.tanh(self.angle_head(pooled)).squeeze(-1) * (math.pi / 2)

    def forward(self, x: torch.Tensor, angle: Optional[torch.Tensor] = None):
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(
                "Rotated convolution expects %d channels, got %d"
                % (self.in_channels, x.shape[1])
            )
        batch, _, height, width = x.shape
        if angle is None:
            angle = self.predict_angle(x)
        kernels = rotate_kernel(self.weight, angle)
        out = F.conv2d(
            x.reshape(1, batch * self.in_channels, height, width),
            kernels.reshape(batch * self.out_channels, self.in_channels, *kernels.shape[-2:]),
            padding=self.padding,
            groups=batch,
        )
        out = out.reshape(batch, self.out_channels, height, width)
        return out + self.bias[None, :, None, None]


class SegBlock(nn.Module):

    """
    conv_a -> BN -> ReLU -> conv_b -> BN -> ReLU

    ``conv_a`` is an adaptive rotated convolution when ``rotated`` is set,
    otherwise a plain 3x3 convolution. Spatial dims are preserved.

    """

    def __init__(self, in_channels: int, out_channels: int, rotated: bool = True):
        super(SegBlock, self).__init__()
        self.in_channels = in_channels
        if rotated:
            self.conv_a = AdaptiveRotatedConv2d(in_channels, out_channels)
        else:
            self.conv_a = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.bn_a = nn.BatchNorm2d(out_channels)
        self.conv_b = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.bn_b = nn.BatchNorm2d(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(
                "Seg block expects %d channels, got %d" % (self.in_channels, x.shape[1])
            )
        x = F.relu(self.bn_a(self.conv_a(x)))
        return F.relu(self.bn_b(self.conv_b(x)))
