""" Training objective """
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .config import LossConfig
from .exceptions import InputError


class LossTerms(NamedTuple):

    """The weighted total and its two components"""

    total: torch.Tensor
    ce: torch.Tensor
    dice: torch.Tensor


def _check_target(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if logits.dim() == 3:
        logits = logits[None]
    if target.dim() == 2:
        target = target[None]
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise InputError("Logits must be (B, 2, H, W), got %s" % list(logits.shape))
    if target.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise InputError(
            "Target shape %s does not match logits %s"
            % (list(target.shape), list(logits.shape))
        )
    if ((target != 0) & (target != 1)).any():
        raise InputError("Target mask must be binary")
    return target


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """
    Soft Dice on the foreground probability, per sample then averaged

    ``1 - (2 |P G| + s) / (|P| + |G| + s)`` with P the softmax of channel 1.

    """
    prob = torch.softmax(logits, dim=1)[:, 1].flatten(1)
    gt = target.flatten(1).to(prob.dtype)
    inter = (prob * gt).sum(dim=1)
    denom = prob.sum(dim=1) + gt.sum(dim=1)
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean()


def combined_loss(logits: torch.Tensor, target: torch.Tensor, cfg: LossConfig) -> LossTerms:
    """
    ``lam * CE + (1 - lam) * Dice``

    Parameters
    ----------
    logits : Tensor (B, 2, H, W)
    target : Tensor (B, H, W)
        Values in {0, 1}
    cfg : :class:`~crossmodal_seg.config.LossConfig`

    Returns
    -------
    terms : :class:`.LossTerms`
        CE is the mean over pixels and batch

    """
    if logits.dim() == 3:
        logits = logits[None]
    target = _check_target(logits, target)
    ce = F.cross_entropy(logits, target.long())
    dice = dice_loss(logits, target, cfg.dice_smooth)
    total = cfg.lam * ce + (1 - cfg.lam) * dice
    return LossTerms(total, ce, dice)
