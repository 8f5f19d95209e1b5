""" Model objects """
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import torch
from PIL import Image

from .exceptions import InputError

SPLITS = ("train", "val", "test")


@dataclass(eq=False)
class Triplet:

    """
    One (image, expression, mask) supervision unit

    Parameters
    ----------
    ident : str
        Unique record identifier
    expression : str
        The referring expression
    mask : :class:`numpy.ndarray`
        Boolean array of shape (H, W)
    category : str
        Object category label
    split : str
        One of "train", "val", "test"
    image : :class:`numpy.ndarray`, optional
        Inline uint8 image of shape (H, W, 3)
    image_path : str, optional
        Path to the image when it is not held inline
    scene : object, optional
        The synthetic scene this triplet was rendered from

    """

    ident: str
    expression: str
    mask: np.ndarray
    category: str
    split: str
    image: Optional[np.ndarray] = None
    image_path: Optional[str] = None
    scene: Optional[object] = field(default=None, repr=False)

    def load_image(self) -> np.ndarray:
        """Return the image as a uint8 (H, W, 3) array"""
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise InputError("Triplet %s has no image" % self.ident)
        with Image.open(self.image_path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)

    def validate(self) -> None:
        if not self.expression or not self.expression.strip():
            raise InputError("Triplet %s has an empty expression" % self.ident)
        if self.split not in SPLITS:
            raise InputError(
                "Triplet %s has unknown split %r" % (self.ident, self.split)
            )
        if self.mask.ndim != 2:
            raise InputError("Triplet %s mask must be 2-D" % self.ident)
        image = self.load_image()
        if image.shape[:2] != self.mask.shape:
            raise InputError(
                "Triplet %s mask is %dx%d but image is %dx%d"
                % ((self.ident,) + self.mask.shape + image.shape[:2])
            )


@dataclass
class TokenizedExpression:

    """Token ids of one expression, padded to ``max_tokens``"""

    token_ids: torch.Tensor
    pad_mask: torch.Tensor

    @property
    def length(self) -> int:
        return int(self.pad_mask.sum())

    def validate(self, vocab_size: int) -> None:
        if self.token_ids.shape != self.pad_mask.shape:
            raise InputError("token_ids and pad_mask must have the same shape")
        if self.length < 1:
            raise InputError("Expression has no tokens")
        if int(self.token_ids.min()) < 0 or int(self.token_ids.max()) >= vocab_size:
            raise InputError(
                "Token id outside vocabulary of size %d: %s"
                % (vocab_size, self.token_ids.tolist())
            )


@dataclass
class LanguageFeatures:

    """Token-wise sentence features L_i of shape (B, N, C) with key mask (B, N)"""

    features: torch.Tensor
    mask: torch.Tensor
    stage: int = 1


@dataclass
class VisualFeaturePyramid:

    """The four stage-wise maps, each (B, C_i, H_i, W_i)"""

    stages: List[torch.Tensor]

    def shapes(self) -> List[Tuple[int, int, int]]:
        return [tuple(s.shape[1:]) for s in self.stages]

    def validate(self) -> None:
        if len(self.stages) != 4:
            raise InputError("Expected 4 pyramid stages, got %d" % len(self.stages))
        for prev, cur in zip(self.stages, self.stages[1:]):
            if (
                cur.shape[1] != 2 * prev.shape[1]
                or cur.shape[2] * 2 != prev.shape[2]
                or cur.shape[3] * 2 != prev.shape[3]
            ):
                raise InputError("Pyramid does not halve/double: %s" % self.shapes())


class CrossModalAttentionOutput(NamedTuple):

    """Similarity weights (B, heads, Q, K), guided features A and gated output"""

    similarity: torch.Tensor
    guided: torch.Tensor
    refined: torch.Tensor
