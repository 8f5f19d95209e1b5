"""
Tokenization, resizing, normalization and augmentation

Images are bilinearly resized to ``image_size`` and normalized per channel;
masks are resized with nearest neighbour so they stay binary. Expressions are
lowercased, split into words and mapped through a word-level vocabulary built
from the training split.

"""
import json
import logging
import re
from collections import Counter
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import DataLoader, Dataset

from crossmodal_seg.exceptions import InputError
from crossmodal_seg.models import TokenizedExpression, Triplet

LOG = logging.getLogger(__name__)

PAD, UNK, SENTENCE = "<pad>", "<unk>", "<s>"
PAD_ID, UNK_ID, SENTENCE_ID = 0, 1, 2
RESERVED = (PAD, UNK, SENTENCE)

# Published ImageNet statistics, for real imagery
IMAGENET_NORMALIZATION = {"mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]}

_WORD = re.compile(r"[a-z0-9]+")
_HORIZONTAL = {"left": "right", "right": "left", "leftmost": "rightmost", "rightmost": "leftmost"}
_VERTICAL = {
    "top": "bottom",
    "bottom": "top",
    "above": "below",
    "below": "above",
    "upper": "lower",
    "lower": "upper",
}


def tokenize(text: str) -> List[str]:
    """Lowercase word tokens"""
    return _WORD.findall(text.lower())


class Vocabulary(object):

    """
    Word-level vocabulary

    Ids 0, 1 and 2 are reserved for padding, unknown words and the leading
    sentence token.

    """

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise InputError("Vocabulary must start with %s" % (RESERVED,))
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise InputError("Vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @classmethod
    def build(cls, expressions: Iterable[str], min_count: int = 1) -> "Vocabulary":
        """Sorted vocabulary of the words appearing at least ``min_count`` times"""
        counts = Counter(word for text in expressions for word in tokenize(text))
        words = sorted(w for w, c in counts.items() if c >= min_count and w not in RESERVED)
        return cls(list(RESERVED) + words)

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r") as ifile:
            return cls(json.load(ifile))

    def save(self, path: str) -> None:
        with open(path, "w") as ofile:
            json.dump(self.tokens, ofile)

    def encode(self, text: str, max_tokens: int) -> TokenizedExpression:
        """
        Sentence token, then word ids, truncated and padded to ``max_tokens``

        An expression with no known word is kept as a sequence of unknown ids
        and a warning is logged.

        """
        words = tokenize(text)
        ids = [self.index.get(w, UNK_ID) for w in words]
        if not any(i != UNK_ID for i in ids):
            LOG.warning("Expression %r has no known tokens", text)
            ids = [UNK_ID] * max(1, len(words))
        ids = [SENTENCE_ID] + ids
        if len(ids) > max_tokens:
            ids = ids[:max_tokens]
        length = len(ids)
        token_ids = torch.zeros(max_tokens, dtype=torch.long)
        token_ids[:length] = torch.tensor(ids, dtype=torch.long)
        pad_mask = torch.zeros(max_tokens, dtype=torch.bool)
        pad_mask[:length] = True
        return TokenizedExpression(token_ids, pad_mask)


def compute_normalization(triplets: Iterable[Triplet]) -> Dict[str, List[float]]:
    """Per-channel mean and std of [0, 1] pixel values over some triplets"""
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    count = 0
    for triplet in triplets:
        pixels = triplet.load_image().reshape(-1, 3).astype(np.float64) / 255.0
        total += pixels.sum(axis=0)
        total_sq += (pixels ** 2).sum(axis=0)
        count += pixels.shape[0]
    if count == 0:
        raise InputError("Cannot compute normalization without images")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean ** 2, 0.0))
    std = np.maximum(std, 1e-6)
    return {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}


def flip_expression(text: str, horizontal: bool) -> str:
    """Swap the direction words a flip reverses"""
    table = _HORIZONTAL if horizontal else _VERTICAL
    return re.sub(
        r"[A-Za-z]+",
        lambda m: table.get(m.group(0).lower(), m.group(0)),
        text,
    )


# Directions in the order a counter-clockwise quarter turn maps them
_QUARTER_TURN = ("left", "bottom", "right", "top")
_DIRECTION_ALIASES = {"upper": "top", "lower": "bottom", "above": "top", "below": "bottom"}
_RELATION_PHRASES = {
    "left": "to the left of",
    "right": "to the right of",
    "top": "above",
    "bottom": "below",
}
_ROTATABLE = re.compile(
    r"\b(?:to the (left|right) of|(above|below)|(left|right|top|bottom|upper|lower)(most)?)\b",
    re.IGNORECASE,
)


def _turn(direction: str, quarter_turns: int) -> str:
    index = _QUARTER_TURN.index(_DIRECTION_ALIASES.get(direction, direction))
    return _QUARTER_TURN[(index + quarter_turns) % 4]


def rotate_expression(text: str, quarter_turns: int) -> str:
    """
    Rewrite the direction words for an image rotated counter-clockwise

    Matches ``np.rot90(image, quarter_turns)``: after one turn whatever was
    on the left is at the bottom. Relations are rewritten as phrases, so
    "to the left of" becomes "below" and "above" becomes "to the left of".

    """
    quarter_turns %= 4
    if not quarter_turns:
        return text

    def replace(match):
        relation = match.group(1) or match.group(2)
        if relation:
            return _RELATION_PHRASES[_turn(relation.lower(), quarter_turns)]
        return _turn(match.group(3).lower(), quarter_turns) + (match.group(4) or "")

    return _ROTATABLE.sub(replace, text)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    resized = Image.fromarray(np.asarray(mask, dtype=np.uint8)).resize(
        (size, size), Image.NEAREST
    )
    return np.asarray(resized).astype(bool)


def normalize_image(image: np.ndarray, normalization: Mapping[str, Sequence[float]]) -> torch.Tensor:
    """uint8 (H, W, 3) -> normalized float (3, H, W)"""
    mean = np.asarray(normalization["mean"], dtype=np.float32)
    std = np.asarray(normalization["std"], dtype=np.float32)
    pixels = image.astype(np.float32) / 255.0
    return torch.from_numpy(((pixels - mean) / std).transpose(2, 0, 1).copy())


def preprocess(
    triplet: Triplet,
    image_size: int,
    vocab: Vocabulary,
    normalization: Mapping[str, Sequence[float]],
    max_tokens: int,
) -> Tuple[torch.Tensor, TokenizedExpression, torch.Tensor]:
    """
    Model inputs for one triplet

    Returns
    -------
    image : Tensor (3, S, S)
    expression : :class:`~crossmodal_seg.models.TokenizedExpression`
    mask : Tensor (S, S) of 0/1 uint8

    """
    image = resize_image(triplet.load_image(), image_size)
    mask = resize_mask(triplet.mask, image_size)
    return (
        normalize_image(image, normalization),
        vocab.encode(triplet.expression, max_tokens),
        torch.from_numpy(mask.astype(np.uint8)),
    )


class ReferringDataset(Dataset):

    """
    Preprocessed triplets for a DataLoader

    Flip and rotation augmentation transform image and mask jointly and
    rewrite the direction words of the expression to match. Whether and how
    an item is transformed depends only on ``(seed, epoch, index)``, so
    batches do not depend on the worker count.

    """

    def __init__(
        self,
        triplets: Sequence[Triplet],
        image_size: int,
        vocab: Vocabulary,
        normalization: Mapping[str, Sequence[float]],
        max_tokens: int,
        hflip: bool = False,
        vflip: bool = False,
        rotate: bool = False,
        seed: int = 0,
    ):
        self.triplets = list(triplets)
        self.image_size = image_size
        self.vocab = vocab
        self.normalization = normalization
        self.max_tokens = max_tokens
        self.hflip = hflip
        self.vflip = vflip
        self.rotate = rotate
        self.seed = seed
        self.epoch = 0
        self._cache = {}  # type: Dict[int, Tuple[np.ndarray, np.ndarray]]

    def __len__(self):
        return len(self.triplets)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def _resized(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        if index not in self._cache:
            triplet = self.triplets[index]
            self._cache[index] = (
                resize_image(triplet.load_image(), self.image_size),
                resize_mask(triplet.mask, self.image_size),
            )
        return self._cache[index]

    def __getitem__(self, index: int) -> dict:
        image, mask = self._resized(index)
        expression = self.triplets[index].expression
        if self.hflip or self.vflip or self.rotate:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            flip_h, flip_v = rng.random(2) < 0.5
            quarter_turns = int(rng.integers(4))
            if self.hflip and flip_h:
                image, mask = image[:, ::-1], mask[:, ::-1]
                expression = flip_expression(expression, horizontal=True)
            if self.vflip and flip_v:
                image, mask = image[::-1], mask[::-1]
                expression = flip_expression(expression, horizontal=False)
            if self.rotate and quarter_turns:
                image, mask = np.rot90(image, quarter_turns), np.rot90(mask, quarter_turns)
                expression = rotate_expression(expression, quarter_turns)
        tokens = self.vocab.encode(expression, self.max_tokens)
        return {
            "image": normalize_image(np.ascontiguousarray(image), self.normalization),
            "token_ids": tokens.token_ids,
            "pad_mask": tokens.pad_mask,
            "mask": torch.from_numpy(np.ascontiguousarray(mask).astype(np.uint8)),
            "index": index,
        }


def make_loader(
    dataset: ReferringDataset,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    epoch: int = 0,
    num_workers: int = 0,
) -> DataLoader:
    """DataLoader whose order is a function of ``(seed, epoch)`` only"""
    dataset.set_epoch(epoch)
    generator = torch.Generator()
    generator.manual_seed(seed * 100003 + epoch)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
        num_workers=num_workers,
    )
