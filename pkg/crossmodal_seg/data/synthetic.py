"""
Synthetic referring-expression scenes

Each scene holds a few non-overlapping colored shapes on a noisy background.
Every triplet refers to one shape with a phrase from one of three classes:

* category: "the red circle", "the square"
* absolute position: "the circle on the left", "the blue shape at the top"
* relative relation: "the triangle to the left of the green square"

A phrase is only used when exactly one shape in the scene satisfies it.

"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from crossmodal_seg.exceptions import GenerationError
from crossmodal_seg.models import Triplet

LOG = logging.getLogger(__name__)

KINDS = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 230),
    "yellow": (230, 210, 40),
}
REGIONS = ("left", "right", "top", "bottom")
RELATIONS = ("left of", "right of", "above", "below")
PHRASE_CLASSES = ("category", "absolute", "relative")


@dataclass(frozen=True)
class Shape:

    """A shape inside its ``size`` x ``size`` box with top-left corner (x, y)"""

    kind: str
    color: str
    size: int
    x: int
    y: int

    def mask(self, canvas_size: int) -> np.ndarray:
        yy, xx = np.mgrid[0 : self.size, 0 : self.size]
        mid = (self.size - 1) / 2.0
        if self.kind == "square":
            local = np.ones((self.size, self.size), dtype=bool)
        elif self.kind == "circle":
            local = (xx - mid) ** 2 + (yy - mid) ** 2 <= (self.size / 2.0) ** 2
        elif self.kind == "triangle":
            local = np.abs(xx - mid) <= yy / 2.0
        else:
            raise GenerationError("Unknown shape kind %r" % self.kind)
        canvas = np.zeros((canvas_size, canvas_size), dtype=bool)
        canvas[self.y : self.y + self.size, self.x : self.x + self.size] = local
        return canvas

    def center(self, canvas_size: int) -> Tuple[float, float]:
        """(row, column) centroid of the shape pixels"""
        rows, cols = np.nonzero(self.mask(canvas_size))
        return float(rows.mean()), float(cols.mean())

    def describe(self) -> Tuple[str, str]:
        return self.color, self.kind


@dataclass
class SyntheticSceneSpec:

    """Parameters of the scene generator"""

    canvas_size: int = 64
    num_shapes: int = 2
    min_size: int = 12
    max_size: int = 20
    referrals_per_scene: int = 2
    margin: int = 2
    kinds: Sequence[str] = KINDS
    colors: Sequence[str] = tuple(COLORS)
    max_attempts: int = 200

    def validate(self) -> None:
        if self.min_size < 4:
            raise GenerationError("Shapes must be at least 4 px, got %d" % self.min_size)
        if self.max_size < self.min_size:
            raise GenerationError("max_size must be >= min_size")
        if self.num_shapes < 1:
            raise GenerationError("A scene needs at least one shape")
        if not 1 <= self.referrals_per_scene <= self.num_shapes:
            raise GenerationError("referrals_per_scene must be in 1..num_shapes")
        if self.max_size > self.canvas_size:
            raise GenerationError("Shapes larger than the canvas")
        footprint = self.num_shapes * (self.min_size + self.margin) ** 2
        if footprint * 2 > self.canvas_size ** 2:
            raise GenerationError(
                "%d shapes of %d px do not fit on a %d px canvas"
                % (self.num_shapes, self.min_size, self.canvas_size)
            )
        unknown = [c for c in self.colors if c not in COLORS]
        if unknown or any(k not in KINDS for k in self.kinds):
            raise GenerationError("Unknown colors or kinds in the scene spec")


@dataclass
class SyntheticScene:
    canvas_size: int
    shapes: List[Shape]
    background: Tuple[int, int, int]
    noise_seed: int

    def render(self) -> np.ndarray:
        """uint8 (H, W, 3) image"""
        rng = np.random.default_rng(self.noise_seed)
        size = self.canvas_size
        image = np.empty((size, size, 3), dtype=np.int64)
        image[:] = self.background
        image += rng.integers(0, 16, size=(size, size, 3))
        for shape in self.shapes:
            image[shape.mask(size)] = COLORS[shape.color]
        return image.astype(np.uint8)

    def centers(self) -> List[Tuple[float, float]]:
        return [s.center(self.canvas_size) for s in self.shapes]


@dataclass(frozen=True)
class ReferringPhrase:

    """A referring expression as a predicate over the shapes of a scene"""

    color: Optional[str] = None
    kind: Optional[str] = None
    region: Optional[str] = None
    relation: Optional[str] = None
    anchor: Optional[Tuple[str, str]] = None

    def text(self) -> str:
        words = ["the"]
        if self.color:
            words.append(self.color)
        words.append(self.kind or "shape")
        if self.region in ("left", "right"):
            words.extend(["on", "the", self.region])
        elif self.region in ("top", "bottom"):
            words.extend(["at", "the", self.region])
        if self.relation is not None and self.anchor is not None:
            if self.relation in ("left of", "right of"):
                words.extend(["to", "the"])
            words.append(self.relation)
            words.extend(["the", self.anchor[0], self.anchor[1]])
        return " ".join(words)

    def _attributes_match(self, shape: Shape) -> bool:
        return (self.color is None or shape.color == self.color) and (
            self.kind is None or shape.kind == self.kind
        )

    def select(self, scene: SyntheticScene) -> List[int]:
        """Indices of the shapes this phrase is true for"""
        centers = scene.centers()
        mid = (scene.canvas_size - 1) / 2.0
        anchor_index = None
        if self.anchor is not None:
            anchors = [i for i, s in enumerate(scene.shapes) if s.describe() == self.anchor]
            if len(anchors) != 1:
                return []
            anchor_index = anchors[0]
        selected = []
        for i, shape in enumerate(scene.shapes):
            if i == anchor_index or not self._attributes_match(shape):
                continue
            row, col = centers[i]
            if self.region == "left" and not col < mid:
                continue
            if self.region == "right" and not col > mid:
                continue
            if self.region == "top" and not row < mid:
                continue
            if self.region == "bottom" and not row > mid:
                continue
            if anchor_index is not None:
                arow, acol = centers[anchor_index]
                if self.relation == "left of" and not col < acol:
                    continue
                if self.relation == "right of" and not col > acol:
                    continue
                if self.relation == "above" and not row < arow:
                    continue
                if self.relation == "below" and not row > arow:
                    continue
            selected.append(i)
        return selected


@dataclass
class SceneReference:

    """Links a synthetic triplet back to its scene"""

    scene: SyntheticScene
    target: int
    phrase: ReferringPhrase = field(repr=False)


def _attribute_variants(shape: Shape) -> List[Tuple[Optional[str], Optional[str]]]:
    return [(shape.color, shape.kind), (None, shape.kind), (shape.color, None)]


def candidate_phrases(scene: SyntheticScene, target: int, phrase_class: str) -> List[ReferringPhrase]:
    shape = scene.shapes[target]
    phrases = []
    for color, kind in _attribute_variants(shape):
        if phrase_class == "category":
            phrases.append(ReferringPhrase(color, kind))
        elif phrase_class == "absolute":
            phrases.extend(ReferringPhrase(color, kind, region=r) for r in REGIONS)
        elif phrase_class == "relative":
            for j, other in enumerate(scene.shapes):
                if j != target:
                    phrases.extend(
                        ReferringPhrase(color, kind, relation=rel, anchor=other.describe())
                        for rel in RELATIONS
                    )
    return phrases


def choose_phrase(
    scene: SyntheticScene, target: int, rng: np.random.Generator
) -> Optional[ReferringPhrase]:
    """A random phrase that selects exactly the target, or None"""
    for class_index in rng.permutation(len(PHRASE_CLASSES)):
        candidates = candidate_phrases(scene, target, PHRASE_CLASSES[class_index])
        for index in rng.permutation(len(candidates)):
            phrase = candidates[index]
            if phrase.select(scene) == [target]:
                return phrase
    return None


def _separated(values: Sequence[float], value: float) -> bool:
    return all(abs(v - value) >= 1.0 for v in values)


def sample_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> SyntheticScene:
    """Place non-overlapping shapes with distinct centroid rows and columns"""
    mid = (spec.canvas_size - 1) / 2.0
    for _ in range(spec.max_attempts):
        shapes = []  # type: List[Shape]
        rows, cols = [mid], [mid]
        for _ in range(spec.num_shapes):
            for _ in range(spec.max_attempts):
                size = int(rng.integers(spec.min_size, spec.max_size + 1))
                shape = Shape(
                    kind=spec.kinds[int(rng.integers(len(spec.kinds)))],
                    color=spec.colors[int(rng.integers(len(spec.colors)))],
                    size=size,
                    x=int(rng.integers(0, spec.canvas_size - size + 1)),
                    y=int(rng.integers(0, spec.canvas_size - size + 1)),
                )
                if any(_overlaps(shape, other, spec.margin) for other in shapes):
                    continue
                row, col = shape.center(spec.canvas_size)
                if _separated(rows, row) and _separated(cols, col):
                    shapes.append(shape)
                    rows.append(row)
                    cols.append(col)
                    break
            else:
                break
        if len(shapes) == spec.num_shapes:
            background = tuple(int(v) for v in rng.integers(20, 70, size=3))
            return SyntheticScene(
                spec.canvas_size, shapes, background, int(rng.integers(2 ** 31))
            )
    raise GenerationError(
        "Could not place %d shapes on a %d px canvas" % (spec.num_shapes, spec.canvas_size)
    )


def _overlaps(a: Shape, b: Shape, margin: int) -> bool:
    return not (
        a.x + a.size + margin <= b.x
        or b.x + b.size + margin <= a.x
        or a.y + a.size + margin <= b.y
        or b.y + b.size + margin <= a.y
    )


def split_counts(count: int) -> Dict[str, int]:
    """80/10/10 train/val/test, rounding the held-out splits half up"""
    held_out = int(math.floor(count * 0.1 + 0.5))
    if 2 * held_out >= count:
        held_out = 0
    return {"train": count - 2 * held_out, "val": held_out, "test": held_out}


def generate_synthetic(
    seed: int, count: int, spec: Optional[SyntheticSceneSpec] = None
) -> List[Triplet]:
    """
    Generate a deterministic synthetic dataset

    Parameters
    ----------
    seed : int
    count : int
        Number of triplets
    spec : :class:`.SyntheticSceneSpec`, optional

    Returns
    -------
    triplets : list
        In generation order: train first, then val, then test. Consecutive
        triplets of the same scene refer to different shapes.

    """
    if count < 1:
        raise GenerationError("count must be at least 1")
    spec = spec or SyntheticSceneSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    counts = split_counts(count)
    splits = ["train"] * counts["train"] + ["val"] * counts["val"] + ["test"] * counts["test"]
    triplets = []  # type: List[Triplet]
    while len(triplets) < count:
        for _ in range(spec.max_attempts):
            scene = sample_scene(spec, rng)
            targets = rng.permutation(spec.num_shapes)[: spec.referrals_per_scene]
            phrases = [choose_phrase(scene, int(t), rng) for t in targets]
            if all(p is not None for p in phrases):
                break
        else:
            raise GenerationError("Could not find unique referring phrases for a scene")
        image = scene.render()
        for target, phrase in zip(targets, phrases):
            if len(triplets) == count:
                break
            index = len(triplets)
            shape = scene.shapes[int(target)]
            triplets.append(
                Triplet(
                    ident="syn-%d-%05d" % (seed, index),
                    expression=phrase.text(),
                    mask=shape.mask(spec.canvas_size),
                    category=shape.kind,
                    split=splits[index],
                    image=image,
                    scene=SceneReference(scene, int(target), phrase),
                )
            )
    LOG.info("Generated %d synthetic triplets (seed %d): %s", count, seed, counts)
    return triplets
