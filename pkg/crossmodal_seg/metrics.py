"""
Evaluation metrics

* mIoU: mean of the per-sample I/U
* oIoU: sum of intersections over sum of unions
* Pr@X: percentage of samples whose IoU strictly exceeds X

A sample with an empty prediction and an empty ground truth has U = 0; it
counts as ``empty_iou`` (1.0 by default) for mIoU and Pr@X and adds (0, 0) to
the oIoU sums.

"""
import json
import logging
import math
from collections import OrderedDict
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from jinja2 import Environment, PackageLoader

from .exceptions import InputError, UsageError

LOG = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def _as_bool_array(mask) -> np.ndarray:
    if hasattr(mask, "detach"):
        mask = mask.detach().cpu().numpy()
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        if not np.isin(mask, (0, 1)).all():
            raise InputError("Masks must be binary")
        mask = mask.astype(bool)
    return mask


def sample_iou(pred, gt, empty_iou: float = 1.0) -> Tuple[int, int, float]:
    """
    Intersection, union and IoU of two binary masks

    Parameters
    ----------
    pred : array-like
        Predicted binary mask (numpy array or tensor)
    gt : array-like
        Ground-truth binary mask of the same shape
    empty_iou : float, optional
        IoU reported when both masks are empty

    Returns
    -------
    intersection : int
    union : int
    iou : float

    """
    pred = _as_bool_array(pred)
    gt = _as_bool_array(gt)
    if pred.shape != gt.shape:
        raise InputError(
            "Prediction shape %s does not match ground truth %s" % (pred.shape, gt.shape)
        )
    intersection = int(np.count_nonzero(pred & gt))
    union = int(np.count_nonzero(pred | gt))
    iou = intersection / union if union else empty_iou
    return intersection, union, iou


def percent(value: float) -> str:
    """Format a ratio as a percentage rounded half-up to 2 decimals"""
    return str(Decimal(repr(value * 100)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


class SampleResult(NamedTuple):
    intersection: int
    union: int
    iou: float
    category: Optional[str]


class EvalReport(object):

    """
    Final metrics of one evaluation

    Attributes
    ----------
    miou : float
        Ratio in [0, 1]
    oiou : float
        Ratio in [0, 1]
    pr_at : OrderedDict
        Threshold -> percentage in [0, 100]
    per_category : dict
        Category -> :class:`.EvalReport` of that category alone
    count : int

    """

    def __init__(
        self,
        miou: float,
        oiou: float,
        pr_at: "OrderedDict[float, float]",
        count: int,
        per_category: Optional[Dict[str, "EvalReport"]] = None,
    ):
        self.miou = miou
        self.oiou = oiou
        self.pr_at = pr_at
        self.count = count
        self.per_category = per_category or {}

    def __eq__(self, other):
        return isinstance(other, EvalReport) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "EvalReport(miou=%s, oiou=%s, n=%d)" % (
            percent(self.miou),
            percent(self.oiou),
            self.count,
        )

    def row(self) -> "OrderedDict[str, str]":
        """Display columns in report order: Pr@0.5..Pr@0.9, mIoU, oIoU"""
        cols = OrderedDict()  # type: OrderedDict[str, str]
        for threshold, value in self.pr_at.items():
            cols["Pr@%g" % threshold] = percent(value / 100.0)
        cols["mIoU"] = percent(self.miou)
        cols["oIoU"] = percent(self.oiou)
        return cols

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "miou": self.miou,
            "oiou": self.oiou,
            "pr_at": {"%g" % k: v for k, v in self.pr_at.items()},
            "display": self.row(),
            "per_category": {
                name: report.to_dict() for name, report in sorted(self.per_category.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self, title: Optional[str] = None) -> str:
        """Aligned plain-text table with one row per category and a total row"""
        rows = [("all", self)] + sorted(self.per_category.items())
        return render_table([(name, report) for name, report in rows], title)


def render_table(rows: Sequence[Tuple[str, EvalReport]], title: Optional[str] = None) -> str:
    """Render named reports as one aligned table"""
    if not rows:
        raise UsageError("No rows to render")
    columns = ["name", "n"] + list(rows[0][1].row().keys())
    cells = [[name, str(report.count)] + list(report.row().values()) for name, report in rows]
    widths = [
        max(len(col), *(len(row[i]) for row in cells)) for i, col in enumerate(columns)
    ]
    env = Environment(
        loader=PackageLoader("crossmodal_seg", "templates"),
        keep_trailing_newline=True,
        autoescape=False,
    )
    template = env.get_template("report.txt.jinja2")
    return template.render(title=title, columns=columns, rows=cells, widths=widths)


class EvalAccumulator(object):

    """
    Streaming per-sample intersection/union counts

    Accumulation is associative and commutative: shards evaluated in parallel
    can be combined with :meth:`merge`.

    """

    def __init__(
        self, thresholds: Iterable[float] = DEFAULT_THRESHOLDS, empty_iou: float = 1.0
    ):
        self.thresholds = tuple(sorted(thresholds))
        self.empty_iou = empty_iou
        self.samples = []  # type: List[SampleResult]

    def __len__(self):
        return len(self.samples)

    def add(self, pred, gt, category: Optional[str] = None) -> SampleResult:
        """Score one prediction against its ground truth"""
        result = SampleResult(*sample_iou(pred, gt, self.empty_iou), category=category)
        self.samples.append(result)
        return result

    def add_counts(self, intersection: int, union: int, category: Optional[str] = None):
        """Record precomputed counts"""
        if not 0 <= intersection <= union:
            raise InputError(
                "Need 0 <= intersection <= union, got (%d, %d)" % (intersection, union)
            )
        iou = intersection / union if union else self.empty_iou
        self.samples.append(SampleResult(intersection, union, iou, category))

    def merge(self, other: "EvalAccumulator") -> "EvalAccumulator":
        """Combine two shards into a new accumulator"""
        if self.thresholds != other.thresholds or self.empty_iou != other.empty_iou:
            raise UsageError("Cannot merge accumulators with different settings")
        merged = EvalAccumulator(self.thresholds, self.empty_iou)
        merged.samples = self.samples + other.samples
        return merged

    def _summarize(self, samples: List[SampleResult]) -> EvalReport:
        ious = np.array([s.iou for s in samples], dtype=np.float64)
        total_i = sum(s.intersection for s in samples)
        total_u = sum(s.union for s in samples)
        miou = math.fsum(ious) / len(samples)
        oiou = total_i / total_u if total_u else self.empty_iou
        pr_at = OrderedDict(
            (t, 100.0 * float(np.count_nonzero(ious > t)) / len(samples))
            for t in self.thresholds
        )
        return EvalReport(miou, oiou, pr_at, len(samples))

    def finalize(self) -> EvalReport:
        """Compute the report; raises :class:`UsageError` when empty"""
        if not self.samples:
            raise UsageError("Cannot finalize an empty accumulator")
        report = self._summarize(self.samples)
        by_category = {}  # type: Dict[str, List[SampleResult]]
        for sample in self.samples:
            if sample.category is not None:
                by_category.setdefault(sample.category, []).append(sample)
        report.per_category = {
            name: self._summarize(samples) for name, samples in by_category.items()
        }
        return report
