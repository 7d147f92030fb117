"""Pixel metrics, rank-based AUC, loss-bucket analysis and evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .core import ImageGrid, PairSample
from .errors import DegenerateLabels, FormatError, ShapeError
from .inference import ChangeMask, error_map, patch_decision, patch_score, threshold_map

BUCKETS = ("unchange", "small", "large")
BUCKET_HEADERS = {"unchange": "Un", "small": "Small", "large": "Large"}
LARGE_CHANGE_FRACTION = 0.30


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(x, what: str) -> np.ndarray:
    if isinstance(x, ChangeMask):
        x = x.values
    elif isinstance(x, ImageGrid):
        if x.channels != 1:
            raise FormatError(f"{what} must be single-channel")
        x = x.data[:, :, 0]
    arr = np.asarray(x)
    if not np.all((arr == 0) | (arr == 1)):
        raise FormatError(f"{what} must be binary")
    return arr.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    """Pixel confusion counts with changed (1) as the positive class."""
    p = _binary(pred, "prediction")
    t = _binary(truth, "truth")
    if p.shape != t.shape:
        raise ShapeError(f"prediction {p.shape} and truth {t.shape} differ")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int, other_errors: int) -> float:
    # 0/0: perfect (1.0) when the complementary error count is also zero
    if den == 0:
        return 1.0 if other_errors == 0 else 0.0
    return num / den


def precision_recall_iou(c: ConfusionCounts) -> tuple:
    precision = _ratio(c.tp, c.tp + c.fp, c.fn)
    recall = _ratio(c.tp, c.tp + c.fn, c.fp)
    iou = 1.0 if c.tp + c.fp + c.fn == 0 else c.tp / (c.tp + c.fp + c.fn)
    return precision, recall, iou


def auc(scores: Sequence, labels: Sequence | None = None) -> float:
    """ROC AUC as the normalised Mann-Whitney U statistic.

    Accepts either ``(score, label)`` tuples or parallel sequences. Ties
    count one half, via average ranks.
    """
    if labels is None:
        pairs = list(scores)
        s = np.array([p[0] for p in pairs], dtype=np.float64)
        y = np.array([p[1] for p in pairs])
    else:
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels)
    y = y.astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positive / {n_neg} negative")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -- loss analysis -------------------------------------------------------------

def bucket_of(fraction: float) -> str:
    if fraction <= 0.0:
        return "unchange"
    return "small" if fraction < LARGE_CHANGE_FRACTION else "large"


@dataclass
class LossAnalysisReport:
    buckets: dict
    change_area_rule: float = LARGE_CHANGE_FRACTION
    records: list = field(default_factory=list)

    def mean(self, bucket: str) -> float:
        return self.buckets[bucket]["mean_loss"]

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self, label: str = "CDRL", dataset: str = "") -> str:
        """Plain-text table with the columns Un, Small, Large."""
        head = ["Method", "Dataset"] + [BUCKET_HEADERS[b] for b in BUCKETS]
        row = [label, dataset] + [
            "-" if self.buckets[b]["pair_count"] == 0 else f"{self.buckets[b]['mean_loss']:.2f}" for b in BUCKETS
        ]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        fmt = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        return "\n".join([fmt(head), "-+-".join("-" * w for w in widths), fmt(row)])


def summarise_losses(records: Sequence[dict]) -> LossAnalysisReport:
    """Aggregate ``{"name", "fraction", "loss"}`` records into buckets."""
    buckets = {}
    for b in BUCKETS:
        losses = np.array([r["loss"] for r in records if r["bucket"] == b], dtype=np.float64)
        n = int(losses.size)
        buckets[b] = {
            "pair_count": n,
            "mean_loss": float(losses.mean()) if n else 0.0,
            "std_loss": float(losses.std(ddof=1)) if n > 1 else 0.0,
        }
    return LossAnalysisReport(buckets, LARGE_CHANGE_FRACTION, list(records))


def loss_analysis(model, pairs: Sequence[PairSample]) -> LossAnalysisReport:
    """Bucket pairs by changed-area fraction and average the reconstruction loss.

    Loss is the mean absolute error between R(t1, t2) and t1 in unit space,
    times 255 (8-bit grey levels). Masks only decide the bucket.
    """
    records = []
    for pair in pairs:
        if pair.mask is None:
            raise FormatError(f"pair {pair.name!r} has no ground-truth mask")
        t1 = pair.t1.to_space("model")
        emap = error_map(model, t1, pair.t2.to_space("model"))
        # model-space error is twice the unit-space error
        loss = emap.stats[2] / 2.0 * 255.0
        fraction = float(pair.mask.data.mean())
        records.append({"name": pair.name, "fraction": fraction, "bucket": bucket_of(fraction), "loss": loss})
    return summarise_losses(records)


def pooled_standard_error(report: LossAnalysisReport, a: str = "large", b: str = "unchange") -> float:
    ba, bb = report.buckets[a], report.buckets[b]
    return math.sqrt(ba["std_loss"] ** 2 / max(ba["pair_count"], 1) + bb["std_loss"] ** 2 / max(bb["pair_count"], 1))


# -- full evaluation -------------------------------------------------------------

@dataclass
class EvalReport:
    precision: float
    recall: float
    iou: float
    auc: float | None
    threshold_method: str
    records: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(model, pairs: Sequence[PairSample], method: str = "otsu", param=None, smooth_sigma: float = 2.0,
             top_fraction: float = 0.01) -> EvalReport:
    """Pixel precision/recall/IoU (pooled counts) and patch AUC over ``pairs``.

    Both the pixel mask and the patch score come from the error map after
    Gaussian smoothing with ``smooth_sigma`` (0 disables it). Records are
    kept in input order; each carries the pair's confusion counts, patch
    score, patch decision and threshold.
    """
    total = ConfusionCounts()
    records = []
    scores, labels = [], []
    for pair in pairs:
        if pair.mask is None:
            raise FormatError(f"pair {pair.name!r} has no ground-truth mask")
        t1, t2 = pair.t1.to_space("model"), pair.t2.to_space("model")
        smoothed = error_map(model, t1, t2, smooth_sigma)
        mask = threshold_map(smoothed, method, param)
        c = confusion(mask, pair.mask)
        total = total + c
        score = patch_score(smoothed, top_fraction)
        label = bool(pair.mask.data.any())
        scores.append(score)
        labels.append(label)
        records.append({
            "id": pair.name,
            "score": score,
            "decision": patch_decision(mask),
            "label": label,
            "threshold_used": mask.threshold_used,
            **asdict(c),
        })
    p, r, iou = precision_recall_iou(total)
    try:
        a = auc(scores, labels)
    except DegenerateLabels:
        a = None
    return EvalReport(p, r, iou, a, method, records)
