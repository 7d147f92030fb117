import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from cdrl.core import ImageGrid, PairSample
from cdrl.errors import DegenerateLabels, FormatError, ShapeError
from cdrl.metrics import (ConfusionCounts, EvalReport, auc, bucket_of, confusion, evaluate, loss_analysis,
                          pooled_standard_error, precision_recall_iou, summarise_losses)


def brute_confusion(pred, truth):
    tp = fp = fn = tn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, t = pred[i, j], truth[i, j]
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


# -- confusion ------------------------------------------------------------------------

def test_confusion_examples():
    ones = np.ones((4, 4))
    assert confusion(ones, ones) == ConfusionCounts(16, 0, 0, 0)
    assert confusion(ones, np.zeros((4, 4))) == ConfusionCounts(0, 16, 0, 0)
    rng = np.random.default_rng(0)
    p, t = rng.integers(0, 2, (4, 4)), rng.integers(0, 2, (4, 4))
    assert confusion(p, t) == brute_confusion(p, t)


def test_confusion_errors():
    with pytest.raises(ShapeError):
        confusion(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(FormatError):
        confusion(np.zeros((2, 2)), np.full((2, 2), 0.5))


@given(st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**31))
def test_confusion_oracle_property(h, w, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.integers(0, 2, (h, w)), rng.integers(0, 2, (h, w))
    c = confusion(p, t)
    assert c == brute_confusion(p, t)
    assert c.total == h * w


def test_confusion_accepts_grids():
    m = ImageGrid(np.array([[1, 0]], np.float32), "unit")
    assert confusion(m, m) == ConfusionCounts(1, 0, 0, 1)


# -- precision / recall / IoU --------------------------------------------------------

def test_pri_examples():
    p, r, iou = precision_recall_iou(ConfusionCounts(9, 1, 1, 0))
    assert (p, r) == (0.9, 0.9) and iou == pytest.approx(9 / 11)
    assert precision_recall_iou(ConfusionCounts(0, 0, 0, 50)) == (1.0, 1.0, 1.0)
    # changed truth, nothing predicted: precision 0/0 -> 0 because fn > 0
    assert precision_recall_iou(ConfusionCounts(0, 0, 5, 10)) == (0.0, 0.0, 0.0)


@given(st.integers(0, 100), st.integers(0, 100), st.integers(0, 100), st.integers(0, 100))
def test_pri_bounds(tp, fp, fn, tn):
    p, r, iou = precision_recall_iou(ConfusionCounts(tp, fp, fn, tn))
    assert all(0 <= x <= 1 for x in (p, r, iou))
    if tp > 0:
        assert iou <= min(p, r)


def test_reference_scale_fixture_formats():
    report = EvalReport(0.63, 0.92, 0.59, 0.8352, "otsu")
    data = json.loads(report.to_json())
    assert (data["precision"], data["recall"], data["iou"]) == (0.63, 0.92, 0.59)


# -- AUC ---------------------------------------------------------------------------

def test_auc_examples():
    assert auc([(0.1, 0), (0.2, 0), (0.8, 1), (0.9, 1)]) == 1.0
    assert auc([(0.5, 0), (0.5, 1), (0.5, 1)]) == 0.5
    mixed = [(0.3, 1), (0.1, 0), (0.3, 0), (0.7, 1), (0.2, 1), (0.9, 0)]
    assert auc(mixed) == brute_auc(*zip(*mixed))
    with pytest.raises(DegenerateLabels):
        auc([0.1, 0.2], [1, 1])


scores_labels = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 20).map(lambda v: v / 4), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n)).filter(lambda sl: 0 < sum(sl[1]) < n))


@given(scores_labels)
def test_auc_matches_all_pairs_oracle(sl):
    s, y = sl
    assert auc(s, y) == pytest.approx(brute_auc(s, y), abs=1e-12)


@given(scores_labels)
def test_auc_invariances(sl):
    s, y = sl
    base = auc(s, y)
    monotone = [math.exp(v) * 3 + v ** 3 for v in s]  # strictly increasing on v >= 0
    assert auc(monotone, y) == pytest.approx(base, abs=1e-12)
    assert auc(s, [not v for v in y]) == pytest.approx(1 - base, abs=1e-12)


# -- loss analysis --------------------------------------------------------------------

def test_bucket_rule():
    assert bucket_of(0.0) == "unchange"
    assert bucket_of(1e-6) == "small" and bucket_of(0.2999) == "small"
    assert bucket_of(0.30) == "large" and bucket_of(0.5) == "large"


@given(st.lists(st.floats(0, 0.99), min_size=1, max_size=40))
def test_buckets_partition(fracs):
    recs = [{"name": str(i), "fraction": f, "bucket": bucket_of(f), "loss": 1.0} for i, f in enumerate(fracs)]
    report = summarise_losses(recs)
    assert sum(b["pair_count"] for b in report.buckets.values()) == len(fracs)
    assert all(b["mean_loss"] >= 0 for b in report.buckets.values())


class ConstantModel(torch.nn.Module):
    """Reconstructs every pixel as ``value`` (model space)."""

    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, t1, t2):
        return torch.full_like(t1, self.value)


def synthetic_pair(fraction, name, t1_value=0.5):
    n = 10
    mask = np.zeros((n, n, 1), np.float32)
    mask.ravel()[: int(round(fraction * n * n))] = 1
    t1 = ImageGrid(np.full((n, n, 3), t1_value, np.float32), "unit")
    return PairSample(t1, t1, ImageGrid(mask, "unit"), "synthetic", name)


def test_loss_analysis_units_and_buckets():
    # t1 = 0.5 (unit) = 0.0 (model); reconstruction 0.2 (model) is 0.1 off in unit space
    pairs = [synthetic_pair(0.0, "a"), synthetic_pair(0.5, "b"), synthetic_pair(0.1, "c")]
    report = loss_analysis(ConstantModel(0.2), pairs)
    assert [r["bucket"] for r in report.records] == ["unchange", "large", "small"]
    for b in ("unchange", "small", "large"):
        assert report.buckets[b]["pair_count"] == 1
        assert report.mean(b) == pytest.approx(0.1 * 255, rel=1e-6)
    with pytest.raises(FormatError):
        loss_analysis(ConstantModel(0.2), [PairSample(pairs[0].t1, pairs[0].t2)])


def test_loss_table_columns():
    report = summarise_losses([{"name": "a", "fraction": 0.0, "bucket": "unchange", "loss": 10.15},
                               {"name": "b", "fraction": 0.1, "bucket": "small", "loss": 31.41},
                               {"name": "c", "fraction": 0.5, "bucket": "large", "loss": 38.53}])
    header, _, row = report.table(dataset="LEVIR-CD").splitlines()
    assert [c.strip() for c in header.split("|")][-3:] == ["Un", "Small", "Large"]
    assert [c.strip() for c in row.split("|")][-3:] == ["10.15", "31.41", "38.53"]


def test_pooled_standard_error():
    recs = [{"name": str(i), "fraction": f, "bucket": bucket_of(f), "loss": l}
            for i, (f, l) in enumerate([(0, 1.0), (0, 3.0), (0.5, 10.0), (0.5, 14.0)])]
    report = summarise_losses(recs)
    expected = math.sqrt(np.var([1, 3], ddof=1) / 2 + np.var([10, 14], ddof=1) / 2)
    assert pooled_standard_error(report) == pytest.approx(expected)


# -- evaluate ------------------------------------------------------------------------

def test_evaluate_with_perfect_detector():
    """A model that reproduces t1 except on the changed pixels gives perfect scores."""

    class Oracle(torch.nn.Module):
        def __init__(self, masks):
            super().__init__()
            self.masks = masks

        def forward(self, t1, t2):
            key = round(float(t1.mean()), 4)
            return t1 - 0.8 * self.masks[key]

    pairs, masks = [], {}
    for i, frac in enumerate([0.0, 0.0, 0.2, 0.4]):
        p = synthetic_pair(frac, f"p{i}", t1_value=0.4 + 0.05 * i)
        pairs.append(p)
        key = round(float(p.t1.to_space("model").data.mean()), 4)
        masks[key] = torch.from_numpy(p.mask.data.transpose(2, 0, 1)[None].copy())
    report = evaluate(Oracle(masks), pairs, "fixed", 0.1, smooth_sigma=0)
    assert (report.precision, report.recall, report.iou, report.auc) == (1.0, 1.0, 1.0, 1.0)
    assert [r["id"] for r in report.records] == ["p0", "p1", "p2", "p3"]
    assert [r["decision"] for r in report.records] == [False, False, True, True]
    pooled = sum((ConfusionCounts(r["tp"], r["fp"], r["fn"], r["tn"]) for r in report.records), ConfusionCounts())
    assert pooled.total == 4 * 100


def test_evaluate_single_class_reports_no_auc():
    pairs = [synthetic_pair(0.0, "a"), synthetic_pair(0.0, "b")]
    report = evaluate(ConstantModel(0.0), pairs, "fixed", 0.5, smooth_sigma=0)
    assert report.auc is None
    assert (report.precision, report.recall, report.iou) == (1.0, 1.0, 1.0)
