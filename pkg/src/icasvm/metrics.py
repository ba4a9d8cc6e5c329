"""Voxelwise evaluation: Dice, confusion rates, hinge loss, ROC/AUC, FROC.

Scores may contain NaN for voxels a detector cannot score (e.g. an
undefined SER ratio). Such voxels are never predicted positive.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ArgumentError
from .volume import Mask3D

__all__ = ["EvalReport", "dice", "confusion", "hinge_loss", "roc_auc", "froc",
           "froc_at_fp", "evaluate", "write_sweep_csv"]


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    dsc: float
    accuracy: float
    sensitivity: float
    specificity: float
    hinge: float = float("nan")
    roc: list = field(default_factory=list)
    auc: float = float("nan")
    froc: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {k: _jsonable(v) for k, v in asdict(self).items()}


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return _jsonable(v.item())
    return v


def _as_bool(a):
    return a.values if isinstance(a, Mask3D) else np.asarray(a, dtype=bool)


def dice(a, m, return_flag=False):
    """Dice similarity ``2|A n M| / (|A| + |M|)``; 1 when both are empty."""
    a, m = _as_bool(a), _as_bool(m)
    if a.shape != m.shape:
        raise ArgumentError(f"mask shapes differ: {a.shape} vs {m.shape}")
    total = int(a.sum()) + int(m.sum())
    if total == 0:
        return (1.0, True) if return_flag else 1.0
    value = 2.0 * int(np.logical_and(a, m).sum()) / total
    return (value, False) if return_flag else value


def _rate(num, den, name, flags):
    if den == 0:
        flags.append(f"{name}_undefined")
        return float("nan")
    return num / den


def confusion(scores, truth, threshold=0.0):
    """Counts and rates for ``score > threshold``.

    Returns
    -------
    dict with tp, fp, tn, fn, accuracy, sensitivity, specificity, flags.
    Rates whose denominator is empty are NaN and listed in ``flags``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = _as_bool(truth).ravel()
    if s.shape != t.shape:
        raise ArgumentError(f"{s.size} scores for {t.size} truth voxels")
    pred = s > threshold
    tp = int(np.sum(pred & t))
    fp = int(np.sum(pred & ~t))
    fn = int(np.sum(~pred & t))
    tn = int(np.sum(~pred & ~t))
    flags = []
    return {
        "tp": tp, "fp": fp, "tn": tn, "fn": fn,
        "accuracy": _rate(tp + tn, tp + tn + fp + fn, "accuracy", flags),
        "sensitivity": _rate(tp, tp + fn, "sensitivity", flags),
        "specificity": _rate(tn, tn + fp, "specificity", flags),
        "flags": flags,
    }


def hinge_loss(decisions, labels):
    """Mean of ``max(0, 1 - y d)`` with labels in {-1, +1}."""
    d = np.asarray(decisions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.maximum(0.0, 1.0 - y * d)))


def _sweep(scores, truth):
    """Cumulative TP/FP counts as the threshold drops through unique scores.

    Thresholds are the unique finite scores in descending order followed by
    a value just below the minimum; at threshold ``t`` the positives are
    ``score > t``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = _as_bool(truth).ravel()
    if s.shape != t.shape:
        raise ArgumentError(f"{s.size} scores for {t.size} truth voxels")
    ok = np.isfinite(s)
    sv, tv = s[ok], t[ok]
    uniq = np.unique(sv)[::-1]
    if uniq.size == 0:
        return np.array([np.inf]), np.zeros(1, int), np.zeros(1, int), int(t.sum()), int((~t).sum())
    # counts of positives/negatives at each unique value, high to low
    idx = np.searchsorted(-uniq, -sv)
    pos_at = np.bincount(idx, weights=tv, minlength=uniq.size).astype(np.int64)
    neg_at = np.bincount(idx, weights=~tv, minlength=uniq.size).astype(np.int64)
    thresholds = np.concatenate([uniq, [np.nextafter(uniq[-1], -np.inf)]])
    tp = np.concatenate([[0], np.cumsum(pos_at)])
    fp = np.concatenate([[0], np.cumsum(neg_at)])
    return thresholds, tp, fp, int(t.sum()), int((~t).sum())


def roc_auc(scores, truth):
    """ROC points and trapezoidal AUC over the unique-score sweep.

    Returns
    -------
    roc : list of (fpr, tpr, threshold)
        Ordered by descending threshold, so fpr and tpr are nondecreasing.
    auc : float
        NaN when either class is absent.
    """
    thr, tp, fp, n_pos, n_neg = _sweep(scores, truth)
    if n_pos == 0 or n_neg == 0:
        return [], float("nan")
    tpr = tp / n_pos
    fpr = fp / n_neg
    # undefined (NaN) scores stay negative; close the curve at (1, 1)
    if fpr[-1] < 1 or tpr[-1] < 1:
        fpr = np.append(fpr, 1.0)
        tpr = np.append(tpr, 1.0)
        thr = np.append(thr, -np.inf)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return [(float(a), float(b), float(c)) for a, b, c in zip(fpr, tpr, thr)], auc


def froc(scores, truth, thresholds=None):
    """Voxel-level FROC: (false-positive voxel count, sensitivity, threshold).

    With ``thresholds=None`` the full unique-score sweep is used.
    """
    t = _as_bool(truth).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(t.sum())
    if thresholds is None:
        thr, tp, fp, n_pos, _ = _sweep(s, t)
        return [(int(f), tp_ / n_pos if n_pos else float("nan"), float(h))
                for f, tp_, h in zip(fp, tp, thr)]
    out = []
    pos_scores = np.sort(s[t & np.isfinite(s)])
    neg_scores = np.sort(s[~t & np.isfinite(s)])
    for h in thresholds:
        tp = pos_scores.size - np.searchsorted(pos_scores, h, side="right")
        fp = neg_scores.size - np.searchsorted(neg_scores, h, side="right")
        out.append((int(fp), tp / n_pos if n_pos else float("nan"), float(h)))
    return out


def froc_at_fp(curve, fp_levels):
    """Best sensitivity reachable with at most each FP count (step interpolation)."""
    fps = np.array([c[0] for c in curve], dtype=np.float64)
    sens = np.array([c[1] for c in curve], dtype=np.float64)
    out = []
    for level in np.atleast_1d(fp_levels):
        ok = fps <= level
        out.append(float(sens[ok].max()) if ok.any() else 0.0)
    return np.array(out)


def evaluate(scores, truth, threshold=0.0, decisions=None, labels=None,
             froc_thresholds=None):
    """Assemble an :class:`EvalReport` for one set of voxel scores."""
    t = _as_bool(truth)
    c = confusion(scores, t, threshold)
    pred = np.asarray(scores, dtype=np.float64).reshape(t.shape) > threshold
    dsc, empty = dice(pred, t, return_flag=True)
    flags = list(c["flags"])
    if empty:
        flags.append("dice_both_empty")
    hinge = float("nan")
    if decisions is not None:
        y = labels if labels is not None else np.where(t.ravel(), 1.0, -1.0)
        hinge = hinge_loss(decisions, y)
    roc, auc = roc_auc(scores, t)
    fr = froc(scores, t, froc_thresholds)
    return EvalReport(c["tp"], c["fp"], c["tn"], c["fn"], dsc, c["accuracy"],
                      c["sensitivity"], c["specificity"], hinge, roc, auc, fr, flags)


def write_sweep_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in r])


def dumps_report(obj):
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True)
