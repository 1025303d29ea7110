"""OOD detection and segmentation metrics.

Novel pixels are the positive class; a higher score means "more novel".
Tied scores are always handled as one threshold group.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """Both classes are needed for a detection metric."""


def _prepare(scores, is_ood):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(is_ood, dtype=bool).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("need at least one OOD and one inlier pixel")
    return s, y, n_pos, y.size - n_pos


def auroc(scores, is_ood):
    """P(random OOD pixel outscores random inlier), ties counted 1/2."""
    s, y, n_pos, n_neg = _prepare(scores, is_ood)
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(s, y):
    """Cumulative (tp, fp) at each distinct score, thresholds descending."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp, fp


def _split(a):
    t = a * 134217729.0  # 2**27 + 1
    hi = t - (t - a)
    return hi, a - hi


def _ratio_sum(num, den):
    """Correctly rounded sum of ``num / den`` for integer-valued float arrays.

    Each quotient is split into its rounded value and the exact remainder
    (Dekker's product), so only terms of order ulp**2 are lost before
    ``math.fsum`` rounds once.
    """
    q = num / den
    qh, ql = _split(q)
    dh, dl = _split(den)
    p = q * den
    e = ((qh * dh - p) + qh * dl + ql * dh) + ql * dl
    r = (num - p) - e
    return math.fsum(np.r_[q, r / den])


def average_precision(scores, is_ood):
    """Sum over descending threshold groups of (recall step) x precision."""
    s, y, n_pos, _ = _prepare(scores, is_ood)
    tp, fp = _threshold_counts(s, y)
    dtp = np.diff(np.r_[0, tp])
    # each term dtp * tp / ((tp + fp) * n_pos) is a ratio of integers below 2**53
    num = (dtp * tp).astype(np.float64)
    den = ((tp + fp) * n_pos).astype(np.float64)
    return _ratio_sum(num, den)


def fpr_at_95_tpr(scores, is_ood):
    """Smallest FPR over thresholds ``score >= t`` whose TPR is at least 0.95."""
    s, y, n_pos, n_neg = _prepare(scores, is_ood)
    tp, fp = _threshold_counts(s, y)
    ok = tp / n_pos >= 0.95
    return float((fp[ok] / n_neg).min())


def seg_metrics(pred, truth, ood_mask, num_classes):
    """Mean IoU and mean class accuracy over seen classes on inlier pixels.

    Ignore-labelled pixels (0) and novel pixels are excluded; classes absent
    from the ground truth do not enter the means.
    """
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    keep = ~np.asarray(ood_mask, dtype=bool).ravel() & (truth >= 1) & (truth <= num_classes)
    p, t = pred[keep] - 1, truth[keep] - 1
    valid_pred = (p >= 0) & (p < num_classes)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (t[valid_pred], p[valid_pred]), 1)
    gt_count = np.bincount(t, minlength=num_classes)
    inter = np.diag(conf)
    union = gt_count + conf.sum(axis=0) - inter
    present = gt_count > 0
    if not present.any():
        return float("nan"), float("nan")
    iou = inter[present] / union[present]
    acc = inter[present] / gt_count[present]
    return float(iou.mean()), float(acc.mean())


@dataclass
class EvalReport:
    auroc: float
    ap: float
    fpr95: float
    miou: float
    macc: float
    per_image: list = field(default_factory=list)
    histogram: dict = field(default_factory=dict)

    def summary(self):
        return {k: getattr(self, k) for k in ("auroc", "ap", "fpr95", "miou", "macc")}


def score_histogram(scores, is_ood, bins=50):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(is_ood, dtype=bool).ravel()
    edges = np.histogram_bin_edges(s, bins=bins)
    return {"edges": edges.tolist(),
            "inlier": np.histogram(s[~y], edges)[0].tolist(),
            "outlier": np.histogram(s[y], edges)[0].tolist()}


def evaluate(scores, preds, scenes, bins=50):
    """Pool pixels over all scenes for the aggregate report; also per image."""
    per_image = []
    all_s, all_y, all_p, all_t = [], [], [], []
    num_classes = scenes[0].num_seen_classes
    for score, pred, scene in zip(scores, preds, scenes):
        mask = scene.ood_mask
        valid = scene.labels > 0
        row = {}
        if mask[valid].any() and (~mask[valid]).any():
            sv, yv = score[valid], mask[valid]
            row.update(auroc=auroc(sv, yv), ap=average_precision(sv, yv), fpr95=fpr_at_95_tpr(sv, yv))
        row["miou"], row["macc"] = seg_metrics(pred, scene.labels, mask, num_classes)
        per_image.append(row)
        all_s.append(score[valid])
        all_y.append(mask[valid])
        all_p.append(pred.ravel())
        all_t.append(scene.labels.ravel())
    s, y = np.concatenate(all_s), np.concatenate(all_y)
    truth = np.concatenate(all_t)
    miou, macc = seg_metrics(np.concatenate(all_p), truth, truth == num_classes + 1, num_classes)
    return EvalReport(auroc(s, y), average_precision(s, y), fpr_at_95_tpr(s, y), miou, macc,
                      per_image, score_histogram(s, y, bins))
