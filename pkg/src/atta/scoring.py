"""Per-pixel OOD scores and the anomaly-aware (C+1)-way distribution.

Higher score means more likely novel. Scores are float64.
"""
import numpy as np

SCORE_KINDS = ("energy", "max_logit")


def energy_score(logits):
    """Negative log-sum-exp over the class axis (last axis)."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1)
    return -(m + np.log(np.exp(z - m[..., None]).sum(axis=-1)))


def max_logit_score(logits):
    return -np.asarray(logits, dtype=np.float64).max(axis=-1)


def ood_score(logits, kind="energy"):
    if kind == "energy":
        return energy_score(logits)
    if kind == "max_logit":
        return max_logit_score(logits)
    raise ValueError(f"unknown score kind {kind!r}; expected one of {SCORE_KINDS}")


def score_logit_gradient(logits, kind="energy"):
    """d score / d logits, same shape as ``logits``."""
    z = np.asarray(logits, dtype=np.float64)
    if kind == "energy":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return -e / e.sum(axis=-1, keepdims=True)
    if kind == "max_logit":
        g = np.zeros_like(z)
        np.put_along_axis(g, z.argmax(axis=-1)[..., None], -1.0, axis=-1)
        return g
    raise ValueError(f"unknown score kind {kind!r}")


def anomaly_aware_distribution(F, outlier_prob):
    """Stack ``F * (1 - p)`` with ``p`` as the extra outlier class (last axis)."""
    F = np.asarray(F, dtype=np.float64)
    p = np.asarray(outlier_prob, dtype=np.float64)[..., None]
    return np.concatenate([F * (1.0 - p), p], axis=-1)
