"""Domain-shift detection from BN statistics and CBN/TBN statistic mixing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SIGMA_FLOOR = 1e-6


@dataclass
class DomainShiftEstimate:
    kl_sum: float
    probability: float


def gaussian_kl(mu1, sigma1, mu2, sigma2):
    """KL( N(mu1, sigma1^2) || N(mu2, sigma2^2) ), element-wise."""
    mu1, sigma1, mu2, sigma2 = (np.asarray(v, dtype=np.float64) for v in (mu1, sigma1, mu2, sigma2))
    if (sigma1 <= 0).any() or (sigma2 <= 0).any():
        raise ValueError("standard deviations must be positive")
    kl = np.log(sigma2 / sigma1) + (sigma1 ** 2 + (mu1 - mu2) ** 2) / (2.0 * sigma2 ** 2) - 0.5
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl


def kl_sum(batch_stats, train_stats, channel_reduce="mean"):
    """Sum over layers of the per-layer channel-reduced Gaussian KL.

    ``channel_reduce`` is ``"mean"`` (default) or ``"sum"``. Observed
    standard deviations are floored at 1e-6 so constant channels stay finite.
    """
    if len(batch_stats) != len(train_stats):
        raise ValueError(f"{len(batch_stats)} observed layers vs {len(train_stats)} training layers")
    reduce = {"mean": np.mean, "sum": np.sum}[channel_reduce]
    total = 0.0
    for (mu, sd), (mu_tr, sd_tr) in zip(batch_stats, train_stats):
        mu, sd = np.asarray(mu, np.float64), np.asarray(sd, np.float64)
        if mu.shape != np.shape(mu_tr) or sd.shape != np.shape(sd_tr):
            raise ValueError(f"channel mismatch: {mu.shape} vs {np.shape(mu_tr)}")
        total += float(reduce(gaussian_kl(mu, np.maximum(sd, SIGMA_FLOOR), mu_tr, sd_tr)))
    return total


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def domain_shift_probability(kl, a, b):
    """``sigmoid((kl + a) / b)``."""
    if b <= 0:
        raise ValueError("b must be positive")
    return sigmoid((kl + a) / b)


def estimate_domain_shift(batch_stats, train_stats, a, b, channel_reduce="mean"):
    d = kl_sum(batch_stats, train_stats, channel_reduce)
    return DomainShiftEstimate(d, domain_shift_probability(d, a, b))


def mix_bn_statistics(train_stats, batch_stats, p):
    """Convex mix of means, and of variances, weighted by shift probability ``p``."""
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if len(train_stats) != len(batch_stats):
        raise ValueError("layer count mismatch")
    mixed = []
    for (mu_tr, sd_tr), (mu, sd) in zip(train_stats, batch_stats):
        mu_tr, sd_tr = np.asarray(mu_tr, np.float64), np.asarray(sd_tr, np.float64)
        mu, sd = np.asarray(mu, np.float64), np.asarray(sd, np.float64)
        if mu.shape != mu_tr.shape:
            raise ValueError(f"channel mismatch: {mu.shape} vs {mu_tr.shape}")
        if p == 0.0:
            mixed.append((mu_tr, sd_tr))
        elif p == 1.0:
            mixed.append((mu, sd))
        else:
            # increment form keeps layers whose statistics agree bit-identical
            var_tr = sd_tr ** 2
            mu_hat = mu_tr + p * (mu - mu_tr)
            var_hat = var_tr + p * (sd ** 2 - var_tr)
            mixed.append((mu_hat, np.sqrt(var_hat)))
    return mixed
