"""Turn raw OOD score maps into per-pixel outlier probabilities.

A two-component 1-D Gaussian mixture is fitted to an image's scores; the
largest point where the weighted component densities are equal becomes the
Platt shift, and the score standard deviation the Platt scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .selective_bn import sigmoid

MIN_SAMPLES = 50
HIST_BINS = 50
SMOOTH_WINDOW = 3
PEAK_MIN_RELATIVE_HEIGHT = 0.02
MAX_ITER = 100
TOL = 1e-6
SUBSAMPLE_CAP = 10_000
SIGMA_FLOOR_REL = 1e-4
PI_FLOOR = 1e-3
SCALE_FLOOR = 1e-6


@dataclass
class GmmFit:
    pi1: float
    pi2: float
    mu1: float
    mu2: float
    sigma1: float
    sigma2: float
    log_likelihood: float
    iterations: int
    converged: bool
    collapsed: bool = False
    loglik_trace: list = field(default_factory=list, repr=False)


@dataclass
class CalibrationParams:
    a_x: float
    b_x: float
    fallback_used: str = "none"  # none | midpoint | zscore


def find_peaks(scores, bins=HIST_BINS, window=SMOOTH_WINDOW):
    """Centres of local maxima of the smoothed histogram, left to right.

    Maxima lower than 2% of the tallest one are dropped as noise.
    """
    counts, edges = np.histogram(scores, bins=bins)
    smooth = np.convolve(counts.astype(np.float64), np.ones(window) / window, mode="same")
    centers = 0.5 * (edges[:-1] + edges[1:])
    padded = np.concatenate([[-np.inf], smooth, [-np.inf]])
    is_peak = (smooth > padded[:-2]) & (smooth >= padded[2:])
    is_peak &= smooth >= PEAK_MIN_RELATIVE_HEIGHT * smooth.max()
    idx = np.flatnonzero(is_peak)
    return centers[idx], smooth[idx]


def _init_means(x):
    std = x.std()
    centers, heights = find_peaks(x)
    if len(centers) == 0:
        c = float(np.median(x))
        return c - 0.5 * std, c + 0.5 * std
    right = float(centers[-1])
    top = int(np.argmax(heights))
    if top != len(centers) - 1:
        return float(centers[top]), right
    # the main mode is the right-most one, so there is no separate outlier
    # mode; start the outlier component one std into the right tail rather
    # than splitting the inlier classes among themselves
    return right, right + std


def fit_gmm_1d(scores, max_iter=MAX_ITER, tol=TOL):
    """EM fit of a two-component mixture, components sorted by mean.

    Initial means come from histogram peaks (outlier component at the
    right-most peak), both sigmas at half the sample std and equal weights.
    A component whose sigma or weight falls below its floor marks the fit as
    collapsed and not converged.
    """
    x = np.asarray(scores, dtype=np.float64).ravel()
    if x.size < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
    std = float(x.std())
    if not std > 0.0:
        m = float(x.mean())
        return GmmFit(0.5, 0.5, m, m, 0.0, 0.0, -math.inf, 0, False, True)

    mu1, mu2 = _init_means(x)
    pi = np.array([0.5, 0.5])
    mu = np.array([mu1, mu2])
    sigma = np.array([std / 2.0, std / 2.0])
    sigma_floor = SIGMA_FLOOR_REL * std
    trace = []
    converged = collapsed = False
    it = 0
    accepted = (pi, mu, sigma)  # parameters whose likelihood is trace[-1]
    for it in range(1, max_iter + 1):
        new_pi, new_mu, new_sigma, ll = kernels.em_step(x, pi, mu, sigma)
        if trace and ll < trace[-1]:
            # EM cannot lower the likelihood; this is rounding at a fixed point
            pi, mu, sigma = accepted
            converged = True
            break
        trace.append(float(ll))
        accepted = (pi, mu, sigma)
        if (not np.all(np.isfinite(new_sigma)) or new_sigma.min() < sigma_floor
                or new_pi.min() < PI_FLOOR):
            collapsed = True
            break
        pi, mu, sigma = new_pi, new_mu, new_sigma
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            converged = True
            break
    if not collapsed and accepted[0] is not pi:
        # likelihood of the returned parameters, unless rounding made the
        # last update a hair worse, in which case keep the previous ones
        ll = float(kernels.em_step(x, pi, mu, sigma)[3])
        if ll >= trace[-1]:
            trace.append(ll)
        else:
            pi, mu, sigma = accepted
    order = np.argsort(mu, kind="stable")
    pi, mu, sigma = pi[order], mu[order], sigma[order]
    return GmmFit(float(pi[0]), float(pi[1]), float(mu[0]), float(mu[1]), float(sigma[0]),
                  float(sigma[1]), trace[-1], it, converged and not collapsed, collapsed, trace)


def weighted_density(a, pi, mu, sigma):
    return pi * np.exp(-0.5 * ((a - mu) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))


def crossing_point(fit):
    """Largest ``a`` with ``pi1 N(a|mu1,s1) == pi2 N(a|mu2,s2)``.

    Returns ``(a, fallback)``; ``fallback`` is ``"midpoint"`` when there is
    no real root inside ``[mu1 - 3 s1, mu2 + 3 s2]``.
    """
    p1, p2, m1, m2, s1, s2 = fit.pi1, fit.pi2, fit.mu1, fit.mu2, fit.sigma1, fit.sigma2
    midpoint = 0.5 * (m1 + m2)
    if min(s1, s2) <= 0.0 or min(p1, p2) <= 0.0:
        return midpoint, "midpoint"
    # log(p1 N1) - log(p2 N2) = qa a^2 + qb a + qc
    qa = 0.5 / s2 ** 2 - 0.5 / s1 ** 2
    qb = m1 / s1 ** 2 - m2 / s2 ** 2
    qc = 0.5 * m2 ** 2 / s2 ** 2 - 0.5 * m1 ** 2 / s1 ** 2 + math.log(p1 * s2 / (p2 * s1))
    roots = []
    if abs(qa) <= 1e-12 * max(abs(qb), 1e-300):
        if qb != 0.0:
            roots = [-qc / qb]
    else:
        disc = qb * qb - 4.0 * qa * qc
        if disc >= 0.0:
            sq = math.sqrt(disc)
            q = -0.5 * (qb + math.copysign(sq, qb))
            roots = [q / qa] + ([qc / q] if q != 0.0 else [])
    lo, hi = m1 - 3.0 * s1, m2 + 3.0 * s2
    roots = [r for r in roots if math.isfinite(r) and lo <= r <= hi]
    if not roots:
        return midpoint, "midpoint"
    a = max(roots)
    # one Newton step on the log-density difference polishes rounding
    f = (qa * a + qb) * a + qc
    df = 2.0 * qa * a + qb
    if df != 0.0:
        a_new = a - f / df
        if lo <= a_new <= hi:
            a = a_new
    return a, "none"


def platt_calibrate(scores, a_x, b_x):
    if not b_x > 0:
        raise ValueError("b_x must be positive")
    return sigmoid((np.asarray(scores, dtype=np.float64) - a_x) / b_x)


def calibrate_image(scores, mode="gmm", seed=0, max_iter=MAX_ITER, tol=TOL):
    """Calibrate one score map. Returns ``(probabilities, params, fit_or_None)``.

    ``gmm`` mode fits the mixture on at most 10k seeded-subsampled pixels and
    falls back to z-scoring when the fit collapses; ``zscore`` mode uses the
    sample mean and std directly.
    """
    g = np.asarray(scores, dtype=np.float64)
    flat = g.ravel()
    if flat.size < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} pixels, got {flat.size}")
    b_x = max(float(flat.std()), SCALE_FLOOR)
    fit = None
    if mode == "zscore":
        params = CalibrationParams(float(flat.mean()), b_x, "none")
    elif mode == "gmm":
        sample = flat
        if flat.size > SUBSAMPLE_CAP:
            rng = np.random.default_rng([seed, 0x6A3])
            sample = flat[rng.choice(flat.size, SUBSAMPLE_CAP, replace=False)]
        fit = fit_gmm_1d(sample, max_iter, tol)
        if fit.collapsed:
            params = CalibrationParams(float(flat.mean()), b_x, "zscore")
        else:
            a_x, fallback = crossing_point(fit)
            params = CalibrationParams(float(a_x), b_x, fallback)
    else:
        raise ValueError(f"unknown calibration mode {mode!r}")
    return platt_calibrate(g, params.a_x, params.b_x), params, fit
