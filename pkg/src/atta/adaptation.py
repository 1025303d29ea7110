"""Per-image test-time adaptation: selective BN followed by anomaly-aware
self-training of the classification head.
"""
from __future__ import annotations

import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .calibration import calibrate_image
from .nn import forward_backbone, forward_head, head_gradient, softmax_per_pixel
from .optim import Adam
from .scoring import ood_score, score_logit_gradient
from .selective_bn import DomainShiftEstimate, estimate_domain_shift, sigmoid

log = logging.getLogger(__name__)

PROB_EPS = 1e-10

BN_MODES = ("selective", "train_only", "batch_only")
ENTROPY_MODES = ("anomaly_aware", "seen_only")
CALIB_MODES = ("gmm", "zscore")
CLASS_WEIGHTS = ("auto", "one")
STREAM_MODES = ("episodic", "continue")


@dataclass
class AdaptConfig:
    iterations: int = 1
    learning_rate: float = 1e-4
    tau1: float = 0.3
    tau2: float = 0.6
    use_sbn: bool = True
    use_ast: bool = True
    entropy_mode: str = "anomaly_aware"
    calib_mode: str = "gmm"
    class_weight: str = "auto"
    stream_mode: str = "episodic"
    bn_mode: str = "selective"
    score_kind: str = "energy"
    channel_reduce: str = "mean"
    lambda_min: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau1 < self.tau2 < 1.0:
            raise ValueError(f"need 0 < tau1 < tau2 < 1, got {self.tau1}, {self.tau2}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name, allowed in (("bn_mode", BN_MODES), ("entropy_mode", ENTROPY_MODES),
                              ("calib_mode", CALIB_MODES), ("class_weight", CLASS_WEIGHTS),
                              ("stream_mode", STREAM_MODES)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")


@dataclass
class PseudoLabels:
    region: np.ndarray  # D, boolean per pixel
    target: np.ndarray  # t, 0/1 per pixel (meaningful on D only)
    lambda_weight: float
    tau1: float
    tau2: float

    @property
    def counts(self):
        n1 = int((self.region & (self.target == 1)).sum())
        n0 = int(self.region.sum()) - n1
        return {"t0": n0, "t1": n1, "excluded": int(self.region.size - n0 - n1)}


@dataclass
class AdaptResult:
    F_out: np.ndarray
    G_out: np.ndarray
    Gbar_out: np.ndarray
    domain_estimate: DomainShiftEstimate | None
    loss_trace: list
    pseudo_label_stats: list
    failed: bool = False
    diagnostic: str = ""
    calibration: list = field(default_factory=list)


def build_pseudo_labels(gbar, tau1=0.3, tau2=0.6, class_weight="auto", lambda_min=1.0):
    """Confident region ``D`` and binary outlier targets from calibrated probabilities."""
    gbar = np.asarray(gbar, dtype=np.float64)
    low = gbar < tau1
    high = gbar > tau2
    target = high.astype(np.int8)
    n1 = int(high.sum())
    n0 = int(low.sum())
    if class_weight == "one" or n1 == 0:
        lam = 1.0
    else:
        lam = max(n0 / n1, lambda_min)
    return PseudoLabels(low | high, target, float(lam), tau1, tau2)


def entropy_terms(F, gbar, pseudo):
    """Value of the pseudo-labelled anomaly-aware entropy loss."""
    F = np.asarray(F, dtype=np.float64).reshape(-1, np.shape(F)[-1])
    g = np.asarray(gbar, dtype=np.float64).ravel()
    d = pseudo.region.ravel()
    t = pseudo.target.ravel().astype(np.float64)
    Fc = np.clip(F[d], PROB_EPS, 1.0 - PROB_EPS)
    gc = np.clip(g[d], PROB_EPS, 1.0 - PROB_EPS)
    inlier = (F[d] * (np.log(Fc) + np.log1p(-gc)[:, None])).sum(axis=1)
    return float(-((1.0 - t[d]) * inlier + pseudo.lambda_weight * t[d] * np.log(gc)).sum())


def _softmax_backward(F, dF):
    return F * (dF - (F * dF).sum(axis=-1, keepdims=True))


def anomaly_entropy_loss(logits, pseudo, a_x, b_x, score_kind="energy"):
    """Loss and its gradient w.r.t. logits, with ``a_x``/``b_x`` held fixed.

    Both the class probabilities and the calibrated outlier probability are
    differentiated as functions of the logits. Returns ``(loss, dlogits)``
    with ``dlogits`` shaped like ``logits``.
    """
    shape = np.shape(logits)
    z = np.asarray(logits, dtype=np.float64).reshape(-1, shape[-1])
    d = pseudo.region.ravel()
    grad = np.zeros_like(z)
    if not d.any():
        return 0.0, grad.reshape(shape)
    zd = z[d]
    t = pseudo.target.ravel()[d].astype(np.float64)
    lam = pseudo.lambda_weight
    F = softmax_per_pixel(zd)
    G = ood_score(zd, score_kind)
    gbar = sigmoid((G - a_x) / b_x)

    Fc = np.clip(F, PROB_EPS, 1.0 - PROB_EPS)
    gc = np.clip(gbar, PROB_EPS, 1.0 - PROB_EPS)
    f_in = (F > PROB_EPS) & (F < 1.0 - PROB_EPS)
    g_in = (gbar > PROB_EPS) & (gbar < 1.0 - PROB_EPS)
    log_f = np.log(Fc)
    log_1mg = np.log1p(-gc)
    log_g = np.log(gc)

    inlier = (F * (log_f + log_1mg[:, None])).sum(axis=1)
    loss = -((1.0 - t) * inlier + lam * t * log_g).sum()

    w_in = (1.0 - t)[:, None]
    dF = -w_in * (log_f + log_1mg[:, None] + np.where(f_in, F / Fc, 0.0))
    dg = np.where(g_in, (1.0 - t) * F.sum(axis=1) / (1.0 - gc) - lam * t / gc, 0.0)
    dG = dg * gbar * (1.0 - gbar) / b_x
    grad[d] = _softmax_backward(F, dF) + dG[:, None] * score_logit_gradient(zd, score_kind)
    return float(loss), grad.reshape(shape)


def seen_only_entropy_loss(logits):
    """Shannon entropy of the seen-class softmax summed over pixels, and its logit gradient."""
    shape = np.shape(logits)
    z = np.asarray(logits, dtype=np.float64).reshape(-1, shape[-1])
    F = softmax_per_pixel(z)
    Fc = np.clip(F, PROB_EPS, 1.0 - PROB_EPS)
    f_in = (F > PROB_EPS) & (F < 1.0 - PROB_EPS)
    log_f = np.log(Fc)
    loss = -(F * log_f).sum()
    dF = -(log_f + np.where(f_in, F / Fc, 0.0))
    return float(loss), _softmax_backward(F, dF).reshape(shape)


class HeadState:
    """Mutable head parameters plus their Adam state, owned by one worker."""

    def __init__(self, head, lr):
        self.head = head.copy(np.float64)
        self.opt = Adam([self.head.weight, self.head.bias], lr)

    def step(self, features, dlogits):
        self.opt.step(head_gradient(features, dlogits))


def image_seed(image, seed):
    """Seed derived from image content so results do not depend on stream order."""
    return [int(seed), zlib.crc32(np.ascontiguousarray(image, dtype=np.float32).tobytes())]


def infer(ckpt, image, score_kind="energy"):
    """Frozen-model outputs ``(F, G)`` with training BN statistics."""
    feats, _ = forward_backbone(ckpt.net, image)
    logits = forward_head(feats, ckpt.net.head)
    return softmax_per_pixel(logits), ood_score(logits, score_kind)


def _adapted_features(ckpt, image, config):
    """Backbone features under the configured BN mode, plus the shift estimate.

    The shift probability comes from a pass with training statistics; the
    features then come from a pass where every layer mixes its training
    statistics with the statistics observed in that pass.
    """
    net = ckpt.net
    if not config.use_sbn:
        return forward_backbone(net, image)[0], None
    feats, observed = forward_backbone(net, image)
    est = estimate_domain_shift(observed, net.train_stats(), ckpt.calib_a, ckpt.calib_b,
                                config.channel_reduce)
    if config.bn_mode == "train_only":
        return feats, est
    p = 1.0 if config.bn_mode == "batch_only" else est.probability
    return forward_backbone(net, image, shift_prob=p)[0], est


def adapt_image(ckpt, image, config=None, state=None):
    """Adapt to one image and return its outputs.

    ``state`` is a :class:`HeadState` to continue from (continue-mode
    streams); by default a fresh copy of the checkpoint head is used, so the
    checkpoint itself is never modified.
    """
    config = config or AdaptConfig()
    net = ckpt.net
    feats, est = _adapted_features(ckpt, image, config)
    if state is None:
        state = HeadState(net.head, config.learning_rate)
    seed = image_seed(image, config.seed)
    losses, label_stats, calibs = [], [], []

    if config.use_ast:
        snapshot = (state.head.weight.copy(), state.head.bias.copy())
        for _ in range(config.iterations):
            logits = forward_head(feats, state.head)
            if config.entropy_mode == "seen_only":
                loss, dlogits = seen_only_entropy_loss(logits)
                stats = None
            else:
                G = ood_score(logits, config.score_kind)
                gbar, params, _ = calibrate_image(G, config.calib_mode, seed)
                calibs.append(params)
                pseudo = build_pseudo_labels(gbar, config.tau1, config.tau2, config.class_weight,
                                             config.lambda_min)
                stats = dict(pseudo.counts, **{"lambda": pseudo.lambda_weight})
                loss, dlogits = anomaly_entropy_loss(logits, pseudo, params.a_x, params.b_x,
                                                     config.score_kind)
            losses.append(loss)
            label_stats.append(stats)
            if not math.isfinite(loss) or not np.all(np.isfinite(dlogits)):
                state.head.weight[...], state.head.bias[...] = snapshot
                F, G = infer(ckpt, image, config.score_kind)
                gbar, _, _ = calibrate_image(G, config.calib_mode, seed)
                return AdaptResult(F, G, gbar, est, losses, label_stats, True,
                                   f"non-finite loss {loss} at iteration {len(losses)}", calibs)
            if stats is not None and stats["t0"] + stats["t1"] == 0:
                continue
            state.step(feats, dlogits)

    logits = forward_head(feats, state.head)
    G = ood_score(logits, config.score_kind)
    gbar, params, _ = calibrate_image(G, config.calib_mode, seed)
    calibs.append(params)
    return AdaptResult(softmax_per_pixel(logits), G, gbar, est, losses, label_stats, False, "", calibs)


def adapt_stream(ckpt, images, config=None, workers=1):
    """Adapt a sequence of images.

    Episodic mode treats each image independently (and may use ``workers``
    threads); continue mode carries head parameters and optimiser state
    from one image to the next and always runs sequentially.
    """
    config = config or AdaptConfig()
    images = list(images)
    if not images:
        raise ValueError("empty image stream")

    def safe(image, state=None):
        try:
            return adapt_image(ckpt, image, config, state)
        except Exception as exc:  # one bad image must not end the stream
            log.warning("adaptation failed: %s", exc)
            F, G = infer(ckpt, image, config.score_kind)
            return AdaptResult(F, G, np.full(G.shape, np.nan), None, [], [], True, repr(exc))

    if config.stream_mode == "continue":
        state = HeadState(ckpt.net.head, config.learning_rate)
        return [safe(img, state) for img in images]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(safe, images))
    return [safe(img) for img in images]
