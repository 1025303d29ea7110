"""Supervised training of the segmentation net and domain-detector calibration."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .optim import Adam
from .nn import BN_EPS, ModelCheckpoint, feature_hash, forward_backbone, init_net, probe_image
from .selective_bn import kl_sum

log = logging.getLogger(__name__)

MIN_CALIBRATION_IMAGES = 10


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    bn_momentum: float = 0.1
    widths: tuple = (16, 32, 32)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must lie in (0, 1]")
        self.widths = tuple(self.widths)


@dataclass
class KlStatSummary:
    mean_kl_sum: float
    std_kl_sum: float
    count: int


def _cross_entropy(logits, labels, num_classes):
    """Mean CE over pixels with labels in 1..C; returns (loss, dlogits, correct, count)."""
    valid = (labels >= 1) & (labels <= num_classes)
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = int(valid.sum())
    target = np.where(valid, labels - 1, 0)
    rows = np.arange(labels.shape[0])
    loss = -(logp[rows, target] * valid).sum() / max(n, 1)
    grad = np.exp(logp)
    grad[rows, target] -= 1.0
    grad *= valid[:, None] / max(n, 1)
    correct = int(((logp.argmax(axis=1) == target) & valid).sum())
    return loss, grad.astype(logits.dtype), correct, n


def _train_step(net, images, labels):
    """Forward + backward on a batch with training-mode BN.

    Returns (loss, grads, batch_stats, correct, count); ``grads`` follows the
    order of :func:`_parameters`.
    """
    b, h, w, _ = images.shape
    x = images
    caches = []
    batch_stats = []
    for block in net.blocks:
        cin = x.shape[3]
        cols = np.concatenate([kernels.im2col3x3(x[i]) for i in range(b)])
        z = cols @ block.matrix + block.bias
        mean, std = kernels.channel_stats(z)
        batch_stats.append((mean, std))
        inv = (1.0 / np.sqrt(std ** 2 + block.bn.eps)).astype(z.dtype)
        xhat, out = kernels.bn_relu_train_forward(z, mean.astype(z.dtype), inv,
                                                  block.bn.gamma, block.bn.beta)
        caches.append((cols, xhat, inv, out, cin))
        x = out.reshape(b, h, w, -1)

    feats = x.reshape(b * h * w, -1)
    logits = feats @ net.head.weight + net.head.bias
    loss, dlogits, correct, count = _cross_entropy(logits, labels.reshape(-1), net.num_classes)

    grads = [None] * (4 * len(net.blocks) + 2)
    grads[-2] = feats.T @ dlogits
    grads[-1] = dlogits.sum(axis=0)
    da = dlogits @ net.head.weight.T
    for li in range(len(net.blocks) - 1, -1, -1):
        block = net.blocks[li]
        cols, xhat, inv, out, cin = caches[li]
        dz, dgamma, dbeta = kernels.bn_relu_train_backward(da, xhat, out, inv, block.bn.gamma)
        dw = (cols.T @ dz).reshape(block.weight.shape)
        grads[4 * li:4 * li + 4] = [dw, dz.sum(axis=0), dgamma, dbeta]
        if li > 0:
            dcols = dz @ block.matrix.T
            da = np.concatenate([
                kernels.col2im3x3(dcols[i * h * w:(i + 1) * h * w], h, w, cin).reshape(h * w, cin)
                for i in range(b)])
    return loss, grads, batch_stats, correct, count


def _parameters(net):
    params = []
    for block in net.blocks:
        params += [block.weight, block.bias, block.bn.gamma, block.bn.beta]
    return params + [net.head.weight, net.head.bias]


def train(scenes, config=None, progress=None):
    """Train a fresh network on ``scenes`` (no novel-class pixels allowed).

    ``progress`` is an optional callable receiving per-epoch dicts. Returns
    an uncalibrated :class:`ModelCheckpoint` whose meta carries the
    training curve.
    """
    config = config or TrainConfig()
    if not scenes:
        raise ValueError("no training scenes")
    num_classes = scenes[0].num_seen_classes
    for s in scenes:
        if s.ood_mask.any():
            raise ValueError("training scenes must not contain novel-class pixels")
    images = np.stack([s.image.transpose(1, 2, 0) for s in scenes]).astype(np.float32)
    labels = np.stack([s.labels for s in scenes]).astype(np.int64)

    net = init_net(num_classes, config.widths, images.shape[3], config.seed)
    params = _parameters(net)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    running = [(np.zeros(w), np.ones(w)) for w in config.widths]
    rng = np.random.default_rng([config.seed, 0x7A1])
    m = config.bn_momentum
    history = []
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(scenes))
        tot_loss = tot_correct = tot_count = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            loss, grads, stats, correct, count = _train_step(net, images[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch starting {start}")
            opt.step(grads)
            for i, (mean, std) in enumerate(stats):
                rm, rv = running[i]
                running[i] = ((1 - m) * rm + m * mean, (1 - m) * rv + m * std ** 2)
            tot_loss += loss * count
            tot_correct += correct
            tot_count += count
        row = {"epoch": epoch, "loss": tot_loss / tot_count, "accuracy": tot_correct / tot_count,
               "elapsed_s": time.perf_counter() - t0}
        history.append(row)
        log.info("epoch %d loss %.4f acc %.4f", epoch, row["loss"], row["accuracy"])
        if progress:
            progress(row)

    for block, (rm, rv) in zip(net.blocks, running):
        block.bn.mu_train = rm.astype(np.float32)
        block.bn.sigma_train = np.sqrt(np.maximum(rv, 0.0)).astype(np.float32)
        if not (block.bn.sigma_train > 0).all():
            block.bn.sigma_train = np.maximum(block.bn.sigma_train, np.float32(np.sqrt(BN_EPS)))

    meta = {"train_config": asdict(config), "history": history,
            "train_accuracy": pixel_accuracy(net, scenes), "seed": config.seed,
            "calibrated": False}
    meta["probe_feature_sha256"] = feature_hash(net, probe_image())
    return ModelCheckpoint(net, 0.0, 1.0, meta)


def pixel_accuracy(net, scenes):
    """Pixel accuracy under inference-mode BN (training statistics)."""
    from .nn import forward_head

    correct = total = 0
    for s in scenes:
        feats, _ = forward_backbone(net, s.image)
        pred = forward_head(feats, net.head).argmax(axis=-1) + 1
        valid = (s.labels >= 1) & (s.labels <= s.num_seen_classes)
        correct += int(((pred == s.labels) & valid).sum())
        total += int(valid.sum())
    return correct / max(total, 1)


def kl_statistics(ckpt, images, channel_reduce="mean"):
    """KL-sum of each image's BN statistics against the training statistics."""
    net = ckpt.net
    train_stats = net.train_stats()
    out = []
    for img in images:
        _, observed = forward_backbone(net, img, train_stats)
        out.append(kl_sum(observed, train_stats, channel_reduce))
    return np.array(out)


def calibrate_domain_detector(ckpt, images, sigmas=3.0, channel_reduce="mean"):
    """Set ``(a, b)`` from the spread of the KL-sum over training images.

    ``a = -(mean + sigmas * std)``, ``b = max(std, 1e-6)``, so an image at
    the training mean maps to ``sigmoid(-sigmas)``. Mutates and returns
    ``ckpt`` together with the :class:`KlStatSummary`.
    """
    images = list(images)
    if len(images) < MIN_CALIBRATION_IMAGES:
        raise ValueError(f"need at least {MIN_CALIBRATION_IMAGES} calibration images, got {len(images)}")
    d = kl_statistics(ckpt, images, channel_reduce)
    summary = KlStatSummary(float(d.mean()), float(d.std()), len(d))
    ckpt.calib_a = -(summary.mean_kl_sum + sigmas * summary.std_kl_sum)
    ckpt.calib_b = max(summary.std_kl_sum, 1e-6)
    ckpt.meta.update(calibrated=True, kl_summary=asdict(summary), calib_sigmas=sigmas,
                     kl_channel_reduce=channel_reduce)
    return ckpt, summary
