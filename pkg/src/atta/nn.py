"""Small BN-equipped convolutional segmentation network.

Maps are channel-last internally: features and logits have shape
``(H, W, C)``. Images enter in the dataset layout ``(3, H, W)``.

The backbone is a stack of ``conv3x3 -> BN -> ReLU`` blocks and the head a
1x1 convolution. Only the head has gradients here; full backprop for
training lives in :mod:`atta.trainer`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .selective_bn import mix_bn_statistics
from .tensorfile import FormatError, load_arrays, save_arrays

BN_EPS = 1e-5


class ShapeError(ValueError):
    """Input tensor does not match the network layout."""


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    mu_train: np.ndarray
    sigma_train: np.ndarray
    eps: float = BN_EPS

    @property
    def channels(self):
        return self.gamma.shape[0]


@dataclass
class ConvBlock:
    weight: np.ndarray  # (3, 3, C_in, C_out)
    bias: np.ndarray
    bn: BatchNormLayer

    @property
    def matrix(self):
        kh, kw, cin, cout = self.weight.shape
        return self.weight.reshape(kh * kw * cin, cout)


@dataclass
class HeadParams:
    weight: np.ndarray  # (C_feat, C)
    bias: np.ndarray

    def copy(self, dtype=None):
        return HeadParams(np.array(self.weight, dtype=dtype), np.array(self.bias, dtype=dtype))


@dataclass
class SegmentationNet:
    blocks: list
    head: HeadParams

    @property
    def num_classes(self):
        return self.head.bias.shape[0]

    @property
    def in_channels(self):
        return self.blocks[0].weight.shape[2]

    @property
    def widths(self):
        return [b.weight.shape[3] for b in self.blocks]

    def train_stats(self):
        """Per-layer ``(mu_train, sigma_train)`` pairs."""
        return [(b.bn.mu_train, b.bn.sigma_train) for b in self.blocks]


@dataclass
class ModelCheckpoint:
    net: SegmentationNet
    calib_a: float = 0.0
    calib_b: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def calibrated(self):
        return bool(self.meta.get("calibrated", False))


def init_net(num_classes=4, widths=(16, 32, 32), in_channels=3, seed=0):
    """He-initialised network with unit BN and identity running statistics."""
    if len(widths) < 2:
        raise ValueError("need at least two BN layers")
    rng = np.random.default_rng(seed)
    blocks = []
    cin = in_channels
    for cout in widths:
        std = np.sqrt(2.0 / (9 * cin))
        w = (rng.standard_normal((3, 3, cin, cout)) * std).astype(np.float32)
        bn = BatchNormLayer(np.ones(cout, np.float32), np.zeros(cout, np.float32),
                            np.zeros(cout, np.float32), np.ones(cout, np.float32))
        blocks.append(ConvBlock(w, np.zeros(cout, np.float32), bn))
        cin = cout
    hw = (rng.standard_normal((cin, num_classes)) * np.sqrt(1.0 / cin)).astype(np.float32)
    return SegmentationNet(blocks, HeadParams(hw, np.zeros(num_classes, np.float32)))


def image_to_hwc(image):
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"image must be (channels, H, W), got shape {image.shape}")
    return np.ascontiguousarray(image.transpose(1, 2, 0), dtype=np.float32)


def conv3x3(x, block):
    """Pre-normalisation conv output for one HWC map, as (H*W, C_out)."""
    cols = kernels.im2col3x3(x)
    return cols @ block.matrix + block.bias


def bn_affine(mean, std, bn):
    """Fold normalisation with (mean, std) and the BN affine into scale/shift."""
    scale = bn.gamma.astype(np.float64) / np.sqrt(np.asarray(std, np.float64) ** 2 + bn.eps)
    shift = bn.beta.astype(np.float64) - np.asarray(mean, np.float64) * scale
    return scale.astype(np.float32), shift.astype(np.float32)


def forward_backbone(net, image, bn_stats=None, shift_prob=None):
    """Run the backbone on one image.

    ``bn_stats`` is a list of per-layer ``(mean, std)`` used for
    normalisation; ``None`` means the training statistics. With
    ``shift_prob`` set, each layer instead normalises with its training
    statistics mixed toward the statistics it observes in this very pass,
    weighted by ``shift_prob`` (``bn_stats`` is then ignored).

    Returns ``(features, batch_stats)`` where ``batch_stats`` holds, per BN
    layer, the observed per-channel mean/std of that layer's input over all
    pixels.
    """
    x = image_to_hwc(image)
    if x.shape[2] != net.in_channels:
        raise ShapeError(f"image has {x.shape[2]} channels, first conv expects {net.in_channels}")
    train_stats = net.train_stats()
    if bn_stats is None:
        bn_stats = train_stats
    if len(bn_stats) != len(net.blocks):
        raise ShapeError(f"got {len(bn_stats)} BN stat pairs for {len(net.blocks)} layers")
    h, w, _ = x.shape
    observed = []
    for i, block in enumerate(net.blocks):
        z = conv3x3(x, block)
        obs = kernels.channel_stats(z)
        observed.append(obs)
        if shift_prob is None:
            mean, std = bn_stats[i]
        else:
            mean, std = mix_bn_statistics([train_stats[i]], [obs], shift_prob)[0]
        scale, shift = bn_affine(mean, std, block.bn)
        x = np.maximum(z * scale + shift, 0.0).reshape(h, w, -1)
    return x, observed


def forward_head(features, head):
    """Per-pixel logits ``(H, W, C)`` in float64; affine in the head params."""
    features = np.asarray(features)
    if features.shape[-1] != head.weight.shape[0]:
        raise ShapeError(f"features have {features.shape[-1]} channels, head expects {head.weight.shape[0]}")
    flat = features.reshape(-1, features.shape[-1]).astype(np.float64)
    logits = flat @ head.weight.astype(np.float64) + head.bias.astype(np.float64)
    return logits.reshape(features.shape[:-1] + (head.bias.shape[0],))


def softmax_per_pixel(logits):
    """Softmax over the last (class) axis with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def head_gradient(features, dlogits):
    """Gradients of a scalar loss w.r.t. head weight and bias.

    ``dlogits`` is the upstream gradient with the same leading shape as the
    logits. The head is affine, so this does not depend on its parameters.
    """
    f = np.asarray(features, dtype=np.float64)
    f = f.reshape(-1, f.shape[-1])
    g = np.asarray(dlogits, dtype=np.float64)
    g = g.reshape(-1, g.shape[-1])
    if f.shape[0] != g.shape[0]:
        raise ShapeError(f"{f.shape[0]} feature pixels vs {g.shape[0]} gradient pixels")
    return f.T @ g, g.sum(axis=0)


def feature_hash(net, image):
    """SHA-256 of the backbone features of ``image`` under training statistics."""
    feats, _ = forward_backbone(net, image)
    return hashlib.sha256(np.ascontiguousarray(feats, dtype="<f4").tobytes()).hexdigest()


def probe_image(height=16, width=16):
    """Fixed deterministic image used for archived feature hashes."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.stack([0.5 + 0.4 * np.sin(xx / 3.0), 0.5 + 0.4 * np.cos(yy / 4.0),
                    (xx + yy) / (height + width)])
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt, path):
    net = ckpt.net
    arrays = {}
    for i, b in enumerate(net.blocks):
        arrays[f"block{i}.weight"] = b.weight
        arrays[f"block{i}.bias"] = b.bias
        arrays[f"block{i}.bn.gamma"] = b.bn.gamma
        arrays[f"block{i}.bn.beta"] = b.bn.beta
        arrays[f"block{i}.bn.mu_train"] = b.bn.mu_train
        arrays[f"block{i}.bn.sigma_train"] = b.bn.sigma_train
    arrays["head.weight"] = net.head.weight
    arrays["head.bias"] = net.head.bias
    meta = dict(ckpt.meta)
    meta.update(num_classes=net.num_classes, num_bn_layers=len(net.blocks),
                in_channels=net.in_channels, widths=net.widths,
                bn_eps=[b.bn.eps for b in net.blocks],
                calib_a=float(ckpt.calib_a), calib_b=float(ckpt.calib_b))
    return save_arrays(path, arrays, meta)


def load_checkpoint(path):
    arrays, meta = load_arrays(path)
    try:
        n_layers = int(meta["num_bn_layers"])
        widths = list(meta["widths"])
        num_classes = int(meta["num_classes"])
        cin = int(meta["in_channels"])
    except KeyError as exc:
        raise FormatError(f"checkpoint manifest lacks {exc.args[0]!r}") from None
    if len(widths) != n_layers:
        raise FormatError(f"manifest lists {len(widths)} widths for {n_layers} layers")

    def take(name, shape):
        if name not in arrays:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(shape):
            raise FormatError(f"tensor {name!r} has shape {list(arr.shape)}, manifest metadata implies {list(shape)}")
        return arr

    blocks = []
    for i, cout in enumerate(widths):
        bn = BatchNormLayer(take(f"block{i}.bn.gamma", (cout,)), take(f"block{i}.bn.beta", (cout,)),
                            take(f"block{i}.bn.mu_train", (cout,)), take(f"block{i}.bn.sigma_train", (cout,)),
                            float(meta.get("bn_eps", [BN_EPS] * n_layers)[i]))
        blocks.append(ConvBlock(take(f"block{i}.weight", (3, 3, cin, cout)), take(f"block{i}.bias", (cout,)), bn))
        cin = cout
    head = HeadParams(take("head.weight", (cin, num_classes)), take("head.bias", (num_classes,)))
    return ModelCheckpoint(SegmentationNet(blocks, head), float(meta["calib_a"]), float(meta["calib_b"]), meta)


def with_head(net, head):
    """Shallow copy of ``net`` sharing the backbone but using ``head``."""
    return replace(net, head=head)
