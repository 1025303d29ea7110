"""Deterministic synthetic segmentation scenes with optional novel objects.

A scene is ``C`` horizontal bands with sinusoidal boundaries, each band a
seen class painted with its base colour plus Gaussian texture noise. Novel
("OOD") objects are ellipses painted from a reserved palette and labelled
``C + 1``. Label ``0`` is reserved for ignore and never generated.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .tensorfile import load_arrays, save_arrays

TEXTURE_SIGMA = 0.03
FOG_GRAY = 0.7
BAND_JITTER = 0.3  # fraction of the even band height

# Seen-class colours sit at vertices of the RGB cube (coordinates 0.15/0.85)
# and novel objects near its centre, so every channel differs by >= 0.25.
# The achromatic vertices come last: with the default four classes a
# light-gray class sits too close to the gray novel objects in logit space.
SEEN_PALETTE = np.array([
    [0.85, 0.15, 0.15],
    [0.15, 0.85, 0.15],
    [0.15, 0.15, 0.85],
    [0.85, 0.85, 0.15],
    [0.85, 0.15, 0.85],
    [0.15, 0.85, 0.85],
    [0.85, 0.85, 0.85],
    [0.15, 0.15, 0.15],
])
OOD_PALETTE = np.array([
    [0.50, 0.50, 0.50],
    [0.58, 0.44, 0.50],
    [0.44, 0.56, 0.42],
    [0.50, 0.42, 0.58],
    [0.42, 0.50, 0.56],
])


@dataclass
class CorruptionSpec:
    enabled: bool = False
    fog_prob: float = 0.5
    color_prob: float = 0.5
    blur_prob: float = 0.5
    fog_strength: tuple = (0.5, 0.8)
    fog_falloff: float = 0.5
    color_jitter_range: tuple = (0.6, 1.4)
    hue_rotation_range: tuple = (-0.5, 0.5)
    blur_sigma_range: tuple = (1.0, 2.0)

    def __post_init__(self):
        for name in ("fog_prob", "color_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        self.fog_strength = tuple(self.fog_strength)
        self.color_jitter_range = tuple(self.color_jitter_range)
        self.hue_rotation_range = tuple(self.hue_rotation_range)
        self.blur_sigma_range = tuple(self.blur_sigma_range)


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    num_seen_classes: int = 4
    ood_enabled: bool = True
    ood_area_fraction_range: tuple = (0.02, 0.10)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.ood_area_fraction_range
        if not 0.0 <= lo <= hi <= 0.5:
            raise ValueError(f"ood_area_fraction_range must satisfy 0 <= lo <= hi <= 0.5, got {(lo, hi)}")
        if self.width < 16 or self.height < 16:
            raise ValueError("scenes must be at least 16x16")
        if not 1 <= self.num_seen_classes <= len(SEEN_PALETTE):
            raise ValueError(f"num_seen_classes must be in 1..{len(SEEN_PALETTE)}")
        self.ood_area_fraction_range = (float(lo), float(hi))
        if isinstance(self.corruption, dict):
            self.corruption = CorruptionSpec(**self.corruption)

    def to_dict(self):
        return asdict(self)


@dataclass
class LabeledScene:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) int32
    num_seen_classes: int
    applied: list = field(default_factory=list)

    @property
    def ood_mask(self):
        return self.labels == self.num_seen_classes + 1


def _rng(*keys):
    return np.random.default_rng([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])


def _paint(labels, colors, rng):
    img = colors[labels - 1].transpose(2, 0, 1)
    img = img + rng.normal(0.0, TEXTURE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_scene(spec):
    """Render one scene; a pure function of ``spec`` (including its seed)."""
    rng = _rng(spec.seed, 0x5CE)
    h, w, c = spec.height, spec.width, spec.num_seen_classes
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    order = rng.permutation(c) + 1
    # band boundaries: near-even cut heights, jittered, with sinusoidal wobble
    even = np.arange(1, c) / c
    cuts = (even + rng.uniform(-BAND_JITTER, BAND_JITTER, size=c - 1) / c) * h
    labels = np.full((h, w), order[0], dtype=np.int32)
    for k, base in enumerate(cuts):
        amp = rng.uniform(1.0, 4.0)
        freq = rng.uniform(0.5, 2.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        boundary = base + amp * np.sin(2.0 * np.pi * freq * xx / w + phase)
        labels[yy >= boundary] = order[k + 1]

    colors = np.vstack([SEEN_PALETTE[:c], OOD_PALETTE])
    if spec.ood_enabled:
        lo, hi = spec.ood_area_fraction_range
        frac = rng.uniform(lo, hi)
        if frac > 0.0:
            n_blobs = int(rng.integers(1, 4))
            shares = rng.dirichlet(np.ones(n_blobs))
            for share in shares:
                area = share * frac * h * w
                aspect = rng.uniform(0.5, 2.0)
                ra = max(math.sqrt(area * aspect / math.pi), 1.0)
                rb = max(area / (math.pi * ra), 1.0)
                theta = rng.uniform(0.0, np.pi)
                margin = min(max(ra, rb), min(h, w) / 2 - 1)
                cy = rng.uniform(margin, h - margin)
                cx = rng.uniform(margin, w - margin)
                dy, dx = yy - cy, xx - cx
                u = dx * math.cos(theta) + dy * math.sin(theta)
                v = -dx * math.sin(theta) + dy * math.cos(theta)
                inside = (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
                if not inside.any():
                    inside[int(round(np.clip(cy, 0, h - 1))), int(round(np.clip(cx, 0, w - 1)))] = True
                labels[inside] = c + 1
            # all blobs in a scene share one palette colour
            colors[c] = OOD_PALETTE[int(rng.integers(len(OOD_PALETTE)))]

    image = _paint(labels, colors, rng)
    scene = LabeledScene(image, labels, c)
    if spec.corruption.enabled:
        scene.image, scene.applied = apply_corruptions(image, spec.corruption, spec.seed)
    return scene


def gaussian_kernel(sigma):
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def fog(image, strength, falloff=0.5):
    """Blend toward gray; full ``strength`` on the top row, fading by ``falloff``."""
    h = image.shape[1]
    ramp = 1.0 - falloff * np.arange(h) / max(h - 1, 1)
    alpha = (strength * ramp)[None, :, None]
    return (1.0 - alpha) * image + alpha * FOG_GRAY


def color_shift(image, scales, angle):
    """Per-channel scaling followed by a rotation about the gray axis."""
    axis = np.ones(3) / math.sqrt(3.0)
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rot = np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)
    mix = rot @ np.diag(scales)
    return np.einsum("ij,jhw->ihw", mix, image)


def blur(image, sigma):
    k = gaussian_kernel(sigma)
    out = convolve1d(image, k, axis=1, mode="reflect")
    return convolve1d(out, k, axis=2, mode="reflect")


def apply_corruptions(image, spec, seed):
    """Apply fog / colour / blur, each independently with its probability.

    Returns ``(corrupted, applied)`` where ``applied`` names the transforms
    used, in order. The label map is never touched.
    """
    image = np.asarray(image, dtype=np.float64)
    if not spec.enabled:
        return image.astype(np.float32), []
    rng = _rng(seed, 0xC0FF)
    applied = []
    # draw every random quantity up front so each transform's parameters do
    # not depend on whether the others fired
    draws = rng.uniform(size=3)
    strength = rng.uniform(*spec.fog_strength)
    scales = rng.uniform(*spec.color_jitter_range, size=3)
    angle = rng.uniform(*spec.hue_rotation_range)
    sigma = rng.uniform(*spec.blur_sigma_range)
    if draws[0] < spec.fog_prob:
        image = fog(image, strength, spec.fog_falloff)
        applied.append("fog")
    if draws[1] < spec.color_prob:
        image = color_shift(image, scales, angle)
        applied.append("color")
    if draws[2] < spec.blur_prob:
        image = blur(image, sigma)
        applied.append("blur")
    return np.clip(image, 0.0, 1.0).astype(np.float32), applied


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

SPLITS = ("train", "test_clean", "test_corrupt")


def save_scene(scene, path, meta=None):
    meta = dict(meta or {}, num_seen_classes=scene.num_seen_classes, applied=scene.applied)
    return save_arrays(path, {"image": scene.image, "labels": scene.labels}, meta)


def load_scene(path):
    arrays, meta = load_arrays(path)
    return LabeledScene(arrays["image"], arrays["labels"].astype(np.int32),
                        int(meta["num_seen_classes"]), list(meta.get("applied", [])))


def build_dataset(train_spec, test_spec, out_dir, n_train=200, n_test=50):
    """Write train / clean-test / corrupted-test splits and ``manifest.json``.

    Training scenes have neither novel objects nor corruption. Each corrupted
    test scene is the clean test scene with the same seed, re-rendered with
    ``test_spec.corruption`` enabled, so the two share label maps.
    """
    out = Path(out_dir)
    train_base = SceneSpec(**{**_shallow(train_spec), "ood_enabled": False,
                              "corruption": CorruptionSpec(enabled=False)})
    clean_base = SceneSpec(**{**_shallow(test_spec), "corruption": CorruptionSpec(enabled=False)})
    corrupt_cfg = CorruptionSpec(**{**asdict(test_spec.corruption), "enabled": True})
    corrupt_base = SceneSpec(**{**_shallow(test_spec), "corruption": corrupt_cfg})

    entries = []
    jobs = [("train", train_base, n_train, 1), ("test_clean", clean_base, n_test, 2),
            ("test_corrupt", corrupt_base, n_test, 2)]
    for split, base, count, stream in jobs:
        for i in range(count):
            seed = _scene_seed(base.seed, stream, i)
            scene = generate_scene(SceneSpec(**{**_shallow(base), "seed": seed}))
            rel = f"{split}/scene_{i:04d}"
            try:
                save_scene(scene, out / rel, {"split": split, "index": i, "seed": seed})
            except OSError as exc:
                raise OSError(f"failed writing {out / rel}: {exc}") from exc
            entries.append({"split": split, "index": i, "seed": seed, "path": rel,
                            "applied": scene.applied,
                            "ood_fraction": float(scene.ood_mask.mean())})
    manifest = {"format": "atta-dataset", "version": 1, "n_train": n_train, "n_test": n_test,
                "train_spec": train_base.to_dict(), "test_spec": corrupt_base.to_dict(),
                "entries": entries}
    path = out / "manifest.json"
    tmp = path.with_name("manifest.json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(path)
    return manifest


def _shallow(spec):
    return {k: getattr(spec, k) for k in spec.__dataclass_fields__}


def _scene_seed(base_seed, stream, index):
    # clean and corrupted test scenes share stream 2 so they pair up by index
    return int(_rng(base_seed, stream, index).integers(0, 2**63 - 1))


def load_split(data_dir, split):
    """All scenes of one split, ordered by index."""
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    rows = sorted((e for e in manifest["entries"] if e["split"] == split), key=lambda e: e["index"])
    return [load_scene(data_dir / e["path"]) for e in rows]
