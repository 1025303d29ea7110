import math

import numpy as np
import pytest

from atta.nn import forward_backbone, forward_head, init_net
from atta.scenes import LabeledScene
from atta.selective_bn import domain_shift_probability
from atta.trainer import (TrainConfig, TrainingDiverged, _train_step, calibrate_domain_detector,
                          kl_statistics, pixel_accuracy, train)

from conftest import small_scenes


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(bn_momentum=0)
    with pytest.raises(ValueError):
        TrainConfig(bn_momentum=1.5)


def test_single_class_dataset_predicts_that_class():
    rng = np.random.default_rng(0)
    scenes = [LabeledScene(rng.random((3, 16, 16)).astype(np.float32), np.full((16, 16), 3, np.int32), 4)
              for _ in range(4)]
    ckpt = train(scenes, TrainConfig(epochs=60, batch_size=4, learning_rate=1e-2, widths=(4, 4)))
    feats, _ = forward_backbone(ckpt.net, scenes[0].image)
    assert np.all(forward_head(feats, ckpt.net.head).argmax(axis=-1) + 1 == 3)


def test_rejects_novel_pixels():
    scenes = small_scenes(2, ood=True)
    with pytest.raises(ValueError, match="novel"):
        train(scenes, TrainConfig(epochs=1))


def test_tiny_model_learns(tiny_ckpt):
    assert tiny_ckpt.meta["train_accuracy"] >= 0.9
    hist = [row["loss"] for row in tiny_ckpt.meta["history"]]
    assert hist[-1] < hist[0]
    for b in tiny_ckpt.net.blocks:
        assert np.all(b.bn.sigma_train > 0)


def test_training_is_deterministic():
    scenes = small_scenes(8, size=16)
    a = train(scenes, TrainConfig(epochs=2, seed=5, widths=(4, 4)))
    b = train(scenes, TrainConfig(epochs=2, seed=5, widths=(4, 4)))
    assert a.net.head.weight.tobytes() == b.net.head.weight.tobytes()
    assert a.meta["probe_feature_sha256"] == b.meta["probe_feature_sha256"]


def test_divergence_aborts(monkeypatch):
    import atta.trainer as tr
    real = tr._train_step

    def broken(*args):
        out = list(real(*args))
        out[0] = float("nan")
        return tuple(out)

    monkeypatch.setattr(tr, "_train_step", broken)
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train(small_scenes(2, size=16), TrainConfig(epochs=1, widths=(4, 4)))


def test_train_step_gradient_finite_differences():
    scenes = small_scenes(2, size=16)
    images = np.stack([s.image.transpose(1, 2, 0) for s in scenes]).astype(np.float32)
    labels = np.stack([s.labels for s in scenes]).astype(np.int64)
    net = init_net(widths=(4, 5), seed=1)
    # float64 copies make central differences meaningful
    for b in net.blocks:
        b.weight = b.weight.astype(np.float64)
        b.bias = b.bias.astype(np.float64)
        b.bn.gamma = b.bn.gamma.astype(np.float64)
        b.bn.beta = b.bn.beta.astype(np.float64)
    net.head.weight = net.head.weight.astype(np.float64)
    net.head.bias = net.head.bias.astype(np.float64)
    images = images.astype(np.float64)
    loss, grads, *_ = _train_step(net, images, labels)
    params = [net.blocks[0].weight, net.blocks[1].bn.gamma, net.head.weight]
    from atta.trainer import _parameters
    all_params = _parameters(net)
    rng = np.random.default_rng(0)
    for p in params:
        k = next(i for i, q in enumerate(all_params) if q is p)
        g = grads[k]
        for _ in range(4):
            idx = tuple(int(rng.integers(n)) for n in p.shape)
            old = p[idx]
            # a step can straddle a ReLU kink or drown in float32 rounding of
            # the normalisation constants, so one of three steps has to agree
            nums = []
            for step in (1e-3, 3e-4, 1e-4):
                p[idx] = old + step
                lp = _train_step(net, images, labels)[0]
                p[idx] = old - step
                lm = _train_step(net, images, labels)[0]
                p[idx] = old
                nums.append((lp - lm) / (2 * step))
            assert min(abs(g[idx] - n) for n in nums) <= 2e-3 * abs(g[idx]) + 1e-6


def test_calibration_examples(tiny_ckpt):
    imgs = [s.image for s in small_scenes(12, seed=3)]
    ckpt, summary = calibrate_domain_detector(tiny_ckpt, imgs)
    m, s = summary.mean_kl_sum, summary.std_kl_sum
    assert ckpt.calib_a == -(m + 3 * s) and ckpt.calib_b == s
    assert domain_shift_probability(m, ckpt.calib_a, ckpt.calib_b) == pytest.approx(1 / (1 + math.exp(3)))
    assert domain_shift_probability(m + 6 * s, ckpt.calib_a, ckpt.calib_b) == pytest.approx(0.9525741268)
    assert ckpt.meta["calibrated"]


def test_calibration_identical_images_floors_b(tiny_ckpt):
    img = small_scenes(1)[0].image
    ckpt, summary = calibrate_domain_detector(tiny_ckpt, [img] * 10)
    assert summary.std_kl_sum == 0.0 and ckpt.calib_b == 1e-6
    assert domain_shift_probability(summary.mean_kl_sum + 1e-3, ckpt.calib_a, ckpt.calib_b) == 1.0


def test_calibration_needs_ten_images(tiny_ckpt):
    with pytest.raises(ValueError, match="10"):
        calibrate_domain_detector(tiny_ckpt, [s.image for s in small_scenes(9)])


def test_kl_statistics_nonnegative(tiny_ckpt):
    d = kl_statistics(tiny_ckpt, [s.image for s in small_scenes(3, seed=9)])
    assert d.shape == (3,) and np.all(d >= 0)


def test_pixel_accuracy_range(tiny_ckpt):
    acc = pixel_accuracy(tiny_ckpt.net, small_scenes(3, seed=4))
    assert 0.0 <= acc <= 1.0
