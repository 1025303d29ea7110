import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atta.scoring import (anomaly_aware_distribution, energy_score, max_logit_score, ood_score,
                          score_logit_gradient)

logit_arrays = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 5)),
                      elements=st.floats(-50, 50))


def test_energy_of_zero_logits():
    assert abs(energy_score(np.zeros(2)) - (-math.log(2))) < 1e-9


def test_energy_dominant_logit():
    assert energy_score(np.array([100.0, -1e6, -1e6])) == pytest.approx(-100.0, abs=1e-12)


def test_max_logit_example():
    assert max_logit_score(np.array([3.0, 1.0, -2.0])) == -3.0


def test_max_logit_brute_force(rng):
    z = rng.standard_normal((6, 5, 4))
    expected = np.empty((6, 5))
    for i in range(6):
        for j in range(5):
            best = -np.inf
            for c in range(4):
                best = max(best, z[i, j, c])
            expected[i, j] = -best
    np.testing.assert_array_equal(max_logit_score(z), expected)


@given(logit_arrays, st.floats(-20, 20))
def test_energy_translation(z, t):
    np.testing.assert_allclose(energy_score(z + t), energy_score(z) - t, atol=1e-9)


@given(logit_arrays, st.randoms())
def test_scores_permutation_invariant(z, r):
    perm = list(range(z.shape[1]))
    r.shuffle(perm)
    for kind in ("energy", "max_logit"):
        np.testing.assert_allclose(ood_score(z[:, perm], kind), ood_score(z, kind), atol=1e-12)


@pytest.mark.parametrize("kind", ["energy", "max_logit"])
def test_score_gradient_finite_differences(kind, rng):
    z = rng.standard_normal((3, 4))
    g = score_logit_gradient(z, kind)
    h = 1e-6
    for i in range(3):
        for c in range(4):
            zp, zm = z.copy(), z.copy()
            zp[i, c] += h
            zm[i, c] -= h
            num = (ood_score(zp, kind)[i] - ood_score(zm, kind)[i]) / (2 * h)
            assert g[i, c] == pytest.approx(num, abs=1e-6)


def test_unknown_kind():
    with pytest.raises(ValueError):
        ood_score(np.zeros(3), "nope")


def test_anomaly_aware_examples():
    F = np.array([0.5, 0.5])
    np.testing.assert_allclose(anomaly_aware_distribution(F, 0.2), [0.4, 0.4, 0.2])
    np.testing.assert_array_equal(anomaly_aware_distribution(F, 0.0), [0.5, 0.5, 0.0])
    np.testing.assert_array_equal(anomaly_aware_distribution(F, 1.0), [0.0, 0.0, 1.0])


@settings(max_examples=50)
@given(arrays(np.float64, (5, 3), elements=st.floats(0.01, 1.0)),
       arrays(np.float64, (5,), elements=st.floats(0.0, 1.0)))
def test_anomaly_aware_marginalisation(w, p):
    F = w / w.sum(axis=1, keepdims=True)
    Y = anomaly_aware_distribution(F, p)
    np.testing.assert_allclose(Y[:, :-1].sum(axis=1), 1 - Y[:, -1], atol=1e-7)
    np.testing.assert_allclose(Y.sum(axis=1), 1.0, atol=1e-6)
    assert Y.min() >= 0 and Y.max() <= 1
