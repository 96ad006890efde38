import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from horeg.align.procrustes import umeyama
from horeg.errors import DegenerateConfiguration, InsufficientPoints
from horeg.geom import Rotation, geodesic_angle

seeds = st.integers(0, 2**32 - 1)


def _case(seed, n=30):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    R = Rotation.random(rng)
    s = float(rng.uniform(0.1, 10))
    t = rng.normal(size=3) * 5
    return X, R, s, t, rng


@given(seeds)
def test_recovers_similarity(seed):
    X, R, s, t, _ = _case(seed)
    T = umeyama(X, s * R.apply(X) + t)
    assert geodesic_angle(T.rotation, R) < 1e-9
    assert T.scale == pytest.approx(s, rel=1e-10)
    np.testing.assert_allclose(T.translation, t, atol=1e-8)


@given(seeds)
def test_rigid_mode_keeps_unit_scale(seed):
    X, R, _, t, _ = _case(seed)
    T = umeyama(X, R.apply(X) + t, with_scale=False)
    assert T.scale == 1.0
    assert geodesic_angle(T.rotation, R) < 1e-9


@given(seeds)
@settings(max_examples=30)
def test_noisy_fit_is_least_squares_optimal(seed):
    X, R, s, t, rng = _case(seed)
    Y = s * R.apply(X) + t + rng.normal(0, 0.05, X.shape)
    T = umeyama(X, Y)
    best = np.sum((T.apply(X) - Y) ** 2)
    # small perturbations of the solution never do better
    for _ in range(10):
        dR = Rotation.from_rotvec(rng.normal(0, 1e-3, 3))
        cand = (T.scale * (1 + rng.normal(0, 1e-3))) * (dR * T.rotation).apply(X) + T.translation \
            + rng.normal(0, 1e-3, 3)
        assert np.sum((cand - Y) ** 2) >= best - 1e-12


@given(seeds)
def test_never_returns_a_reflection(seed):
    X, _, _, _, _ = _case(seed)
    Y = X * np.array([-1.0, 1.0, 1.0])
    T = umeyama(X, Y)
    assert np.linalg.det(T.R) == pytest.approx(1.0)


@given(seeds)
def test_inverse_direction_is_inverse_transform(seed):
    X, R, s, t, _ = _case(seed)
    Y = s * R.apply(X) + t
    F, B = umeyama(X, Y), umeyama(Y, X)
    np.testing.assert_allclose(F.compose(B).apply(X), X, atol=1e-8)


def test_weights_ignore_outliers():
    X, R, s, t, _ = _case(3)
    Y = s * R.apply(X) + t
    Y[:3] += 10.0
    w = np.ones(len(X))
    w[:3] = 0.0
    T = umeyama(X, Y, weights=w)
    assert geodesic_angle(T.rotation, R) < 1e-9


def test_degenerate_inputs():
    with pytest.raises(InsufficientPoints):
        umeyama(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfiguration):
        umeyama(line, line)
    with pytest.raises(ValueError):
        umeyama(np.zeros((4, 3)), np.zeros((5, 3)))


def test_planar_points_are_fine():
    X, R, s, t, _ = _case(5)
    X[:, 2] = 0.0
    T = umeyama(X, s * R.apply(X) + t)
    assert geodesic_angle(T.rotation, R) < 1e-9
