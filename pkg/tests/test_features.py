import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regeq.errors import DimensionMismatch, InvariantViolation, NonfiniteInput
from regeq.features import (Dataset, KernelConfig, KernelSpec, RawRecord, feature_matrix,
                            fit_baseline, fit_price_taker, gaussian_features, predict)
from regeq.qp import QPSettings


def speed_only(centers=(5.0,), scale=0.3):
    return KernelConfig((KernelSpec("wind_speed", tuple(centers), scale),))


def random_dataset(seed, n=200, k=5):
    rng = np.random.default_rng(seed)
    Phi = rng.uniform(size=(n, k))
    w = np.clip(Phi @ rng.normal(0.3, 0.2, k) + rng.normal(0, 0.05, n), 0, None)
    return Dataset(Phi, w)


def test_kernel_at_center_is_one():
    kc = KernelConfig.default()
    rec = RawRecord("t", (0.5,), {"wind_speed": 5.0, "wind_direction": 180.0,
                                  "pitch_angle": kc.kernels[2].centers[3]})
    phi = gaussian_features(rec, kc)
    assert phi.shape == (30,)
    assert phi[3] == 1.0            # speed center 5 m/s
    assert phi[10 + 5] == 1.0       # direction center 180 deg
    assert phi[20 + 3] == 1.0
    # far from a center the kernel may underflow to exactly zero
    assert np.all((phi >= 0) & (phi <= 1))


def test_kernel_formula():
    phi = feature_matrix([[6.0]], speed_only())
    assert phi[0, 0] == pytest.approx(math.exp(-0.3), abs=1e-12)
    assert round(float(phi[0, 0]), 6) == 0.740818


def test_direction_scale_at_center():
    kc = KernelConfig((KernelSpec("wind_direction", (180.0,), 0.03),))
    assert feature_matrix([[180.0]], kc)[0, 0] == 1.0


def test_features_ignore_timestamp():
    kc = KernelConfig.default()
    vals = {"wind_speed": 7.3, "wind_direction": 41.0, "pitch_angle": 2.2}
    a = gaussian_features(RawRecord("2020-01-01T00:00:00", (0.1,), vals), kc)
    b = gaussian_features(RawRecord("1999-12-31T23:50:00", (0.1,), vals), kc)
    assert np.array_equal(a, b)


def test_kernel_config_validation():
    with pytest.raises(InvariantViolation):
        KernelSpec("wind_speed", (3.0, 2.0), 0.3)
    with pytest.raises(InvariantViolation):
        KernelSpec("wind_speed", (3.0,), 0.0)
    with pytest.raises(NonfiniteInput):
        feature_matrix([[np.nan]], speed_only())


def test_kernel_config_roundtrip():
    kc = KernelConfig.default()
    assert KernelConfig.from_dict(kc.to_dict()) == kc


def test_predict():
    assert predict(np.zeros(3), np.ones(3)) == 0.0
    assert predict([1.0, 2.0], [0.5, 0.25]) == 1.0
    with pytest.raises(DimensionMismatch):
        predict([1.0], [1.0, 2.0])


# baseline


def test_realizable_target_recovered():
    rng = np.random.default_rng(0)
    Phi = rng.uniform(size=(100, 4))
    fit = fit_baseline(Dataset(Phi, Phi[:, 0]), tau=10.0)
    assert np.allclose(fit.theta, [1, 0, 0, 0], atol=1e-6)
    assert fit.loss <= 1e-10


def test_zero_target_gives_zero_weights():
    rng = np.random.default_rng(1)
    fit = fit_baseline(Dataset(rng.uniform(size=(50, 3)), np.zeros(50)), tau=10.0)
    assert np.allclose(fit.theta, 0.0, atol=1e-8)


def test_scalar_projection_to_ball_boundary():
    Phi = np.full((10, 1), 0.5)
    fit = fit_baseline(Dataset(Phi, np.ones(10)), tau=0.5)  # unconstrained optimum is 2
    assert fit.theta[0] == pytest.approx(0.5, abs=1e-7)


def test_baseline_loss_nonincreasing_in_tau():
    data = random_dataset(2)
    losses = [fit_baseline(data, tau).loss for tau in (0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)]
    assert all(b <= a + 1e-10 for a, b in zip(losses, losses[1:]))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 3.0))
def test_fitted_weights_inside_ball(seed, tau):
    data = random_dataset(seed, n=60, k=4)
    assert np.abs(fit_baseline(data, tau).theta).sum() <= tau + 1e-8


def test_baseline_kkt_certified():
    fit = fit_baseline(random_dataset(3), 1.0)
    assert fit.solution.kkt.max() <= 1e-6


# price taker


def test_equal_prices_reduce_to_baseline():
    data = random_dataset(4)
    lmp = np.random.default_rng(0).uniform(10, 40, data.n)
    tight = QPSettings(tol=1e-10)
    pt = fit_price_taker(data, lmp, lmp, gamma=0.5, tau=1.0, settings=tight)
    base = fit_baseline(data, 1.0, tight)
    assert np.max(np.abs(pt.theta - base.theta)) <= 1e-6


def test_zero_gamma_picks_best_vertex():
    data = random_dataset(5)
    lmp_da, lmp_rt = np.full(data.n, 30.0), np.full(data.n, 20.0)
    fit = fit_price_taker(data, lmp_da, lmp_rt, gamma=0.0, tau=2.0)
    coef = (lmp_da - lmp_rt) @ data.features
    expect = np.zeros(data.dim)
    j = int(np.argmax(np.abs(coef)))
    expect[j] = 2.0 * np.sign(coef[j])
    assert np.allclose(fit.theta, expect, atol=1e-6)
    assert not fit.nonunique


def test_zero_gamma_flags_ties():
    Phi = np.ones((20, 2))
    fit = fit_price_taker(Dataset(Phi, np.zeros(20)), np.full(20, 2.0), np.ones(20), 0.0, 1.0)
    assert fit.nonunique
    assert np.abs(fit.theta).sum() == pytest.approx(1.0, abs=1e-6)


def test_large_gamma_approaches_baseline():
    data = random_dataset(6)
    rng = np.random.default_rng(1)
    pt = fit_price_taker(data, rng.uniform(10, 40, data.n), rng.uniform(5, 60, data.n),
                         gamma=1e6, tau=10.0)
    assert np.max(np.abs(pt.theta - fit_baseline(data, 10.0).theta)) <= 1e-3


def test_price_taker_objective_is_revenue_minus_loss():
    data = random_dataset(7, n=40, k=3)
    rng = np.random.default_rng(2)
    l1, l2 = rng.uniform(10, 40, 40), rng.uniform(5, 60, 40)
    gamma = 1e-4
    fit = fit_price_taker(data, l1, l2, gamma=gamma, tau=10.0)
    f = data.features @ fit.theta
    w = data.power[:, 0]
    value = np.mean(l1 * f + l2 * (w - f)) - gamma * np.mean((f - w) ** 2)
    # the QP minimizes loss minus the theta-dependent part of the revenue
    assert -fit.solution.objective + np.mean(l2 * w) == pytest.approx(value, rel=1e-9)


def test_price_history_length_checked():
    data = random_dataset(8, n=10)
    with pytest.raises(ValueError):
        fit_price_taker(data, np.ones(9), np.ones(9), 1.0, 1.0)
