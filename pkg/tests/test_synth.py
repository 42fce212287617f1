import numpy as np

from regeq.features import Dataset, KernelConfig, KernelSpec, feature_matrix, fit_baseline
from regeq.synth import PowerCurve, synth_arrays, synth_wind


def test_same_seed_same_text():
    assert synth_wind(3, 50, 2, [100.0, 200.0]) == synth_wind(3, 50, 2, [100.0, 200.0])
    assert synth_wind(3, 50) != synth_wind(4, 50)


def test_power_within_capacity():
    _, pu, raw = synth_arrays(0, 10_000, 3)
    assert pu.shape == (10_000, 3) and raw.shape == (10_000, 3)
    assert pu.min() >= 0.0 and pu.max() <= 1.0
    assert np.all(raw[:, 0] >= 0) and np.all((raw[:, 1] >= 0) & (raw[:, 1] < 360))


def test_power_curve_shape():
    curve = PowerCurve()
    assert curve(2.9) == 0.0 and curve(25.0) == 0.0
    assert curve(3.0) == 0.0 and curve(12.0) == 1.0 and curve(20.0) == 1.0
    v = np.linspace(3.0, 12.0, 50)
    assert np.all(np.diff(curve(v)) > 0)


def test_calm_readings_produce_nothing():
    _, pu, raw = synth_arrays(1, 2000, 2)
    calm = raw[:, 0] < 3.0
    assert calm.any() and np.all(pu[calm] == 0.0)


def test_timestamps_ten_minutes_apart():
    stamps, _, _ = synth_arrays(0, 3)
    assert stamps == ("2020-01-01T00:00:00", "2020-01-01T00:10:00", "2020-01-01T00:20:00")


def test_baseline_tracks_the_power_curve():
    # speed kernels only: weights grow across the rising part of the curve
    kc = KernelConfig((KernelSpec("wind_speed", (3.0, 6.0, 9.0, 12.0, 15.0), 0.3),))
    _, pu, raw = synth_arrays(0, 2000)
    fit = fit_baseline(Dataset(feature_matrix(raw[:, :1], kc), pu), tau=10.0)
    w = fit.theta
    assert w[0] < w[1] < w[2] < w[3]
    assert w[2] > 0.3 and w[3] > 0.7
