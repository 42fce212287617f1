"""Deterministic synthetic wind-farm readings.

Speeds follow a Weibull distribution, power a logistic curve between
cut-in and cut-out with bounded noise, direction is uniform and the blade
pitch rises with speed above rated. Readings are spaced ten minutes apart.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np


@dataclass(frozen=True)
class PowerCurve:
    cut_in: float = 3.0
    rated: float = 12.0
    cut_out: float = 25.0
    midpoint: float = 7.5
    slope: float = 1.2

    def __call__(self, v) -> np.ndarray:
        """Per-unit output at speed ``v`` (m/s), exactly 0 outside [cut_in, cut_out)."""
        v = np.asarray(v, dtype=float)
        s = lambda x: 1.0 / (1.0 + np.exp(-(x - self.midpoint) / self.slope))
        lo, hi = s(self.cut_in), s(self.rated)
        pu = np.clip((s(v) - lo) / (hi - lo), 0.0, 1.0)
        return np.where((v < self.cut_in) | (v >= self.cut_out), 0.0, pu)


@dataclass(frozen=True)
class SynthConfig:
    weibull_shape: float = 2.0
    weibull_scale: float = 8.0
    noise: float = 0.05  # half-width of uniform per-unit noise
    pitch_gain: float = 2.5  # deg per m/s above rated
    pitch_max: float = 30.0
    curve: PowerCurve = PowerCurve()
    start: str = "2020-01-01T00:00:00"


def synth_arrays(seed: int, n: int, farm_count: int = 1, config: SynthConfig | None = None):
    """Timestamps, per-unit power (n, farm_count) and raw columns (n, 3).

    All farms share the measured features; each farm has its own noise.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)
    speed = cfg.weibull_scale * rng.weibull(cfg.weibull_shape, n)
    direction = rng.uniform(0.0, 360.0, n)
    over = np.maximum(speed - cfg.curve.rated, 0.0)
    pitch = np.clip(cfg.pitch_gain * over + rng.uniform(0.0, 1.0, n) * (over > 0), 0.0,
                    cfg.pitch_max)
    base = cfg.curve(speed)
    noise = rng.uniform(-cfg.noise, cfg.noise, (n, farm_count))
    power = np.clip(base[:, None] + noise * (base[:, None] > 0), 0.0, 1.0)
    t0 = datetime.fromisoformat(cfg.start)
    stamps = tuple((t0 + timedelta(minutes=10 * i)).isoformat() for i in range(n))
    return stamps, power, np.column_stack([speed, direction, pitch])


def synth_wind(seed: int, n: int, farm_count: int = 1, capacity=1.0,
               config: SynthConfig | None = None) -> str:
    """CSV text in the dataset format with power in MW.

    ``capacity`` is a scalar or one rating per farm. A single farm writes a
    ``power`` column, several farms write ``power_1 .. power_b``.
    """
    stamps, pu, raw = synth_arrays(seed, n, farm_count, config)
    cap = np.broadcast_to(np.asarray(capacity, dtype=float), (farm_count,))
    mw = pu * cap
    pcols = ["power"] if farm_count == 1 else [f"power_{j + 1}" for j in range(farm_count)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", *pcols, "wind_speed", "wind_direction", "pitch_angle"])
    for i in range(n):
        w.writerow([stamps[i], *(f"{x:.6f}" for x in mw[i]), *(f"{x:.6f}" for x in raw[i])])
    return buf.getvalue()
