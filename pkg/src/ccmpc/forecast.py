"""Disturbance forecast buffer and the sinusoid-plus-noise disturbance scenario.

Gaussian draws are a pure function of ``(seed, k)``: a Philox counter-based
generator keyed by the seed with counter ``(k, 0, 0, 0)`` yields two 64-bit
words, which Box-Muller turns into one unit normal. Any step can therefore be
regenerated without replaying the stream, and the scheme is portable to any
Philox-4x64 implementation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import ContractViolation

_TWO_POW_M53 = 2.0**-53


def unit_normal(seed: int, k: int) -> float:
    """The ``k``-th draw of the seeded unit-normal stream."""
    if k < 0:
        raise ValueError("stream index must be non-negative")
    bits = np.random.Philox(key=int(seed), counter=[int(k), 0, 0, 0]).random_raw(2)
    u1 = (float(bits[0] >> np.uint64(11)) + 1.0) * _TWO_POW_M53  # (0, 1]
    u2 = float(bits[1] >> np.uint64(11)) * _TWO_POW_M53  # [0, 1)
    return float(np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2))


@dataclass(frozen=True)
class DisturbanceScenario:
    """True disturbance ``a sin(w k) + s w_k``; its model drops the noise term."""

    amplitude: float = 0.1
    frequency: float = 0.1
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


def generate_forecast(scenario: DisturbanceScenario, k: int) -> float:
    return float(scenario.amplitude * np.sin(scenario.frequency * k))


def generate_true(scenario: DisturbanceScenario, k: int) -> float:
    if scenario.noise_std == 0.0:
        return generate_forecast(scenario, k)
    return generate_forecast(scenario, k) + scenario.noise_std * unit_normal(scenario.seed, k)


@dataclass(frozen=True)
class ForecastBuffer:
    """Predictions ``(v_k, ..., v_{k+H-1})`` for the current step onwards."""

    values: np.ndarray
    head_is_measured: bool = False
    horizon_h: int = field(init=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] < 1:
            raise ContractViolation("forecast values must have shape (H, dist_dim) with H >= 1")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "horizon_h", vals.shape[0])

    @property
    def dist_dim(self) -> int:
        return self.values.shape[1]

    def head(self, count: int) -> np.ndarray:
        if count > self.horizon_h:
            raise ContractViolation(f"requested {count} forecast entries from a buffer of {self.horizon_h}")
        return self.values[:count]


def _as_dist(value, q: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape != (q,):
        raise ContractViolation(f"disturbance has shape {arr.shape}, expected ({q},)")
    return arr


def advance(buffer: ForecastBuffer, new_tail) -> ForecastBuffer:
    """Drop the oldest entry and append a prediction for the new last step; the head stays a prediction."""
    tail = _as_dist(new_tail, buffer.dist_dim)
    return ForecastBuffer(np.vstack([buffer.values[1:], tail[None]]), head_is_measured=False)


def replace_head(buffer: ForecastBuffer, measured) -> ForecastBuffer:
    vals = buffer.values.copy()
    vals[0] = _as_dist(measured, buffer.dist_dim)
    return ForecastBuffer(vals, head_is_measured=True)


def update(buffer: ForecastBuffer, measured, new_tail) -> ForecastBuffer:
    """Advance one step, then overwrite the head with the measurement: ``(a, b, c) -> (m, c, t)``."""
    return replace_head(advance(buffer, new_tail), measured)


def initial_buffer(forecast_fn, horizon_h: int, dist_dim: int, k0: int = 0) -> ForecastBuffer:
    """Buffer filled with model predictions for steps ``k0 .. k0+H-1``."""
    vals = np.array([np.full(dist_dim, forecast_fn(k0 + i)) for i in range(horizon_h)])
    return ForecastBuffer(vals)


def load_forecast_csv(path) -> dict[int, float]:
    """Read an external forecast sequence with columns ``k`` and ``nu_hat``."""
    out: dict[int, float] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        if reader.fieldnames is None or not {"k", "nu_hat"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: forecast CSV needs columns 'k' and 'nu_hat'")
        for row in reader:
            out[int(row["k"])] = float(row["nu_hat"])
    return out


class ReplayForecast:
    """Forecast model that replays external values and falls back to a scenario model elsewhere."""

    def __init__(self, table: dict[int, float], fallback):
        self._table = dict(table)
        self._fallback = fallback

    def __call__(self, k: int) -> float:
        if k in self._table:
            return self._table[k]
        return self._fallback(k)
