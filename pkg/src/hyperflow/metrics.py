"""Goodness-of-fit measures: MSE, RMSE, NSE, KGE and E1.

Every function takes ``(obs, sim)``. Where a denominator degenerates (constant
observations for NSE/E1; zero spread or zero observed mean for KGE) the
function returns ``None`` rather than a NaN, so aggregations can count these
cases instead of silently propagating them. Standard deviations are
population (divide-by-n) for both series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatchError

METRICS = ("NSE", "KGE", "E1", "RMSE")


def _pair(obs, sim):
    obs = np.asarray(obs, dtype=float)
    sim = np.asarray(sim, dtype=float)
    if obs.shape != sim.shape or obs.ndim != 1:
        raise LengthMismatchError(f"obs has shape {obs.shape}, sim has shape {sim.shape}")
    if obs.size < 2:
        raise LengthMismatchError("metrics need at least 2 samples")
    return obs, sim


def mse(obs, sim) -> float:
    obs, sim = _pair(obs, sim)
    return float(np.mean((obs - sim) ** 2))


def rmse(obs, sim) -> float:
    return math.sqrt(mse(obs, sim))


def nse(obs, sim) -> float | None:
    obs, sim = _pair(obs, sim)
    denom = np.sum((obs - obs.mean()) ** 2)
    if denom == 0:
        return None
    return float(1.0 - np.sum((obs - sim) ** 2) / denom)


def e1(obs, sim) -> float | None:
    obs, sim = _pair(obs, sim)
    denom = np.sum(np.abs(obs - obs.mean()))
    if denom == 0:
        return None
    return float(1.0 - np.sum(np.abs(obs - sim)) / denom)


def kge(obs, sim) -> float | None:
    obs, sim = _pair(obs, sim)
    mu_o, mu_s = obs.mean(), sim.mean()
    sd_o, sd_s = obs.std(), sim.std()
    if sd_o == 0 or sd_s == 0 or mu_o == 0:
        return None
    r = np.mean((obs - mu_o) * (sim - mu_s)) / (sd_o * sd_s)
    return float(1.0 - math.sqrt((r - 1) ** 2 + (mu_s / mu_o - 1) ** 2 + (sd_s / sd_o - 1) ** 2))


@dataclass(frozen=True)
class MetricResult:
    name: str
    value: float | None
    n: int

    @property
    def defined(self) -> bool:
        return self.value is not None


_FUNCS = {"NSE": nse, "KGE": kge, "E1": e1, "RMSE": rmse, "MSE": mse}


def evaluate(obs, sim, names=METRICS) -> dict[str, MetricResult]:
    obs, sim = _pair(obs, sim)
    return {n: MetricResult(n, _FUNCS[n](obs, sim), obs.size) for n in names}
