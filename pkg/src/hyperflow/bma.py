"""Bayesian model averaging of ensemble members.

Each member's likelihood is Gaussian around its own prediction with a plug-in
error variance equal to its mean squared error (floored at ``VAR_FLOOR``).
With a uniform prior the posterior weights are a softmax of the
log-likelihoods, evaluated with log-sum-exp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .core_data import DischargeSeries
from .ensemble import EnsembleMatrix
from .errors import DataError, LengthMismatchError, MemberMismatchError

VAR_FLOOR = 1e-9


@dataclass(frozen=True)
class BmaWeights:
    member_ids: tuple[str, ...]
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "member_ids", tuple(self.member_ids))
        w = np.array(self.w, dtype=float)
        if w.shape != (len(self.member_ids),):
            raise MemberMismatchError(f"{w.size} weights for {len(self.member_ids)} members")
        if np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-12:
            raise DataError("BMA weights must lie on the probability simplex")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, member_ids: Sequence[str]) -> "BmaWeights":
        return cls(member_ids, np.full(len(member_ids), 1.0 / len(member_ids)))


def gaussian_loglik(pred, obs) -> float:
    """Maximised Gaussian log-likelihood ``-(T/2) (ln(2 pi s2) + 1)``, ``s2 = max(MSE, floor)``."""
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if pred.shape != obs.shape or pred.ndim != 1:
        raise LengthMismatchError(f"pred {pred.shape} vs obs {obs.shape}")
    if pred.size < 2:
        raise LengthMismatchError("log-likelihood needs T >= 2")
    var = max(float(np.mean((pred - obs) ** 2)), VAR_FLOOR)
    return -0.5 * pred.size * (math.log(2 * math.pi * var) + 1.0)


def weights_from_logliks(logliks, temperature: float = 1.0) -> np.ndarray:
    """Softmax of ``logliks / temperature`` with a uniform prior."""
    z = np.asarray(logliks, dtype=float) / temperature
    w = np.exp(z - logsumexp(z))
    return w / w.sum()


def member_logliks(preds: np.ndarray, obs: np.ndarray) -> np.ndarray:
    return np.array([gaussian_loglik(preds[:, k], obs) for k in range(preds.shape[1])])


def bma_weights(e: EnsembleMatrix, obs: DischargeSeries, temperature: float = 1.0) -> BmaWeights:
    """Posterior member weights from the fit of each member over the shared window.

    ``e`` and ``obs`` must cover the same days. ``temperature`` divides the
    log-likelihoods before normalisation; 1.0 is plain BMA.
    """
    if e.index != obs.index:
        raise LengthMismatchError(
            f"ensemble window {e.index.start}+{e.index.length} != obs window {obs.index.start}+{obs.index.length}"
        )
    if not temperature > 0:
        raise DataError("bma temperature must be > 0")
    ll = member_logliks(e.preds, obs.q)
    return BmaWeights(e.member_ids, weights_from_logliks(ll, temperature))


def bma_predict(e: EnsembleMatrix, w: BmaWeights) -> DischargeSeries:
    if e.member_ids != w.member_ids:
        raise MemberMismatchError("ensemble members and weight members differ in identity or order")
    return DischargeSeries(e.index, np.maximum(e.preds @ w.w, 0.0))
