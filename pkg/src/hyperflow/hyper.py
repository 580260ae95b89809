"""HYPER-BC: a BMA-weighted ensemble plus a reservoir that predicts its error.

Training on a gauged basin:

1. BMA weights from the ensemble fit over the training window (days inside
   the members' spin-up year are left out by default),
2. ensemble error ``b = observed - K`` over the training window,
3. a ridge readout mapping reservoir states (driven by the basin's
   standardized forcing) to ``b``.

Prediction is ``K + b_hat`` with both terms aligned on the same day. The
raw sum can dip below zero; clipping is opt-in and recorded on the result.
The plain reservoir baseline ("RC") fits the readout to discharge directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bma import BmaWeights, bma_weights
from .core_data import (
    BasinRecord,
    ChannelStats,
    DateIndex,
    DischargeSeries,
    ForcingSeries,
    align,
    standardize_forcing,
)
from .ensemble import SPINUP_DAYS, EnsembleMatrix
from .errors import DataError, LengthMismatchError, MemberMismatchError, WindowMismatchError
from .reservoir import (
    ReadoutWeights,
    ReservoirRealization,
    ReservoirSpec,
    build_reservoir,
    readout_output,
    run_states,
    train_readout,
)


@dataclass(frozen=True)
class BiasSeries:
    index: DateIndex
    b: np.ndarray

    def __post_init__(self):
        b = np.array(self.b, dtype=float)
        if b.shape != (self.index.length,):
            raise LengthMismatchError(f"bias has {b.size} values for a {self.index.length}-day window")
        b.setflags(write=False)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class Prediction:
    """Model output; may hold negative values unless ``clipped``."""

    index: DateIndex
    q: np.ndarray
    clipped: bool = False

    def window(self, w: DateIndex) -> "Prediction":
        return Prediction(w, self.q[self.index.slice_for(w)], self.clipped)


@dataclass(frozen=True)
class TrainedBasinModel:
    basin_id: str
    bma: BmaWeights
    readout: ReadoutWeights
    reservoir: ReservoirSpec
    forcing_stats: ChannelStats
    training_window: DateIndex

    def __post_init__(self):
        if self.readout.w.size != self.reservoir.size:
            raise DataError(
                f"{self.basin_id}: readout has {self.readout.w.size} weights, reservoir size is {self.reservoir.size}"
            )


def bias_series(obs: DischargeSeries, k) -> BiasSeries:
    """Ensemble error ``obs - k`` on a shared window."""
    if obs.index != k.index:
        raise LengthMismatchError("observed and ensemble series cover different windows")
    return BiasSeries(obs.index, obs.q - np.asarray(k.q, dtype=float))


def _realize(reservoir) -> ReservoirRealization:
    return reservoir if isinstance(reservoir, ReservoirRealization) else build_reservoir(reservoir)


def _training_window(basin: BasinRecord, e: EnsembleMatrix, window: DateIndex | None) -> DateIndex:
    if basin.discharge is None:
        raise DataError(f"basin {basin.basin_id} is ungauged and cannot be trained")
    common = align(align(basin.forcing.index, basin.discharge.index), e.index)
    if window is None:
        return common
    if not common.contains(window):
        raise WindowMismatchError(
            f"{basin.basin_id}: training window {window.start}..{window.end} "
            f"exceeds available data {common.start}..{common.end}"
        )
    return window


def fit_window(e_index: DateIndex, window: DateIndex, exclude_spinup: bool) -> DateIndex:
    """Part of ``window`` used for the BMA fit (skips the members' spin-up year)."""
    if not exclude_spinup:
        return window
    first_valid = e_index.start.toordinal() + SPINUP_DAYS
    skip = max(0, first_valid - window.start.toordinal())
    if window.length - skip < 2:
        raise WindowMismatchError("training window lies almost entirely inside the ensemble spin-up")
    return DateIndex.between(window.dates[skip], window.end) if skip else window


def full_states(reservoir: ReservoirRealization, forcing: ForcingSeries, stats: ChannelStats) -> np.ndarray:
    """States over the whole forcing record, starting from rest on its first day."""
    return run_states(reservoir, stats.apply(forcing))


def train_hyper_bc(
    basin: BasinRecord,
    e: EnsembleMatrix,
    reservoir: ReservoirRealization | ReservoirSpec,
    window: DateIndex | None = None,
    exclude_spinup: bool = True,
    temperature: float = 1.0,
    states: np.ndarray | None = None,
) -> TrainedBasinModel:
    """Fit BMA weights and the bias readout for one gauged basin.

    ``states`` may carry precomputed :func:`full_states` for the basin to avoid
    re-running the reservoir.
    """
    res = _realize(reservoir)
    window = _training_window(basin, e, window)
    spec = res.spec
    if window.length < spec.washout + SPINUP_DAYS:
        raise WindowMismatchError(
            f"{basin.basin_id}: training window of {window.length} days is shorter than "
            f"washout ({spec.washout}) + spin-up ({SPINUP_DAYS})"
        )
    fw = fit_window(e.index, window, exclude_spinup)
    w = bma_weights(e.window(fw), basin.discharge.window(fw), temperature)
    k = e.window(window).preds @ w.w
    b = basin.discharge.window(window).q - k
    _, stats = standardize_forcing(basin.forcing)
    if states is None:
        states = full_states(res, basin.forcing, stats)
    sl = basin.forcing.index.slice_for(window)
    readout = train_readout(states[sl], b, spec.ridge, spec.washout)
    return TrainedBasinModel(basin.basin_id, w, readout, spec, stats, window)


def _check_members(e: EnsembleMatrix, w: BmaWeights) -> EnsembleMatrix:
    if e.member_ids == w.member_ids:
        return e
    if sorted(e.member_ids) != sorted(w.member_ids):
        raise MemberMismatchError("ensemble roster differs from the trained weights")
    return e.reorder(w.member_ids)


def predict_hyper_bc(
    m: TrainedBasinModel,
    f: ForcingSeries,
    e: EnsembleMatrix,
    reservoir: ReservoirRealization | ReservoirSpec | None = None,
    clip: bool = False,
    states: np.ndarray | None = None,
) -> Prediction:
    """Ensemble-mean plus predicted error over the whole forcing record."""
    if e.index != f.index:
        raise WindowMismatchError("ensemble and forcing must cover the same days")
    e = _check_members(e, m.bma)
    if states is None:
        res = _realize(reservoir if reservoir is not None else m.reservoir)
        if res.spec != m.reservoir:
            raise DataError("reservoir realization does not match the trained model")
        states = full_states(res, f, m.forcing_stats)
    q = e.preds @ m.bma.w + readout_output(states, m.readout)
    if clip:
        q = np.maximum(q, 0.0)
    return Prediction(f.index, q, clip)


def train_rc_direct(
    basin: BasinRecord,
    reservoir: ReservoirRealization | ReservoirSpec,
    window: DateIndex | None = None,
    states: np.ndarray | None = None,
) -> tuple[ReadoutWeights, ChannelStats]:
    """Readout fitted to raw discharge, no ensemble involved."""
    res = _realize(reservoir)
    if basin.discharge is None:
        raise DataError(f"basin {basin.basin_id} is ungauged and cannot be trained")
    common = align(basin.forcing.index, basin.discharge.index)
    window = common if window is None else window
    if not common.contains(window):
        raise WindowMismatchError(f"{basin.basin_id}: training window exceeds available data")
    _, stats = standardize_forcing(basin.forcing)
    if states is None:
        states = full_states(res, basin.forcing, stats)
    sl = basin.forcing.index.slice_for(window)
    readout = train_readout(states[sl], basin.discharge.window(window).q, res.spec.ridge, res.spec.washout)
    return readout, stats


def predict_rc_direct(
    readout: ReadoutWeights,
    stats: ChannelStats,
    f: ForcingSeries,
    reservoir: ReservoirRealization | ReservoirSpec,
    clip: bool = False,
    states: np.ndarray | None = None,
) -> Prediction:
    if states is None:
        states = full_states(_realize(reservoir), f, stats)
    q = readout_output(states, readout)
    if clip:
        q = np.maximum(q, 0.0)
    return Prediction(f.index, q, clip)
