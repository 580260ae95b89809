"""Uncalibrated lumped conceptual rainfall-runoff members.

Five bucket structures stand in for an external modelling toolbox. Every
structure runs on daily forcing with stores that start empty, and follows the
same within-day order:

1. drainage: outflow (and inter-store transfer) is computed from the storage
   carried over from the previous day and removed,
2. precipitation enters (the snow structure partitions it first, then melts),
3. actual evapotranspiration is extracted, limited by available water.

Outflow on day ``t`` therefore depends on forcing up to ``t - 1``. Each
structure conserves mass exactly::

    sum(outflow) + sum(actual ET) + final storage = sum(precip) + initial storage

Parameter ranges per structure:

=======================  ==================================================
linear-bucket            k in (0, 1]; et_coef in [0, 2]
nonlinear-bucket         k_max in (0, 1); half_sat > 0; et_coef in [0, 2]
two-bucket               k_fast, k_perc >= 0 with k_fast + k_perc <= 1;
                         k_slow in (0, 1]; et_coef in [0, 2]
soil-moisture-evap       s_max > 0; k_soil, k_route in (0, 1]; et_coef in [0, 2]
snow-degree-day-bucket   t_snow in [-5, 5]; ddf in [0, 10]; k in (0, 1];
                         et_coef in [0, 2]
=======================  ==================================================
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core_data import (
    DateIndex,
    DischargeSeries,
    ForcingSeries,
    fmt,
    read_dated_table,
)
from .errors import (
    AllDivergedError,
    DataError,
    DivergedSimulationError,
    MemberMismatchError,
    NegativePredictionError,
    SchemaMismatchError,
)

log = logging.getLogger(__name__)

SPINUP_DAYS = 365

STRUCTURES = (
    "linear-bucket",
    "nonlinear-bucket",
    "two-bucket",
    "soil-moisture-evap",
    "snow-degree-day-bucket",
)

PARAM_NAMES = {
    "linear-bucket": ("k", "et_coef"),
    "nonlinear-bucket": ("k_max", "half_sat", "et_coef"),
    "two-bucket": ("k_fast", "k_perc", "k_slow", "et_coef"),
    "soil-moisture-evap": ("s_max", "k_soil", "k_route", "et_coef"),
    "snow-degree-day-bucket": ("t_snow", "ddf", "k", "et_coef"),
}


def _check_params(structure: str, p: Mapping[str, float]):
    def within(name, lo, hi, lo_open=False, hi_open=False):
        v = p[name]
        ok = (v > lo if lo_open else v >= lo) and (v < hi if hi_open else v <= hi)
        if not ok:
            raise DataError(f"{structure}: parameter {name}={v} out of range")

    within("et_coef", 0.0, 2.0)
    if structure == "linear-bucket":
        within("k", 0.0, 1.0, lo_open=True)
    elif structure == "nonlinear-bucket":
        within("k_max", 0.0, 1.0, lo_open=True, hi_open=True)
        within("half_sat", 0.0, np.inf, lo_open=True, hi_open=True)
    elif structure == "two-bucket":
        within("k_fast", 0.0, 1.0)
        within("k_perc", 0.0, 1.0)
        within("k_slow", 0.0, 1.0, lo_open=True)
        if p["k_fast"] + p["k_perc"] > 1.0:
            raise DataError("two-bucket: k_fast + k_perc must be <= 1")
    elif structure == "soil-moisture-evap":
        within("s_max", 0.0, np.inf, lo_open=True, hi_open=True)
        within("k_soil", 0.0, 1.0, lo_open=True)
        within("k_route", 0.0, 1.0, lo_open=True)
    elif structure == "snow-degree-day-bucket":
        within("t_snow", -5.0, 5.0)
        within("ddf", 0.0, 10.0)
        within("k", 0.0, 1.0, lo_open=True)


@dataclass(frozen=True)
class MemberSpec:
    member_id: str
    structure: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise DataError(f"unknown structure {self.structure!r}")
        expected = set(PARAM_NAMES[self.structure])
        if set(self.params) != expected:
            raise DataError(
                f"{self.member_id}: {self.structure} needs params {sorted(expected)}, got {sorted(self.params)}"
            )
        params = {k: float(self.params[k]) for k in PARAM_NAMES[self.structure]}
        _check_params(self.structure, params)
        object.__setattr__(self, "params", params)


@dataclass(frozen=True)
class EnsembleMatrix:
    index: DateIndex
    member_ids: tuple[str, ...]
    preds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "member_ids", tuple(self.member_ids))
        preds = np.array(self.preds, dtype=float)
        if preds.ndim != 2 or preds.shape != (self.index.length, len(self.member_ids)):
            raise SchemaMismatchError(
                f"ensemble shape {preds.shape} != ({self.index.length}, {len(self.member_ids)})"
            )
        if len(self.member_ids) < 2:
            raise DataError("an ensemble needs at least 2 members")
        if len(set(self.member_ids)) != len(self.member_ids):
            raise DataError("duplicate member ids")
        if not np.all(np.isfinite(preds)):
            raise DataError("ensemble predictions must be finite")
        if np.any(preds < 0):
            raise NegativePredictionError("ensemble predictions must be >= 0")
        preds.setflags(write=False)
        object.__setattr__(self, "preds", preds)

    @property
    def n_members(self) -> int:
        return len(self.member_ids)

    def window(self, w: DateIndex) -> "EnsembleMatrix":
        return EnsembleMatrix(w, self.member_ids, self.preds[self.index.slice_for(w)])

    def column(self, member_id: str) -> DischargeSeries:
        return DischargeSeries(self.index, self.preds[:, self.member_ids.index(member_id)])

    def reorder(self, member_ids: Sequence[str]) -> "EnsembleMatrix":
        """Columns rearranged to ``member_ids`` (which must be a permutation)."""
        if sorted(member_ids) != sorted(self.member_ids):
            raise MemberMismatchError("member id sets differ")
        pos = [self.member_ids.index(m) for m in member_ids]
        return EnsembleMatrix(self.index, tuple(member_ids), self.preds[:, pos])


# ---------------------------------------------------------------------------
# structure kernels: each takes forcing vectors (T,) and parameter arrays (n,)
# and returns outflow (T, n), actual ET (T, n) and final storage (n,).


def _evap(store, demand):
    et = np.minimum(store, demand)
    return store - et, et


def _linear_bucket(P, T, E, p, init):
    n = p["k"].shape[0]
    s = np.zeros(n) + init
    q = np.empty((P.size, n))
    et = np.empty((P.size, n))
    for t in range(P.size):
        out = p["k"] * s
        s = s - out + P[t]
        s, et[t] = _evap(s, p["et_coef"] * E[t])
        q[t] = out
    return q, et, s


def _nonlinear_bucket(P, T, E, p, init):
    n = p["k_max"].shape[0]
    s = np.zeros(n) + init
    q = np.empty((P.size, n))
    et = np.empty((P.size, n))
    for t in range(P.size):
        out = p["k_max"] * s * s / (s + p["half_sat"])
        s = s - out + P[t]
        s, et[t] = _evap(s, p["et_coef"] * E[t])
        q[t] = out
    return q, et, s


def _two_bucket(P, T, E, p, init):
    n = p["k_fast"].shape[0]
    upper = np.zeros(n) + init[0]
    lower = np.zeros(n) + init[1]
    q = np.empty((P.size, n))
    et = np.empty((P.size, n))
    drain_up = p["k_fast"] + p["k_perc"]
    for t in range(P.size):
        out = p["k_fast"] * upper + p["k_slow"] * lower
        perc = p["k_perc"] * upper
        upper = upper - drain_up * upper + P[t]
        lower = lower + perc - p["k_slow"] * lower
        upper, et[t] = _evap(upper, p["et_coef"] * E[t])
        q[t] = out
    return q, et, upper + lower


def _soil_moisture(P, T, E, p, init):
    n = p["s_max"].shape[0]
    soil = np.zeros(n) + init[0]
    route = np.zeros(n) + init[1]
    q = np.empty((P.size, n))
    et = np.empty((P.size, n))
    for t in range(P.size):
        out = p["k_route"] * route
        drain = p["k_soil"] * soil
        route = route - out + drain
        soil = soil - drain + P[t]
        excess = np.maximum(soil - p["s_max"], 0.0)
        soil = soil - excess
        route = route + excess
        soil, et[t] = _evap(soil, p["et_coef"] * E[t] * soil / p["s_max"])
        q[t] = out
    return q, et, soil + route


def _snow_bucket(P, T, E, p, init):
    n = p["k"].shape[0]
    snow = np.zeros(n) + init[0]
    s = np.zeros(n) + init[1]
    q = np.empty((P.size, n))
    et = np.empty((P.size, n))
    for t in range(P.size):
        out = p["k"] * s
        cold = T[t] <= p["t_snow"]
        snow = snow + np.where(cold, P[t], 0.0)
        liquid = np.where(cold, 0.0, P[t])
        melt = np.minimum(snow, p["ddf"] * np.maximum(T[t] - p["t_snow"], 0.0))
        snow = snow - melt
        s = s - out + liquid + melt
        s, et[t] = _evap(s, p["et_coef"] * E[t])
        q[t] = out
    return q, et, snow + s


_KERNELS = {
    "linear-bucket": (_linear_bucket, 1),
    "nonlinear-bucket": (_nonlinear_bucket, 1),
    "two-bucket": (_two_bucket, 2),
    "soil-moisture-evap": (_soil_moisture, 2),
    "snow-degree-day-bucket": (_snow_bucket, 2),
}


def run_structure(structure: str, params: Mapping[str, Sequence[float]], forcing: ForcingSeries,
                  initial_storage=None):
    """Simulate one structure for a batch of parameter sets.

    Returns ``(outflow, actual_et, final_storage)`` with shapes (T, n), (T, n)
    and (n,). ``initial_storage`` holds one value per store (all zero by
    default); the total initial storage is their sum.
    """
    kernel, n_stores = _KERNELS[structure]
    p = {k: np.atleast_1d(np.asarray(params[k], dtype=float)) for k in PARAM_NAMES[structure]}
    if initial_storage is None:
        initial_storage = (0.0,) * n_stores
    init = initial_storage if n_stores > 1 else initial_storage[0]
    with np.errstate(over="ignore", invalid="ignore"):
        return kernel(forcing.precip, forcing.temp, forcing.pet, p, init)


def simulate_member(m: MemberSpec, f: ForcingSeries) -> DischargeSeries:
    q, _, storage = run_structure(m.structure, m.params, f)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(storage))):
        raise DivergedSimulationError(f"member {m.member_id} produced non-finite states")
    return DischargeSeries(f.index, np.maximum(q[:, 0], 0.0))


@dataclass(frozen=True)
class EnsembleRun:
    """An ensemble plus the members dropped because they diverged."""

    matrix: EnsembleMatrix
    dropped: tuple[str, ...] = ()


def simulate_ensemble(members: Sequence[MemberSpec], f: ForcingSeries) -> EnsembleRun:
    """Run every member; members with non-finite output are dropped and reported."""
    if len(members) < 2:
        raise DataError("an ensemble needs at least 2 members")
    if len({m.member_id for m in members}) != len(members):
        raise DataError("duplicate member ids")
    cols: dict[str, np.ndarray] = {}
    dropped = []
    by_structure: dict[str, list[MemberSpec]] = {}
    for m in members:
        by_structure.setdefault(m.structure, []).append(m)
    for structure, group in by_structure.items():
        params = {k: [m.params[k] for m in group] for k in PARAM_NAMES[structure]}
        q, _, storage = run_structure(structure, params, f)
        for j, m in enumerate(group):
            if np.all(np.isfinite(q[:, j])) and np.isfinite(storage[j]):
                cols[m.member_id] = np.maximum(q[:, j], 0.0)
            else:
                log.warning("member %s diverged; excluded", m.member_id)
                dropped.append(m.member_id)
    kept = [m.member_id for m in members if m.member_id in cols]
    if len(kept) < 2:
        raise AllDivergedError(f"only {len(kept)} members left after dropping {dropped}")
    preds = np.column_stack([cols[k] for k in kept])
    return EnsembleRun(EnsembleMatrix(f.index, tuple(kept), preds), tuple(dropped))


def arithmetic_average(e: EnsembleMatrix) -> DischargeSeries:
    return DischargeSeries(e.index, e.preds.mean(axis=1))


def default_members() -> list[MemberSpec]:
    """The fixed 43-member roster (8 + 8 + 9 + 9 + 9 across the structures)."""
    grids = [
        ("linear-bucket", "lin",
         [dict(k=k, et_coef=c) for k, c in itertools.product((0.02, 0.05, 0.1, 0.2), (0.6, 1.0))]),
        ("nonlinear-bucket", "nlin",
         [dict(k_max=a, half_sat=h, et_coef=c)
          for a, h, c in itertools.product((0.3, 0.7), (10.0, 50.0), (0.6, 1.0))]),
        ("two-bucket", "twob",
         [dict(k_fast=kf, k_perc=kp, k_slow=ks, et_coef=c)
          for (kf, kp, ks), c in itertools.product(
              ((0.5, 0.2, 0.01), (0.3, 0.3, 0.03), (0.15, 0.15, 0.06)), (0.5, 0.8, 1.1))]),
        ("soil-moisture-evap", "smev",
         [dict(s_max=sm, k_soil=0.02, k_route=kr, et_coef=1.0)
          for sm, kr in itertools.product((50.0, 150.0, 400.0), (0.05, 0.2, 0.5))]),
        ("snow-degree-day-bucket", "snow",
         [dict(t_snow=ts, ddf=d, k=0.05, et_coef=0.8)
          for ts, d in itertools.product((-1.0, 0.0, 1.0), (1.5, 3.0, 5.0))]),
    ]
    members = []
    for structure, prefix, grid in grids:
        for i, params in enumerate(grid, start=1):
            members.append(MemberSpec(f"{prefix}{i:02d}", structure, params))
    return members


def write_member_roster(path_or_fh, members: Sequence[MemberSpec]):
    own = isinstance(path_or_fh, (str, Path))
    fh = open(path_or_fh, "w", newline="", encoding="utf-8") if own else path_or_fh
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["member_id", "structure", "params"])
        for m in members:
            w.writerow([m.member_id, m.structure, ";".join(f"{k}={v!r}" for k, v in m.params.items())])
    finally:
        if own:
            fh.close()


def load_external_ensemble(path) -> EnsembleMatrix:
    """Read a wide ``date,<member_1>,...,<member_N>`` CSV."""
    index, names, values, rownums = read_dated_table(path)
    if len(names) < 2:
        raise DataError(f"{path}: an ensemble file needs at least 2 member columns")
    neg = np.argwhere(values < 0)
    if neg.size:
        i, j = neg[0]
        raise NegativePredictionError(
            f"{path}: row {rownums[i]}, member {names[j]}: negative prediction {values[i, j]}"
        )
    return EnsembleMatrix(index, tuple(names), values)


def write_ensemble(path, e: EnsembleMatrix):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *e.member_ids])
        for day, row in zip(e.index.dates, e.preds):
            w.writerow([day.isoformat(), *(fmt(v) for v in row)])
