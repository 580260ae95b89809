"""Experiment protocols over a basin study.

* exp1: every basin gauged; AVE, BMA, RC, HYPER-BC and each member, scored on
  the training and prediction windows.
* exp2: k-fold transfer; each fold in turn is treated as ungauged.
* exp3: a fixed test set spread along x, with n gauged basins sampled from
  the rest, repeated over seeded iterations.
* exp4: each region in turn is the only gauged one, against a random
  baseline of the same size.

Work runs in two phases. Per-basin preparation (ensemble, reservoir states,
readout training) is spread over worker processes; the transfer tasks that
follow are small. Results are merged in plan order, so reports are
byte-identical at any worker count. Wall-clock timings are kept out of the
deterministic files and go to ``timing.csv``.
"""

from __future__ import annotations

import csv
import datetime as dt
import functools
import hashlib
import json
import logging
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from time import perf_counter
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import __version__
from .bma import bma_predict, bma_weights
from .core_data import (
    AttributeTable,
    BasinRecord,
    DateIndex,
    DischargeSeries,
    ForcingSeries,
    load_attributes,
    load_manifest,
    standardize_forcing,
)
from .ensemble import EnsembleMatrix, arithmetic_average, default_members, load_external_ensemble, simulate_ensemble
from .errors import (
    ConfigError,
    DataError,
    EmptyRegionError,
    InsufficientBasinsError,
    SchemaMismatchError,
    WindowMismatchError,
)
from .hyper import (
    TrainedBasinModel,
    fit_window,
    full_states,
    predict_hyper_bc,
    predict_rc_direct,
    train_hyper_bc,
    train_rc_direct,
)
from .metrics import METRICS, evaluate
from .regionalization import WeightMatrix, proximity_transfer, regress_transfer, report_lasso_coefficients
from .reservoir import ReservoirSpec, build_reservoir, nonlinear_readout, philox

log = logging.getLogger(__name__)

DEFAULT_TRAIN = DateIndex.between(dt.date(1993, 1, 1), dt.date(2000, 12, 31))
DEFAULT_PREDICT = DateIndex.between(dt.date(2001, 1, 1), dt.date(2006, 12, 31))
GAUGED_RESERVOIR = ReservoirSpec(size=700, density=0.0006, spectral_radius=0.4, input_scale=0.5, ridge=0.001, seed=0)
UNGAUGED_RESERVOIR = ReservoirSpec(size=200, density=0.0006, spectral_radius=0.4, input_scale=0.5, ridge=1.0, seed=0)

RECORD_HEADER = ("experiment", "method", "basin_id", "window", "metric", "value", "n_gauged", "iteration", "region")
SUMMARY_HEADER = ("experiment", "method", "window", "metric", "n_gauged", "region", "n_basins", "n_undefined",
                  "median", "mean", "p10", "p90", "band_p10", "band_median", "band_p90")
CDF_HEADER = ("experiment", "method", "window", "metric", "n_gauged", "region", "x", "F")
TIMING_HEADER = ("experiment", "basin_id", "method", "stage", "seconds")
TIMING_REPORT_HEADER = ("method", "iterative_calibration", "n_basins", "train_seconds_median",
                        "predict_seconds_median", "one_time_seconds_median", "one_time_seconds_total")
UNDEFINED = "undefined"
PROX, REG, RANDOM = "HYPER-BcProx", "HYPER-BcReg", "Random-"
STREAM_FOLDS, STREAM_SCARCE, STREAM_REMOTE = 2, 3, 4


@dataclass(frozen=True)
class StudyConfig:
    manifest: Path
    attributes: Path | None = None
    ensemble: str = "builtin"  # or a directory holding <basin_id>.csv wide ensemble files
    gauged: ReservoirSpec = GAUGED_RESERVOIR
    ungauged: ReservoirSpec = UNGAUGED_RESERVOIR
    train_window: DateIndex = DEFAULT_TRAIN
    predict_window: DateIndex = DEFAULT_PREDICT
    clip: bool = False
    master_seed: int = 0
    exclude_spinup: bool = True
    bma_temperature: float = 1.0
    lasso_lambda: float = 0.1
    lasso_convention: str = "scaled"
    n_components: int = 3
    k_folds: int = 12
    n_test: int = 17
    n_list: tuple[int, ...] = (3, 10, 20, 30, 50, 70)
    iterations: int = 100
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "manifest", Path(self.manifest))
        if self.attributes is not None:
            object.__setattr__(self, "attributes", Path(self.attributes))
        object.__setattr__(self, "n_list", tuple(int(n) for n in self.n_list))
        if self.train_window.end >= self.predict_window.start:
            raise ConfigError("training window must end before the prediction window starts")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        if self.n_test < 1 or self.iterations < 1:
            raise ConfigError("n_test and iterations must be >= 1")
        if not self.n_list or min(self.n_list) < 1:
            raise ConfigError("n_list must hold positive training-set sizes")
        if self.lasso_convention not in ("scaled", "raw"):
            raise ConfigError("lasso_convention must be 'scaled' or 'raw'")
        if self.lasso_lambda < 0 or self.n_components < 0:
            raise ConfigError("lasso_lambda and n_components must be >= 0")
        if not self.bma_temperature > 0:
            raise ConfigError("bma_temperature must be > 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        """Everything that can change results (worker count excluded)."""
        return {
            "manifest": str(self.manifest),
            "attributes": None if self.attributes is None else str(self.attributes),
            "ensemble": self.ensemble,
            "gauged": self.gauged.to_dict(),
            "ungauged": self.ungauged.to_dict(),
            "train_window": [self.train_window.start.isoformat(), self.train_window.end.isoformat()],
            "predict_window": [self.predict_window.start.isoformat(), self.predict_window.end.isoformat()],
            "clip_nonnegative": self.clip,
            "master_seed": self.master_seed,
            "exclude_spinup": self.exclude_spinup,
            "bma_temperature": self.bma_temperature,
            "lasso_lambda": self.lasso_lambda,
            "lasso_convention": self.lasso_convention,
            "n_components": self.n_components,
            "k_folds": self.k_folds,
            "n_test": self.n_test,
            "n_list": list(self.n_list),
            "iterations": self.iterations,
        }

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class Record(NamedTuple):
    experiment: str
    method: str
    basin_id: str
    window: str
    metric: str
    value: float | None
    n_gauged: int | None = None
    iteration: int | None = None
    region: str | None = None


class TimingRow(NamedTuple):
    experiment: str
    basin_id: str
    method: str
    stage: str  # "one-time", "train" or "predict"
    seconds: float


@dataclass
class ExperimentReport:
    experiment: str
    records: list[Record]
    timing: list[TimingRow]
    provenance: dict
    extras: dict[str, tuple[tuple[str, ...], list[tuple]]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# study access


class Study:
    """Basins, attributes and ensemble source for one run.

    Observed discharge is only reachable through :meth:`discharge`, which
    records ``(context, basin_id, purpose)`` so tests can check that no test
    basin's observations ever feed training.
    """

    def __init__(self, basins: Sequence[BasinRecord], attributes: AttributeTable | None = None,
                 ensemble: str = "builtin"):
        self._basins = {b.basin_id: b for b in basins}
        self.ids = tuple(b.basin_id for b in basins)
        self.attributes = attributes
        self.ensemble_source = ensemble
        self.access_log: list[tuple[str, str, str]] = []

    @classmethod
    def load(cls, cfg: StudyConfig) -> "Study":
        basins = load_manifest(cfg.manifest)
        attrs = load_attributes(cfg.attributes) if cfg.attributes is not None else None
        if attrs is not None:
            missing = [b.basin_id for b in basins if b.basin_id not in attrs.basin_ids]
            if missing:
                raise SchemaMismatchError(f"basins without attributes: {missing[:5]}")
        return cls(basins, attrs, cfg.ensemble)

    def forcing(self, bid: str) -> ForcingSeries:
        return self._basins[bid].forcing

    def centroid(self, bid: str) -> tuple[float, float]:
        return self._basins[bid].centroid

    def region(self, bid: str) -> str | None:
        return self._basins[bid].region

    def is_gauged(self, bid: str) -> bool:
        return self._basins[bid].gauged

    def discharge(self, bid: str, purpose: str, context: str, sink: list | None = None) -> DischargeSeries:
        b = self._basins[bid]
        if b.discharge is None:
            raise DataError(f"basin {bid} has no discharge observations")
        (self.access_log if sink is None else sink).append((context, bid, purpose))
        return b.discharge

    def gauged_record(self, bid: str, context: str, sink: list | None = None) -> BasinRecord:
        q = self.discharge(bid, "train", context, sink)
        return replace(self._basins[bid], discharge=q)

    def ensemble(self, bid: str) -> tuple[EnsembleMatrix, tuple[str, ...]]:
        """Ensemble over the basin's forcing record and the ids of dropped members."""
        f = self.forcing(bid)
        if self.ensemble_source == "builtin":
            run = simulate_ensemble(default_members(), f)
            return run.matrix, run.dropped
        e = load_external_ensemble(Path(self.ensemble_source) / f"{bid}.csv")
        if not e.index.contains(f.index):
            raise WindowMismatchError(f"{bid}: external ensemble does not cover the forcing record")
        return e.window(f.index), ()


@functools.lru_cache(maxsize=4)
def _reservoir(spec: ReservoirSpec):
    return build_reservoir(spec)


# ---------------------------------------------------------------------------
# task execution

_CONTEXT = None


def _call(fn, item):
    return fn(_CONTEXT, item)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def run_tasks(fn: Callable, items: Sequence, context, workers: int) -> list:
    """``[fn(context, item) for item in items]``, optionally across forked workers.

    The context reaches workers by fork inheritance rather than pickling;
    results come back in item order.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(context, it) for it in items]
    global _CONTEXT
    _CONTEXT = context
    try:
        n = min(workers, len(items))
        with ProcessPoolExecutor(max_workers=n, mp_context=mp.get_context("fork")) as ex:
            return list(ex.map(_call, [fn] * len(items), items, chunksize=max(1, len(items) // (4 * n))))
    finally:
        _CONTEXT = None


def _metric_records(experiment, method, bid, window, obs, sim, n_gauged=None, iteration=None, region=None):
    return [Record(experiment, method, bid, window, name, r.value, n_gauged, iteration, region)
            for name, r in evaluate(obs, sim, METRICS).items()]


def _check_windows(bid: str, f: ForcingSeries, cfg: StudyConfig):
    for name, w in (("training", cfg.train_window), ("prediction", cfg.predict_window)):
        if not f.index.contains(w):
            raise WindowMismatchError(f"{bid}: forcing record does not cover the {name} window {w.start}..{w.end}")


# ---------------------------------------------------------------------------
# experiment 1


def _exp1_basin(ctx, bid):
    study, cfg = ctx
    accesses: list = []
    t0 = perf_counter()
    e, dropped = study.ensemble(bid)
    t_ens = perf_counter() - t0
    basin = study.gauged_record(bid, "exp1", accesses)
    f = basin.forcing
    _check_windows(bid, f, cfg)
    res = _reservoir(cfg.gauged)

    t0 = perf_counter()
    _, stats = standardize_forcing(f)
    states = full_states(res, f, stats)
    t_states = perf_counter() - t0
    t0 = perf_counter()
    fw = fit_window(e.index, cfg.train_window, cfg.exclude_spinup)
    w = bma_weights(e.window(fw), basin.discharge.window(fw), cfg.bma_temperature)
    t_bma = perf_counter() - t0
    t0 = perf_counter()
    model = train_hyper_bc(basin, e, res, cfg.train_window, cfg.exclude_spinup, cfg.bma_temperature, states=states)
    t_bc_train = perf_counter() - t0
    t0 = perf_counter()
    bc = predict_hyper_bc(model, f, e, res, clip=cfg.clip, states=states)
    t_bc_pred = perf_counter() - t0
    t0 = perf_counter()
    rc_w, rc_stats = train_rc_direct(basin, res, cfg.train_window, states=states)
    t_rc_train = perf_counter() - t0
    t0 = perf_counter()
    rc = predict_rc_direct(rc_w, rc_stats, f, res, clip=cfg.clip, states=states)
    t_rc_pred = perf_counter() - t0
    t0 = perf_counter()
    bma_q = bma_predict(e, w).q
    t_bma_pred = perf_counter() - t0

    obs = study.discharge(bid, "eval", "exp1", accesses)
    windows = (("train", fw), ("predict", cfg.predict_window))
    series = [("AVE", arithmetic_average(e).q), ("BMA", bma_q), ("RC", rc.q), ("HYPER-BC", bc.q)]
    series += [(m, e.preds[:, k]) for k, m in enumerate(e.member_ids)]
    records = []
    for method, q in series:
        for wname, win in windows:
            records += _metric_records("exp1", method, bid, wname, obs.window(win).q, q[e.index.slice_for(win)])
    timing = [
        TimingRow("exp1", bid, "ENSEMBLE", "one-time", t_ens),
        TimingRow("exp1", bid, "BMA", "train", t_bma),
        TimingRow("exp1", bid, "BMA", "predict", t_bma_pred),
        TimingRow("exp1", bid, "HYPER-BC", "train", t_states + t_bc_train),
        TimingRow("exp1", bid, "HYPER-BC", "predict", t_states + t_bc_pred),
        TimingRow("exp1", bid, "RC", "train", t_states + t_rc_train),
        TimingRow("exp1", bid, "RC", "predict", t_states + t_rc_pred),
    ]
    weights = [(bid, m, repr(float(v))) for m, v in zip(model.bma.member_ids, model.bma.w)]
    return records, timing, accesses, weights, dropped


def _provenance(cfg: StudyConfig, experiment: str, **extra) -> dict:
    out = {
        "tool": "hyperflow",
        "version": __version__,
        "experiment": experiment,
        "master_seed": cfg.master_seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "clip_nonnegative": cfg.clip,
    }
    out.update(extra)
    return out


def exp1_gauged(cfg: StudyConfig, study: Study | None = None) -> ExperimentReport:
    """Per-basin training and evaluation with every basin gauged."""
    study = study or Study.load(cfg)
    ungauged = [b for b in study.ids if not study.is_gauged(b)]
    if ungauged:
        raise DataError(f"exp1 needs every basin gauged; no discharge for {ungauged[:5]}")
    results = run_tasks(_exp1_basin, study.ids, (study, cfg), cfg.workers)
    records, timing, weights, dropped = [], [], [], {}
    for bid, (rec, tim, acc, w, drop) in zip(study.ids, results):
        records += rec
        timing += tim
        study.access_log += acc
        weights += w
        if drop:
            dropped[bid] = list(drop)
    prov = _provenance(cfg, "exp1", basins=list(study.ids), dropped_members=dropped)
    return ExperimentReport("exp1", records, timing, prov,
                            {"bma_weights": (("basin_id", "member_id", "weight"), weights)})


# ---------------------------------------------------------------------------
# ungauged experiments


@dataclass(frozen=True)
class BasinPrep:
    basin_id: str
    member_ids: tuple[str, ...]
    model: TrainedBasinModel | None
    design: np.ndarray | None  # prediction window: [member outputs | transformed states]
    timing: tuple[TimingRow, ...]
    accesses: tuple
    dropped: tuple[str, ...]


def _prepare(ctx, item) -> BasinPrep:
    study, cfg, experiment = ctx
    bid, train, test = item
    accesses: list = []
    t0 = perf_counter()
    e, dropped = study.ensemble(bid)
    t_ens = perf_counter() - t0
    f = study.forcing(bid)
    _check_windows(bid, f, cfg)
    res = _reservoir(cfg.ungauged)
    t0 = perf_counter()
    _, stats = standardize_forcing(f)
    states = full_states(res, f, stats)
    t_states = perf_counter() - t0
    timing = [TimingRow(experiment, bid, "ENSEMBLE", "one-time", t_ens)]
    model = design = None
    if train:
        basin = study.gauged_record(bid, f"{experiment}:prepare", accesses)
        t0 = perf_counter()
        model = train_hyper_bc(basin, e, res, cfg.train_window, cfg.exclude_spinup, cfg.bma_temperature,
                               states=states)
        timing.append(TimingRow(experiment, bid, "HYPER-BC", "train", t_states + perf_counter() - t0))
    if test:
        sl = f.index.slice_for(cfg.predict_window)
        design = np.hstack([e.preds[sl], nonlinear_readout(states[sl])])
        timing.append(TimingRow(experiment, bid, "HYPER-Bc*", "predict", t_states))
    return BasinPrep(bid, e.member_ids, model, design, tuple(timing), tuple(accesses), dropped)


@dataclass(frozen=True)
class TransferTask:
    label: str
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    n_gauged: int | None = None
    iteration: int | None = None
    region: str | None = None
    prefix: str = ""


def _transfer(ctx, task: TransferTask):
    preps, observed, study, cfg, experiment = ctx
    models = [preps[b].model for b in task.train_ids]
    W = WeightMatrix.from_models(models)
    for b in task.test_ids:
        if preps[b].member_ids != W.member_ids:
            raise SchemaMismatchError(f"{b}: ensemble roster differs from the gauged basins'")
    routes = []
    prox, donors = proximity_transfer(W, [study.centroid(b) for b in task.train_ids], task.test_ids,
                                      [study.centroid(b) for b in task.test_ids])
    routes.append((PROX, prox))
    lasso_rows = []
    if len(task.train_ids) >= 3:
        reg, model = regress_transfer(W, study.attributes, task.test_ids, cfg.n_components,
                                      cfg.lasso_lambda, cfg.lasso_convention)
        routes.append((REG, reg))
        lasso_rows = [(task.label, pc, name, repr(c)) for pc, name, c in report_lasso_coefficients(model)]
    else:
        log.warning("%s: %d gauged basins, too few for regression transfer; proximity only",
                    task.label, len(task.train_ids))
    records = []
    for bid in task.test_ids:
        for method, wm in routes:
            q = preps[bid].design @ wm.row(bid)
            if cfg.clip:
                q = np.maximum(q, 0.0)
            records += _metric_records(experiment, task.prefix + method, bid, "predict", observed[bid], q,
                                       task.n_gauged, task.iteration, task.region)
    donor_rows = [(task.label, b, donors[b]) for b in task.test_ids]
    return records, lasso_rows, donor_rows


def _run_ungauged(experiment: str, cfg: StudyConfig, study: Study, tasks: Sequence[TransferTask],
                  **prov_extra) -> ExperimentReport:
    if study.attributes is None:
        raise ConfigError(f"{experiment} needs an attribute table (set 'attributes' in the config)")
    train_set = {b for t in tasks for b in t.train_ids}
    test_set = {b for t in tasks for b in t.test_ids}
    for b in sorted(train_set | test_set):
        if not study.is_gauged(b):
            raise DataError(f"{experiment}: basin {b} has no discharge to train or evaluate with")
    items = [(b, b in train_set, b in test_set) for b in study.ids if b in train_set | test_set]
    preps = run_tasks(_prepare, items, (study, cfg, experiment), cfg.workers)
    timing, dropped = [], {}
    for p in preps:
        timing += p.timing
        study.access_log += p.accesses
        if p.dropped:
            dropped[p.basin_id] = list(p.dropped)
    by_id = {p.basin_id: p for p in preps}
    observed = {b: study.discharge(b, "eval", experiment).window(cfg.predict_window).q
                for b in study.ids if b in test_set}
    for t in tasks:
        study.access_log += [(t.label, b, "train") for b in t.train_ids]
    results = run_tasks(_transfer, tasks, (by_id, observed, study, cfg, experiment), cfg.workers)
    records, lasso, donors = [], [], []
    for rec, las, don in results:
        records += rec
        lasso += las
        donors += don
    prov = _provenance(cfg, experiment, dropped_members=dropped, **prov_extra)
    extras = {
        "lasso": (("task", "pc", "attribute", "coefficient"), lasso),
        "donors": (("task", "basin_id", "donor"), donors),
    }
    return ExperimentReport(experiment, records, timing, prov, extras)


def kfold_partition(ids: Sequence[str], k: int, master_seed: int) -> list[tuple[str, ...]]:
    """Seeded permutation of ``ids`` cut into ``k`` near-equal groups."""
    if len(ids) < k:
        raise InsufficientBasinsError(f"{k} folds need at least {k} basins, got {len(ids)}")
    perm = philox(master_seed, STREAM_FOLDS).permutation(len(ids))
    return [tuple(sorted(ids[i] for i in chunk)) for chunk in np.array_split(perm, k)]


def exp2_kfold(cfg: StudyConfig, study: Study | None = None) -> ExperimentReport:
    study = study or Study.load(cfg)
    folds = kfold_partition(study.ids, cfg.k_folds, cfg.master_seed)
    tasks = []
    for i, test in enumerate(folds):
        train = tuple(b for b in study.ids if b not in test)
        tasks.append(TransferTask(f"exp2:fold{i}", train, test, len(train), i))
    return _run_ungauged("exp2", cfg, study, tasks, folds=[list(f) for f in folds])


def select_test_set(study: Study, n_test: int) -> tuple[str, ...]:
    """Every ``s // n_test``-th basin after sorting by x (ties by id), ``n_test`` in all."""
    s = len(study.ids)
    if s < n_test:
        raise InsufficientBasinsError(f"test set of {n_test} needs at least that many basins, got {s}")
    ordered = sorted(study.ids, key=lambda b: (study.centroid(b)[0], b))
    step = s // n_test
    return tuple(ordered[i * step] for i in range(n_test))


def exp3_scarce(cfg: StudyConfig, study: Study | None = None) -> ExperimentReport:
    study = study or Study.load(cfg)
    need = max(cfg.n_list) + cfg.n_test
    if len(study.ids) < need:
        raise InsufficientBasinsError(
            f"exp3 needs max(n_list) + n_test = {need} basins, study has {len(study.ids)}")
    test = select_test_set(study, cfg.n_test)
    pool = tuple(b for b in study.ids if b not in test)
    tasks = []
    for n in cfg.n_list:
        for it in range(cfg.iterations):
            rng = philox(cfg.master_seed, STREAM_SCARCE, n, it)
            train = tuple(sorted(pool[i] for i in rng.choice(len(pool), size=n, replace=False)))
            tasks.append(TransferTask(f"exp3:n{n}:it{it}", train, test, n, it))
    return _run_ungauged("exp3", cfg, study, tasks, test_basins=list(test))


def exp4_remote(cfg: StudyConfig, study: Study | None = None) -> ExperimentReport:
    """Each region alone as the gauged set, plus a size-matched random baseline."""
    study = study or Study.load(cfg)
    test = select_test_set(study, cfg.n_test)
    pool = tuple(b for b in study.ids if b not in test)
    unlabeled = [b for b in pool if study.region(b) is None]
    if unlabeled:
        raise EmptyRegionError(f"exp4 needs region labels; missing for {unlabeled[:5]}")
    regions = sorted({study.region(b) for b in pool})
    if not regions:
        raise EmptyRegionError("no region has any basin outside the test set")
    tasks = []
    for r_index, region in enumerate(regions):
        members = tuple(b for b in pool if study.region(b) == region)
        tasks.append(TransferTask(f"exp4:{region}", members, test, len(members), None, region))
        for it in range(cfg.iterations):
            rng = philox(cfg.master_seed, STREAM_REMOTE, r_index, it)
            train = tuple(sorted(pool[i] for i in rng.choice(len(pool), size=len(members), replace=False)))
            tasks.append(TransferTask(f"exp4:{region}:random{it}", train, test, len(members), it, region, RANDOM))
    return _run_ungauged("exp4", cfg, study, tasks, test_basins=list(test), regions=regions)


EXPERIMENTS = {"exp1": exp1_gauged, "exp2": exp2_kfold, "exp3": exp3_scarce, "exp4": exp4_remote}


# ---------------------------------------------------------------------------
# aggregation


def _group_key(r: Record):
    return (r.experiment, r.method, r.window, r.metric, r.n_gauged, r.region)


def _sort_key(key):
    return tuple(("", -1) if v is None else ((v, 0) if isinstance(v, str) else ("", v)) for v in key)


def _groups(records: Sequence[Record]) -> dict:
    groups: dict = {}
    for r in records:
        groups.setdefault(_group_key(r), []).append(r)
    return {k: groups[k] for k in sorted(groups, key=_sort_key)}


def _basin_means(rows: Sequence[Record]) -> tuple[list[float], int]:
    per_basin: dict[str, list[float]] = {}
    undefined = 0
    for r in rows:
        if r.value is None:
            undefined += 1
        else:
            per_basin.setdefault(r.basin_id, []).append(r.value)
    return [float(np.mean(per_basin[b])) for b in sorted(per_basin)], undefined


def summarize(records: Sequence[Record]) -> list[tuple]:
    """Per group: distribution of per-basin values (means over iterations).

    The band columns hold the 10th/50th/90th percentiles of per-iteration
    medians and are filled only when a group spans several iterations.
    """
    out = []
    for key, rows in _groups(records).items():
        values, undefined = _basin_means(rows)
        stats = [None] * 4
        if values:
            v = np.array(values)
            stats = [float(np.median(v)), float(v.mean()), float(np.percentile(v, 10)), float(np.percentile(v, 90))]
        band = [None] * 3
        iterations = {r.iteration for r in rows}
        if len(iterations) > 1 and None not in iterations:
            medians = []
            for it in sorted(iterations):
                vals = [r.value for r in rows if r.iteration == it and r.value is not None]
                if vals:
                    medians.append(float(np.median(vals)))
            if medians:
                band = [float(np.percentile(medians, q)) for q in (10, 50, 90)]
        out.append((*key, len(values), undefined, *stats, *band))
    return out


def cdf_rows(records: Sequence[Record]) -> list[tuple]:
    """Empirical CDF of per-basin values for every group."""
    out = []
    for key, rows in _groups(records).items():
        values, _ = _basin_means(rows)
        values.sort()
        m = len(values)
        out += [(*key, x, (i + 1) / m) for i, x in enumerate(values)]
    return out


def timing_report(rows: Sequence[TimingRow]) -> list[tuple]:
    """Per method: median train and predict seconds; the ensemble's one-time
    cost is counted once per basin however many methods reuse it."""
    if not rows:
        return []
    one_time: dict[str, float] = {}
    stages: dict[str, dict[str, list[float]]] = {}
    for r in rows:
        if r.stage == "one-time":
            one_time.setdefault(r.basin_id, r.seconds)
        else:
            stages.setdefault(r.method, {}).setdefault(r.stage, []).append(r.seconds)
    out = []
    if one_time:
        v = list(one_time.values())
        out.append(("ENSEMBLE", "none", len(v), None, None, float(np.median(v)), float(np.sum(v))))
    for method in sorted(stages):
        s = stages[method]
        med = [float(np.median(s[k])) if k in s else None for k in ("train", "predict")]
        n = max(len(s.get("train", ())), len(s.get("predict", ())))
        out.append((method, "none", n, *med, None, None))
    return out


# ---------------------------------------------------------------------------
# files


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def write_records(path, records: Sequence[Record]):
    rows = [(*r[:5], UNDEFINED if r.value is None else r.value, *r[6:]) for r in records]
    _write_csv(Path(path), RECORD_HEADER, rows)


def read_records(path) -> list[Record]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != RECORD_HEADER:
        raise SchemaMismatchError(f"{path}: not a records file (header {','.join(RECORD_HEADER)})")
    out = []
    for i, r in enumerate(rows[1:], start=1):
        if len(r) != len(RECORD_HEADER):
            raise SchemaMismatchError(f"{path}: row {i} has {len(r)} fields")
        try:
            value = None if r[5] == UNDEFINED else float(r[5])
            n = int(r[6]) if r[6] else None
            it = int(r[7]) if r[7] else None
        except ValueError:
            raise DataError(f"{path}: row {i}: malformed number") from None
        out.append(Record(r[0], r[1], r[2], r[3], r[4], value, n, it, r[8] or None))
    return out


def read_timing(path) -> list[TimingRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TIMING_HEADER:
        raise SchemaMismatchError(f"{path}: not a timing file")
    return [TimingRow(r[0], r[1], r[2], r[3], float(r[4])) for r in rows[1:]]


def write_summaries(out: Path, records: Sequence[Record], timing: Sequence[TimingRow] | None):
    _write_csv(out / "summary.csv", SUMMARY_HEADER, summarize(records))
    _write_csv(out / "cdf.csv", CDF_HEADER, cdf_rows(records))
    if timing is not None:
        _write_csv(out / "timing.csv", TIMING_HEADER, timing)
        _write_csv(out / "timing_report.csv", TIMING_REPORT_HEADER, timing_report(timing))


def write_report(report: ExperimentReport, out_dir) -> Path:
    """Write records, summary, CDF, extras and provenance; timing files are
    the only outputs that differ between identical runs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "records.csv", report.records)
    write_summaries(out, report.records, report.timing)
    for name, (header, rows) in report.extras.items():
        _write_csv(out / f"{name}.csv", header, rows)
    (out / "provenance.json").write_text(json.dumps(report.provenance, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return out


NONDETERMINISTIC_FILES = ("timing.csv", "timing_report.csv")
