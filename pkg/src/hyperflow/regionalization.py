"""Transfer of trained weights from gauged to ungauged basins.

A basin's transferable weight vector is its BMA weights followed by its
reservoir readout (``N + D`` entries). Two transfer routes:

* proximity: copy the row of the nearest gauged basin (Euclidean distance on
  centroids, ties to the smallest basin id);
* regression: standardize the gauged rows, project onto the leading
  principal components, fit one lasso per component on standardized
  attributes, predict component scores for the targets, map back to weight
  space and undo the standardization. Reconstructed BMA weights are clipped
  to [0, 1] and renormalized onto the simplex.

Lasso penalty conventions:

* ``"raw"``:    ``|y - X b|^2 + lam * |b|_1``
* ``"scaled"``: ``|y - X b|^2 / (2 s) + alpha * |b|_1`` (default)

over ``s`` samples; the two coincide when ``lam = 2 * s * alpha``.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .bma import BmaWeights
from .core_data import AttributeTable, ChannelStats, DateIndex, parse_date
from .errors import (
    DataError,
    EmptyTrainSetError,
    NotConvergedError,
    RankDeficientError,
    SchemaMismatchError,
)
from .hyper import TrainedBasinModel
from .reservoir import ReadoutWeights, ReservoirSpec

log = logging.getLogger(__name__)

COLUMN_ORDER_VERSION = "bma-then-readout/1"
SIMPLEX_TOL = 1e-10


@dataclass(frozen=True)
class WeightMatrix:
    basin_ids: tuple[str, ...]
    member_ids: tuple[str, ...]
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "basin_ids", tuple(self.basin_ids))
        object.__setattr__(self, "member_ids", tuple(self.member_ids))
        w = np.array(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != len(self.basin_ids) or w.shape[1] <= self.n_bma:
            raise SchemaMismatchError(f"weight matrix shape {w.shape} inconsistent with ids")
        if not np.all(np.isfinite(w)):
            raise DataError("weight matrix has non-finite entries")
        bma = w[:, : self.n_bma]
        if np.any(bma < 0) or np.any(bma > 1) or np.any(np.abs(bma.sum(axis=1) - 1) > SIMPLEX_TOL):
            raise DataError("BMA block of every weight row must be a simplex")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n_bma(self) -> int:
        return len(self.member_ids)

    @property
    def readout_size(self) -> int:
        return self.w.shape[1] - self.n_bma

    @classmethod
    def from_models(cls, models: Sequence[TrainedBasinModel]) -> "WeightMatrix":
        if not models:
            raise EmptyTrainSetError("no trained models")
        members = models[0].bma.member_ids
        for m in models:
            if m.bma.member_ids != members:
                raise SchemaMismatchError(f"{m.basin_id}: member roster differs")
        rows = [np.concatenate([m.bma.w, m.readout.w]) for m in models]
        return cls(tuple(m.basin_id for m in models), members, np.vstack(rows))

    def row(self, basin_id: str) -> np.ndarray:
        return self.w[self.basin_ids.index(basin_id)]

    def subset(self, basin_ids: Sequence[str]) -> "WeightMatrix":
        pos = [self.basin_ids.index(b) for b in basin_ids]
        return WeightMatrix(tuple(basin_ids), self.member_ids, self.w[pos])

    def split(self, basin_id: str) -> tuple[BmaWeights, ReadoutWeights]:
        r = self.row(basin_id)
        return BmaWeights(self.member_ids, r[: self.n_bma]), ReadoutWeights(r[self.n_bma:])


def repair_simplex(w: np.ndarray) -> np.ndarray:
    """Clip rows to [0, 1] and renormalize; an all-zero row becomes uniform."""
    w = np.clip(np.atleast_2d(np.asarray(w, dtype=float)), 0.0, 1.0)
    sums = w.sum(axis=1, keepdims=True)
    zero = sums[:, 0] <= 0
    w[zero] = 1.0
    sums[zero] = w.shape[1]
    return w / sums


# ---------------------------------------------------------------------------
# standardization and PCA


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool mask of zero-variance columns, carried with std 1


def standardize_weights(w) -> tuple[np.ndarray, StandardizationStats]:
    w = np.asarray(w.w if isinstance(w, WeightMatrix) else w, dtype=float)
    if w.shape[0] < 2:
        raise EmptyTrainSetError("standardization needs at least 2 rows")
    mean = w.mean(axis=0)
    std = w.std(axis=0)
    constant = ~(std > 0)
    if constant.any():
        log.info("%d constant weight columns carried with std 1", int(constant.sum()))
    std = np.where(constant, 1.0, std)
    return (w - mean) / std, StandardizationStats(mean, std, constant)


def destandardize(z, stats: StandardizationStats) -> np.ndarray:
    return np.asarray(z) * stats.std + stats.mean


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    V: np.ndarray  # t x m, columns are unit eigenvectors, by decreasing variance
    eigenvalues: np.ndarray

    @property
    def n_components(self) -> int:
        return self.V.shape[1]

    def scores(self, Z, p: int | None = None) -> np.ndarray:
        V = self.V if p is None else self.V[:, :p]
        return (np.asarray(Z) - self.mean) @ V

    def reconstruct(self, S, p: int | None = None) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        p = S.shape[1] if p is None else p
        return S[:, :p] @ self.V[:, :p].T + self.mean


def pca_fit(Z) -> PcaModel:
    """Principal axes of the rows of ``Z`` via SVD of the centred matrix.

    Keeps ``m = min(s - 1, t)`` components; eigenvalues are those of the
    sample covariance ``Zc^T Zc / (s - 1)``. Each eigenvector is signed so its
    largest-magnitude entry is positive.
    """
    Z = np.asarray(Z, dtype=float)
    s, t = Z.shape
    if s < 2:
        raise EmptyTrainSetError(f"PCA needs at least 2 rows, got {s}")
    mean = Z.mean(axis=0)
    Zc = Z - mean
    if not np.any(Zc):
        raise RankDeficientError("all rows are identical")
    _, sv, Vt = np.linalg.svd(Zc, full_matrices=False)
    m = min(s - 1, t)
    V = Vt[:m].T.copy()
    pivot = np.argmax(np.abs(V), axis=0)
    V *= np.sign(V[pivot, np.arange(m)])
    return PcaModel(mean, V, sv[:m] ** 2 / (s - 1))


# ---------------------------------------------------------------------------
# lasso


def _threshold(lam: float, s: int, convention: str) -> float:
    if convention == "raw":
        return lam / 2.0
    if convention == "scaled":
        return lam * s
    raise DataError(f"unknown lasso convention {convention!r}")


def lasso_objective(X, y, coef, intercept, lam, convention="scaled") -> float:
    r = np.asarray(y) - np.asarray(X) @ coef - intercept
    rss = float(r @ r)
    penalty = lam * float(np.abs(coef).sum())
    return rss + penalty if convention == "raw" else rss / (2 * len(r)) + penalty


@dataclass(frozen=True)
class LassoFit:
    coef: np.ndarray
    intercept: float
    n_sweeps: int
    objective_trace: tuple[float, ...] = ()

    def predict(self, X) -> np.ndarray:
        return np.asarray(X) @ self.coef + self.intercept


def _kkt_optimal(Xc, yc, coef, thr) -> bool:
    grad = Xc.T @ (yc - Xc @ coef)
    slack = 1e-9 * max(thr, 1.0)
    active = coef != 0
    return bool(np.all(np.abs(grad[~active]) <= thr + slack)
                and np.allclose(grad[active], thr * np.sign(coef[active]), rtol=1e-9, atol=slack))


def _polish(Xc, yc, coef, thr, max_candidates: int = 2000):
    """Exact solution on (a subset of) the current support, or None.

    For the support and its subsets up to two sizes below the rank of the
    restricted design, solves the stationarity equations with the current
    signs and accepts the first candidate satisfying the full KKT
    conditions, which certify a global optimum. Near-collinear columns
    otherwise make cyclic descent crawl while mass drains between them.
    """
    support = tuple(np.flatnonzero(coef))
    if not support:
        return None
    rank = np.linalg.matrix_rank(Xc[:, list(support)])
    tried = 0
    for size in range(min(rank, len(support)), max(rank - 3, 0), -1):
        for subset in itertools.combinations(support, size):
            tried += 1
            if tried > max_candidates:
                return None
            idx = list(subset)
            XA = Xc[:, idx]
            G = XA.T @ XA
            if np.linalg.matrix_rank(G) < size:
                continue
            signs = np.sign(coef[idx])
            sol = np.linalg.solve(G, XA.T @ yc - thr * signs)
            if not np.all(np.sign(sol) == signs):
                continue
            cand = np.zeros_like(coef)
            cand[idx] = sol
            if _kkt_optimal(Xc, yc, cand, thr):
                return cand
    return None


def lasso_fit(X, y, lam: float, convention: str = "scaled", tol: float = 1e-8,
              max_sweeps: int = 100_000, trace: bool = False, polish_every: int = 10) -> LassoFit:
    """Cyclic coordinate descent with soft-thresholding.

    The intercept is unpenalized (fit on centred data). Stops when no
    coefficient moves by more than ``tol`` within a sweep. Every
    ``polish_every`` sweeps an exact active-set step is tried (see
    :func:`_polish`); 0 disables it.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    s, n = X.shape
    if lam < 0:
        raise DataError("lasso penalty must be >= 0")
    if s < 2 or y.shape != (s,):
        raise DataError("lasso needs s >= 2 samples and a matching target")
    thr = _threshold(lam, s, convention)
    x_mean, y_mean = X.mean(axis=0), y.mean()
    Xc, yc = X - x_mean, y - y_mean
    norms = np.einsum("ij,ij->j", Xc, Xc)
    coef = np.zeros(n)
    resid = yc.copy()
    history = []

    def objective():
        return lasso_objective(X, y, coef, y_mean - x_mean @ coef, lam, convention)

    if trace:
        history.append(objective())
    for sweep in range(1, max_sweeps + 1):
        max_step = 0.0
        for j in range(n):
            if norms[j] == 0:
                continue
            old = coef[j]
            rho = Xc[:, j] @ resid + norms[j] * old
            new = np.sign(rho) * max(abs(rho) - thr, 0.0) / norms[j]
            if new != old:
                resid -= Xc[:, j] * (new - old)
                coef[j] = new
                max_step = max(max_step, abs(new - old))
        if max_step >= tol and polish_every and sweep % polish_every == 0:
            cand = _polish(Xc, yc, coef, thr)
            if cand is not None:
                coef = cand
                resid = yc - Xc @ coef
        if trace:
            history.append(objective())
        if max_step < tol:
            return LassoFit(coef, float(y_mean - x_mean @ coef), sweep, tuple(history))
    raise NotConvergedError(f"lasso did not converge within {max_sweeps} sweeps")


@dataclass(frozen=True)
class RegressionModel:
    """Fitted attribute -> weight regression (for prediction and reporting)."""

    attribute_names: tuple[str, ...]
    attr_mean: np.ndarray
    attr_std: np.ndarray
    weight_stats: StandardizationStats
    pca: PcaModel
    fits: tuple[LassoFit, ...]
    lam: float
    convention: str

    @property
    def n_components(self) -> int:
        return len(self.fits)

    def standardized_attributes(self, raw) -> np.ndarray:
        return (np.asarray(raw, dtype=float) - self.attr_mean) / self.attr_std

    def predict_weights(self, raw_attrs) -> np.ndarray:
        X = self.standardized_attributes(np.atleast_2d(raw_attrs))
        p = self.n_components
        if p == 0:
            z_hat = np.zeros((X.shape[0], self.pca.V.shape[0]))
        else:
            scores = np.column_stack([f.predict(X) for f in self.fits])
            z_hat = self.pca.reconstruct(scores, p)
        return destandardize(z_hat, self.weight_stats)


def fit_regression(train: WeightMatrix, attrs: AttributeTable, n_components: int = 3,
                   lam: float = 0.1, convention: str = "scaled") -> RegressionModel:
    ids = list(train.basin_ids)
    keep = attrs.varying_columns(ids)
    if not keep:
        raise SchemaMismatchError("no attribute varies across the training basins")
    raw = attrs.rows(ids)[:, keep]
    a_mean, a_std = raw.mean(axis=0), raw.std(axis=0)
    X = (raw - a_mean) / a_std
    Z, wstats = standardize_weights(train)
    pca = pca_fit(Z)
    p = min(n_components, pca.n_components)
    if p < n_components:
        log.warning("only %d principal components available; using %d of %d requested",
                    pca.n_components, p, n_components)
    S = pca.scores(Z, p)
    fits = tuple(lasso_fit(X, S[:, j], lam, convention) for j in range(p))
    names = tuple(attrs.attribute_names[j] for j in keep)
    return RegressionModel(names, a_mean, a_std, wstats, pca, fits, lam, convention)


def regress_transfer(train: WeightMatrix, attrs: AttributeTable, test_ids: Sequence[str],
                     n_components: int = 3, lam: float = 0.1, convention: str = "scaled",
                     ) -> tuple[WeightMatrix, RegressionModel]:
    """Weights for ``test_ids`` predicted from their attributes."""
    if len(train.basin_ids) == 0:
        raise EmptyTrainSetError("no gauged basins to learn from")
    model = fit_regression(train, attrs, n_components, lam, convention)
    all_names = list(attrs.attribute_names)
    cols = [all_names.index(n) for n in model.attribute_names]
    w = model.predict_weights(attrs.rows(test_ids)[:, cols])
    w[:, : train.n_bma] = repair_simplex(w[:, : train.n_bma])
    return WeightMatrix(tuple(test_ids), train.member_ids, w), model


def nearest_donor(train_ids: Sequence[str], train_coords, point) -> str:
    """Closest training basin to ``point``; ties go to the smallest basin id."""
    if len(train_ids) == 0:
        raise EmptyTrainSetError("no donor basins")
    c = np.asarray(train_coords, dtype=float)
    d2 = np.sum((c - np.asarray(point, dtype=float)) ** 2, axis=1)
    best = d2.min()
    return min(b for b, d in zip(train_ids, d2) if d == best)


def proximity_transfer(train: WeightMatrix, train_coords, test_ids: Sequence[str], test_coords
                       ) -> tuple[WeightMatrix, dict[str, str]]:
    """Copy each target's nearest gauged row; also returns the donor map."""
    if len(train.basin_ids) == 0:
        raise EmptyTrainSetError("no gauged basins to transfer from")
    donors = {}
    rows = []
    for bid, pt in zip(test_ids, np.asarray(test_coords, dtype=float).reshape(-1, 2)):
        donor = nearest_donor(train.basin_ids, train_coords, pt)
        donors[bid] = donor
        rows.append(train.row(donor))
    return WeightMatrix(tuple(test_ids), train.member_ids, np.vstack(rows)), donors


def report_lasso_coefficients(model: RegressionModel) -> list[tuple[int, str, float]]:
    """Nonzero lasso coefficients per component, largest magnitude first.

    Rows are ``(pc, attribute, coefficient)`` with ``pc`` counted from 1.
    """
    rows = []
    for j, fit in enumerate(model.fits, start=1):
        nz = [(name, float(c)) for name, c in zip(model.attribute_names, fit.coef) if c != 0]
        nz.sort(key=lambda item: (-abs(item[1]), item[0]))
        rows.extend((j, name, c) for name, c in nz)
    return rows


def write_lasso_report(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pc", "attribute", "coefficient"])
        for pc, name, c in rows:
            w.writerow([pc, name, repr(c)])


# ---------------------------------------------------------------------------
# weight files


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def weight_header(n_bma: int, d: int) -> list[str]:
    return (["basin_id"] + [f"w_bma_{i}" for i in range(1, n_bma + 1)]
            + [f"w_rc_{i}" for i in range(1, d + 1)])


def write_weights(path, models: Sequence[TrainedBasinModel], extra: Mapping | None = None):
    """Persist trained models as a weight CSV plus a JSON sidecar.

    All models must share one reservoir spec; weights are written with full
    round-trip precision.
    """
    if not models:
        raise EmptyTrainSetError("no models to write")
    spec = models[0].reservoir
    for m in models:
        if m.reservoir != spec:
            raise SchemaMismatchError(f"{m.basin_id}: reservoir differs from {models[0].basin_id}")
    matrix = WeightMatrix.from_models(models)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(weight_header(matrix.n_bma, matrix.readout_size))
        for bid, row in zip(matrix.basin_ids, matrix.w):
            w.writerow([bid, *(repr(float(v)) for v in row)])
    meta = {
        "column_order_version": COLUMN_ORDER_VERSION,
        "member_ids": list(matrix.member_ids),
        "reservoir": spec.to_dict(),
        "basins": {
            m.basin_id: {
                "forcing_mean": [float(v) for v in m.forcing_stats.mean],
                "forcing_std": [float(v) for v in m.forcing_stats.std],
                "training_start": m.training_window.start.isoformat(),
                "training_length": m.training_window.length,
            }
            for m in models
        },
    }
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_weights(path) -> list[TrainedBasinModel]:
    path = Path(path)
    meta_path = sidecar_path(path)
    if not path.exists() or not meta_path.exists():
        raise DataError(f"{path}: weight file or its sidecar {meta_path.name} is missing")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("column_order_version") != COLUMN_ORDER_VERSION:
        raise SchemaMismatchError(f"{meta_path}: unsupported column order {meta.get('column_order_version')!r}")
    spec = ReservoirSpec.from_dict(meta["reservoir"])
    members = tuple(meta["member_ids"])
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != weight_header(len(members), spec.size):
        raise SchemaMismatchError(f"{path}: header does not match sidecar roster/reservoir size")
    models = []
    for i, r in enumerate(rows[1:], start=1):
        try:
            vals = np.array([float(v) for v in r[1:]])
        except ValueError:
            raise DataError(f"{path}: row {i}: non-numeric weight") from None
        info = meta["basins"].get(r[0])
        if info is None:
            raise SchemaMismatchError(f"{path}: basin {r[0]} missing from sidecar")
        window = DateIndex(parse_date(info["training_start"]), int(info["training_length"]))
        models.append(TrainedBasinModel(
            r[0],
            BmaWeights(members, vals[: len(members)]),
            ReadoutWeights(vals[len(members):]),
            spec,
            ChannelStats(np.array(info["forcing_mean"]), np.array(info["forcing_std"])),
            window,
        ))
    return models
