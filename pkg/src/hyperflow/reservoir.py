"""Echo-state reservoir with a ridge-trained scalar readout.

State recursion, with row 0 of every state matrix equal to the initial state::

    r[t] = tanh(A @ r[t-1] + W_in @ i[t-1])

so the readout at day ``t`` only sees inputs up to ``t - 1``. Random
structures are drawn from a Philox counter-based generator keyed by
``(seed, attempt)``; a realization is fully determined by its ``ReservoirSpec`` and is
persisted as that spec alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DataError, DegenerateReservoirError, SingularSystemError

N_INPUTS = 3
MAX_ATTEMPTS = 32
MIN_RADIUS = 1e-12


@dataclass(frozen=True)
class ReservoirSpec:
    size: int
    density: float
    spectral_radius: float
    input_scale: float
    ridge: float
    seed: int
    washout: int = 365
    n_inputs: int = N_INPUTS

    def __post_init__(self):
        if self.size < 2:
            raise DataError("reservoir size must be >= 2")
        if not 0 < self.density <= 1:
            raise DataError("adjacency density must be in (0, 1]")
        if not 0 < self.spectral_radius <= 1.5:
            raise DataError("spectral radius must be in (0, 1.5]")
        if not self.input_scale > 0:
            raise DataError("input scale must be > 0")
        if self.ridge < 0:
            raise DataError("ridge parameter must be >= 0")
        if self.washout < 0:
            raise DataError("washout must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise DataError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ReservoirSpec":
        return cls(
            size=int(d["size"]), density=float(d["density"]),
            spectral_radius=float(d["spectral_radius"]), input_scale=float(d["input_scale"]),
            ridge=float(d["ridge"]), seed=int(d["seed"]), washout=int(d.get("washout", 365)),
            n_inputs=int(d.get("n_inputs", N_INPUTS)),
        )


@dataclass(frozen=True, eq=False)
class ReservoirRealization:
    spec: ReservoirSpec
    W_in: np.ndarray
    A: sp.csr_matrix
    attempt: int = 0


@dataclass(frozen=True)
class ReadoutWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float).ravel()
        if not np.all(np.isfinite(w)):
            raise DataError("readout weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


def philox(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def spectral_radius(A) -> float:
    """Largest eigenvalue modulus of a square sparse matrix.

    Permuting to strongly connected components makes ``A`` block triangular,
    so its spectrum is the union of the diagonal blocks' spectra. The blocks
    of a very sparse random graph are tiny and are solved densely.
    """
    A = sp.csr_matrix(A)
    n_comp, labels = connected_components(A, directed=True, connection="strong")
    counts = np.bincount(labels, minlength=n_comp)
    diag = A.diagonal()
    radius = 0.0
    for c in range(n_comp):
        nodes = np.flatnonzero(labels == c)
        if counts[c] == 1:
            radius = max(radius, abs(diag[nodes[0]]))
        else:
            block = A[nodes][:, nodes].toarray()
            radius = max(radius, float(np.abs(np.linalg.eigvals(block)).max()))
    return radius


def sample_adjacency(size: int, density: float, rng: np.random.Generator) -> sp.csr_matrix:
    """Each entry nonzero with probability ``density``, values uniform on [-1, 1]."""
    mask = rng.random((size, size)) < density
    values = rng.uniform(-1.0, 1.0, size=(size, size))
    return sp.csr_matrix(np.where(mask, values, 0.0))


def build_reservoir(spec: ReservoirSpec) -> ReservoirRealization:
    """Draw W_in and A, rescaling A to the requested spectral radius.

    A nilpotent draw (radius below 1e-12, common at very low density) is
    redrawn under the next attempt key, at most 32 times.
    """
    for attempt in range(MAX_ATTEMPTS):
        rng = philox(spec.seed, attempt)
        W_in = rng.uniform(-spec.input_scale, spec.input_scale, size=(spec.size, spec.n_inputs))
        A = sample_adjacency(spec.size, spec.density, rng)
        rho = spectral_radius(A)
        if rho >= MIN_RADIUS:
            A = (A * (spec.spectral_radius / rho)).tocsr()
            W_in.setflags(write=False)
            return ReservoirRealization(spec, W_in, A, attempt)
    raise DegenerateReservoirError(
        f"no adjacency with nonzero spectral radius after {MAX_ATTEMPTS} draws "
        f"(size={spec.size}, density={spec.density}, seed={spec.seed})"
    )


def run_states(r: ReservoirRealization, inputs, r0=None) -> np.ndarray:
    """T x D state matrix; row 0 is ``r0`` (zeros by default)."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != r.W_in.shape[1]:
        raise DataError(f"inputs must be T x {r.W_in.shape[1]}, got {inputs.shape}")
    if not np.all(np.isfinite(inputs)):
        raise DataError("reservoir inputs must be finite")
    T, D = inputs.shape[0], r.W_in.shape[0]
    drive = inputs @ r.W_in.T
    states = np.empty((T, D))
    state = np.zeros(D) if r0 is None else np.asarray(r0, dtype=float).copy()
    A = r.A
    for t in range(T):
        states[t] = state
        state = np.tanh(A @ state + drive[t])
    return states


def nonlinear_readout(states) -> np.ndarray:
    """Paired-product feature map along the last axis (0-indexed).

    Even positions pass through; odd ``j >= 3`` become ``r[j-1] * r[j-2]``;
    position 1 has no complete pair below it and passes through.
    """
    s = np.asarray(states, dtype=float)
    out = s.copy()
    odd = np.arange(3, s.shape[-1], 2)
    out[..., odd] = s[..., odd - 1] * s[..., odd - 2]
    return out


def solve_ridge(X: np.ndarray, y: np.ndarray, beta: float) -> np.ndarray:
    """Minimiser of ``|y - X w|^2 + beta |w|^2`` from the normal equations."""
    G = X.T @ X
    rhs = X.T @ y
    if beta == 0:
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise SingularSystemError("unregularised readout with rank-deficient states")
        return scipy.linalg.solve(G, rhs, assume_a="pos")
    G[np.diag_indices_from(G)] += beta
    try:
        c = scipy.linalg.cho_factor(G, check_finite=False)
        return scipy.linalg.cho_solve(c, rhs, check_finite=False)
    except np.linalg.LinAlgError:
        # equivalent augmented least squares, stable when G is numerically indefinite
        aug = np.vstack([X, np.sqrt(beta) * np.eye(X.shape[1])])
        return np.linalg.lstsq(aug, np.concatenate([y, np.zeros(X.shape[1])]), rcond=None)[0]


def train_readout(states, targets, beta: float, washout: int = 0) -> ReadoutWeights:
    """Closed-form ridge readout on transformed states after dropping ``washout`` rows."""
    states = np.asarray(states, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if states.shape[0] != targets.shape[0]:
        raise DataError(f"{states.shape[0]} states for {targets.shape[0]} targets")
    if states.shape[0] - washout <= 0:
        raise DataError(f"washout {washout} leaves no training rows out of {states.shape[0]}")
    X = nonlinear_readout(states[washout:])
    return ReadoutWeights(solve_ridge(X, targets[washout:], beta))


def readout_output(states, w: ReadoutWeights) -> np.ndarray:
    return nonlinear_readout(states) @ w.w


def predict_series(r: ReservoirRealization, w: ReadoutWeights, inputs, r0=None) -> np.ndarray:
    """Input-driven prediction: states from ``inputs`` alone, mapped through the readout."""
    return readout_output(run_states(r, inputs, r0), w)
