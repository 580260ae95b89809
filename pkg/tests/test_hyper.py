import dataclasses
import datetime as dt

import numpy as np
import pytest

from hyperflow.bma import bma_predict
from hyperflow.core_data import BasinRecord, DateIndex, DischargeSeries
from hyperflow.ensemble import default_members, simulate_ensemble
from hyperflow.experiments import GAUGED_RESERVOIR
from hyperflow.errors import DataError, LengthMismatchError, MemberMismatchError, WindowMismatchError
from hyperflow.hyper import (
    Prediction,
    bias_series,
    full_states,
    predict_hyper_bc,
    predict_rc_direct,
    train_hyper_bc,
    train_rc_direct,
)
from hyperflow.metrics import nse
from hyperflow.reservoir import ReadoutWeights, ReservoirSpec, build_reservoir, readout_output
from hyperflow.synthetic import SyntheticSpec, draw_attributes, generate_basin, truth_member

SMALL = ReservoirSpec(size=60, density=0.02, spectral_radius=0.4, input_scale=0.5, ridge=0.01, seed=1, washout=100)
TRAIN = DateIndex.between(dt.date(1993, 1, 1), dt.date(1996, 12, 31))
PREDICT = DateIndex.between(dt.date(1997, 1, 1), dt.date(1998, 12, 31))


@pytest.fixture(scope="module")
def case():
    spec = SyntheticSpec(n_basins=2, years=6, master_seed=4)
    basin, _ = generate_basin(spec, 0)
    e = simulate_ensemble(default_members()[::4], basin.forcing).matrix
    res = build_reservoir(SMALL)
    return basin, e, res, train_hyper_bc(basin, e, res, TRAIN)


def series(q):
    return DischargeSeries(DateIndex(dt.date(2001, 1, 1), len(q)), np.asarray(q, dtype=float))


def test_bias_examples():
    assert list(bias_series(series([3, 1]), series([1, 2])).b) == [2, -1]
    assert np.all(bias_series(series([3, 1]), series([3, 1])).b == 0)
    rng = np.random.default_rng(0)
    o, k = series(rng.gamma(2, 2, 50)), series(rng.gamma(2, 2, 50))
    assert abs(bias_series(o, k).b.mean() - (o.q.mean() - k.q.mean())) < 1e-12
    with pytest.raises(LengthMismatchError):
        bias_series(series([1, 2]), series([1, 2, 3]))


def test_decomposition_identity(case):
    basin, e, res, m = case
    p = predict_hyper_bc(m, basin.forcing, e, res)
    k = bma_predict(e, m.bma).q
    b = readout_output(full_states(res, basin.forcing, m.forcing_stats), m.readout)
    assert np.max(np.abs((p.q - k) - b)) < 1e-12


def test_zero_readout_gives_bma(case):
    basin, e, res, m = case
    m0 = dataclasses.replace(m, readout=ReadoutWeights(np.zeros(SMALL.size)))
    np.testing.assert_array_equal(predict_hyper_bc(m0, basin.forcing, e, res).q, e.preds @ m.bma.w)


def test_clip(case):
    basin, e, res, m = case
    m2 = dataclasses.replace(m, readout=ReadoutWeights(np.full(SMALL.size, -5.0)))
    raw = predict_hyper_bc(m2, basin.forcing, e, res)
    clipped = predict_hyper_bc(m2, basin.forcing, e, res, clip=True)
    assert raw.q.min() < 0 and clipped.q.min() >= 0 and clipped.clipped and not raw.clipped


def test_deterministic(case):
    basin, e, res, m = case
    m2 = train_hyper_bc(basin, e, SMALL, TRAIN)
    assert np.array_equal(m.readout.w, m2.readout.w) and np.array_equal(m.bma.w, m2.bma.w)


def test_member_permutation_equivariance(case):
    basin, e, res, m = case
    ids = list(reversed(e.member_ids))
    ep = e.reorder(ids)
    mp = train_hyper_bc(basin, ep, res, TRAIN)
    a = predict_hyper_bc(m, basin.forcing, e, res).q
    b = predict_hyper_bc(mp, basin.forcing, ep, res).q
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)
    # a model also accepts a reordered roster of the same members
    np.testing.assert_array_equal(predict_hyper_bc(m, basin.forcing, ep, res).q, a)


def test_roster_and_window_checks(case):
    basin, e, res, m = case
    other = simulate_ensemble(default_members()[1:3], basin.forcing).matrix
    with pytest.raises(MemberMismatchError):
        predict_hyper_bc(m, basin.forcing, other, res)
    with pytest.raises(WindowMismatchError):
        predict_hyper_bc(m, basin.forcing.window(TRAIN), e, res)
    with pytest.raises(WindowMismatchError):
        train_hyper_bc(basin, e, res, DateIndex.between(dt.date(1993, 1, 1), dt.date(1993, 6, 1)))
    with pytest.raises(DataError):
        train_hyper_bc(BasinRecord("U", (0.0, 0.0), basin.forcing), e, res, TRAIN)
    with pytest.raises(DataError):
        predict_hyper_bc(m, basin.forcing, e, build_reservoir(dataclasses.replace(SMALL, seed=9)))


def test_extra_forcing_needs_no_retraining(case):
    basin, e, res, m = case
    short = basin.forcing.window(DateIndex.between(dt.date(1993, 1, 1), dt.date(1997, 12, 31)))
    p_short = predict_hyper_bc(m, short, e.window(short.index), res)
    p_long = predict_hyper_bc(m, basin.forcing, e, res)
    np.testing.assert_allclose(p_long.q[: short.index.length], p_short.q, rtol=0, atol=1e-12)


def test_injected_truth_member():
    spec = SyntheticSpec(n_basins=2, years=6, master_seed=8, noise_std=0.0)
    basin, _ = generate_basin(spec, 1)
    members = default_members() + [truth_member(draw_attributes(spec, 1))]
    e = simulate_ensemble(members, basin.forcing).matrix
    m = train_hyper_bc(basin, e, SMALL, TRAIN)
    assert m.bma.w[-1] > 0.999
    assert np.linalg.norm(m.readout.w) < 1e-6
    p = predict_hyper_bc(m, basin.forcing, e).window(PREDICT)
    assert nse(basin.discharge.window(PREDICT).q, p.q) >= 0.99


def test_rc_direct_on_constant_discharge(case):
    basin, _, res, _ = case
    c = 3.0
    flat = dataclasses.replace(basin, discharge=DischargeSeries(basin.forcing.index, np.full(basin.forcing.index.length, c)))
    # the readout has no intercept, so only the level (not every day) is held to 5%
    w, stats = train_rc_direct(flat, GAUGED_RESERVOIR, TRAIN)
    p = predict_rc_direct(w, stats, basin.forcing, GAUGED_RESERVOIR)
    assert abs(p.q[GAUGED_RESERVOIR.washout:].mean() - c) <= 0.05 * c
    zero = dataclasses.replace(basin, discharge=DischargeSeries(basin.forcing.index, np.zeros(basin.forcing.index.length)))
    w0, _ = train_rc_direct(zero, res, TRAIN)
    assert np.all(w0.w == 0)


def test_rc_direct_deterministic_and_clip(case):
    basin, _, res, _ = case
    w1, s1 = train_rc_direct(basin, res, TRAIN)
    w2, _ = train_rc_direct(basin, SMALL, TRAIN)
    assert np.array_equal(w1.w, w2.w)
    p = predict_rc_direct(w1, s1, basin.forcing, res, clip=True)
    assert isinstance(p, Prediction) and p.q.min() >= 0
