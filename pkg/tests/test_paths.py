import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from jumpfbsde.model import CoefficientSet, LevyMeasure, make_levy
from jumpfbsde.paths import (
    SimulationError,
    TimeGrid,
    dump_paths_csv,
    euler_forward,
    sample_noise,
)
from jumpfbsde.presets import get_preset


def _const(b=0.0, s=0.0, jump=0.0):
    return CoefficientSet(
        b=lambda t, x, y, z, k, u: np.full_like(x, b),
        sigma=lambda t, x, y, u: np.full((x.shape[0], 1, 1), s),
        g=lambda t, x, y, e, u: jump * e[:, :1] * np.ones_like(x),
        f=lambda t, x, y, z, k, u: np.zeros(x.shape[0]),
        phi=lambda x: x[:, 0],
        coupled=False,
    )


def test_time_grid():
    g = TimeGrid.from_dt(0.0, 1.0, 0.25)
    assert g.n_steps == 4 and g.dt == 0.25
    assert np.all(np.diff(g.knots) > 0)
    assert np.allclose(np.diff(g.knots), g.dt, rtol=1e-12)
    assert g.sub(1, 3).t0 == 0.25 and g.sub(1, 3).n_steps == 2
    with pytest.raises(ValueError):
        TimeGrid.from_dt(0.0, 1.0, 0.3)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 4)


def test_no_intensity_means_no_jumps():
    nb = sample_noise(TimeGrid(0, 1, 8), LevyMeasure.none(), 100, 3)
    assert all(ev == [] for ev in nb.jump_events)
    assert nb.jump_counts().sum() == 0


def test_fixed_seed_is_bitwise_reproducible():
    grid, lv = TimeGrid(0, 1, 16), make_levy(2.0, "normal", (0.0, 1.0))
    a, b = sample_noise(grid, lv, 700, 42), sample_noise(grid, lv, 700, 42)
    for name in ("brownian_increments", "jump_path", "jump_step", "jump_time", "jump_mark"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c = sample_noise(grid, lv, 700, 43)
    assert not np.array_equal(a.brownian_increments, c.brownian_increments)


def test_path_draws_independent_of_batch_size():
    grid, lv = TimeGrid(0, 1, 8), make_levy(1.5, "uniform", (-1.0, 1.0))
    small, big = sample_noise(grid, lv, 300, 9), sample_noise(grid, lv, 1000, 9)
    assert np.array_equal(small.brownian_increments, big.brownian_increments[:300])
    for ev_small, ev_big in zip(small.jump_events, big.jump_events[:300]):
        assert [t for t, _ in ev_small] == [t for t, _ in ev_big]
        assert all(np.array_equal(m1, m2) for (_, m1), (_, m2) in zip(ev_small, ev_big))


def test_mean_jump_count():
    nb = sample_noise(TimeGrid(0, 1, 4), make_levy(2.0, "point", (1.0,)), 100_000, 1)
    mean = nb.jump_counts().mean()
    assert abs(mean - 2.0) <= 4 * np.sqrt(2.0 / 100_000)


def test_jump_counts_are_poisson():
    lam = 1.3
    nb = sample_noise(TimeGrid(0, 2, 4), make_levy(lam / 2, "point", (1.0,)), 20_000, 17)
    counts = nb.jump_counts()
    top = 4
    observed = np.array([np.sum(counts == k) for k in range(top)] + [np.sum(counts >= top)])
    pmf = stats.poisson.pmf(np.arange(top), lam)
    expected = counts.size * np.append(pmf, 1 - pmf.sum())
    chi2 = stats.chisquare(observed, expected)
    assert chi2.pvalue > 1e-3


def test_brownian_increments_mean_and_variance():
    grid = TimeGrid(0, 1, 10)
    inc = sample_noise(grid, LevyMeasure.none(), 40_000, 5, d=2).brownian_increments
    se = np.sqrt(grid.dt / inc.shape[0])
    assert np.all(np.abs(inc.mean(axis=0)) <= 4 * se)
    assert np.allclose(inc.var(axis=0), grid.dt, rtol=0.05)


def test_jump_steps_contain_jump_times():
    grid = TimeGrid(0.5, 1.5, 10)
    nb = sample_noise(grid, make_levy(3.0, "normal", (0.0, 1.0)), 500, 2)
    knots = grid.knots
    assert np.all(nb.jump_time > grid.t0) and np.all(nb.jump_time <= grid.T)
    assert np.all(knots[nb.jump_step] < nb.jump_time + 1e-12)
    assert np.all(nb.jump_time <= knots[nb.jump_step + 1] + 1e-12)


def test_restriction_and_coarsening_preserve_noise():
    grid = TimeGrid(0, 1, 8)
    nb = sample_noise(grid, make_levy(2.0, "point", (1.0,)), 300, 4)
    part = nb.steps(2, 6)
    assert part.grid.n_steps == 4
    assert np.array_equal(part.brownian_increments, nb.brownian_increments[:, 2:6])
    assert part.step_counts().sum() == nb.step_counts()[:, 2:6].sum()
    coarse = nb.coarsen(4)
    assert np.allclose(coarse.brownian_increments.sum(axis=1), nb.brownian_increments.sum(axis=1))
    assert np.array_equal(coarse.jump_counts(), nb.jump_counts())


def test_euler_constant_state_without_coefficients():
    grid = TimeGrid(0, 1, 8)
    nb = sample_noise(grid, LevyMeasure.none(), 50, 0)
    X, _ = euler_forward(_const(), LevyMeasure.none(), grid, nb, np.array([0.7]))
    assert np.all(X == 0.7)


def test_euler_constant_drift_is_exact():
    grid = TimeGrid(0, 1, 64)
    nb = sample_noise(grid, LevyMeasure.none(), 10, 0)
    X, _ = euler_forward(_const(b=1.0), LevyMeasure.none(), grid, nb, np.array([0.0]))
    assert np.allclose(X[:, -1, 0], 1.0, rtol=0, atol=1e-13)


def test_euler_jumps_are_compensated():
    lv = make_levy(2.0, "point", (0.5,))
    grid = TimeGrid(0, 1, 4)
    nb = sample_noise(grid, lv, 20_000, 8)
    X, _ = euler_forward(_const(jump=1.0), lv, grid, nb, np.array([0.0]))
    # X_T = 0.5 * N_T - 0.5 * 2 * T exactly, pathwise
    assert np.allclose(X[:, -1, 0], 0.5 * nb.jump_counts() - 1.0, atol=1e-12)
    assert abs(X[:, -1, 0].mean()) <= 4 * X[:, -1, 0].std() / np.sqrt(20_000)


def test_euler_groups_share_noise():
    p = get_preset("drifted-linear")
    grid = TimeGrid(0, 1, 8)
    nb = sample_noise(grid, p.levy, 64, 1)
    X, _ = euler_forward(p.coeffs, p.levy, grid, nb, np.array([[0.0], [1.0]]), groups=2)
    assert np.allclose(X[64:] - X[:64], 1.0)


def test_euler_reports_blow_up_step():
    c = CoefficientSet(
        b=lambda t, x, y, z, k, u: np.where(t > 0.4, np.inf, 0.0) * np.ones_like(x),
        sigma=lambda t, x, y, u: np.zeros((x.shape[0], 1, 1)),
        g=lambda t, x, y, e, u: np.zeros_like(x),
        f=lambda t, x, y, z, k, u: np.zeros(x.shape[0]),
        phi=lambda x: x[:, 0],
    )
    grid = TimeGrid(0, 1, 4)
    with pytest.raises(SimulationError, match="step 2"):
        euler_forward(c, LevyMeasure.none(), grid, sample_noise(grid, LevyMeasure.none(), 4, 0), np.array([0.0]))


def test_policy_and_feedback_reach_the_drift():
    c = CoefficientSet(
        b=lambda t, x, y, z, k, u: (np.asarray(y)[:, None] + np.reshape(u, (-1, 1))) * np.ones_like(x),
        sigma=lambda t, x, y, u: np.zeros((x.shape[0], 1, 1)),
        g=lambda t, x, y, e, u: np.zeros_like(x),
        f=lambda t, x, y, z, k, u: np.zeros(x.shape[0]),
        phi=lambda x: x[:, 0],
    )
    grid = TimeGrid(0, 1, 4)
    nb = sample_noise(grid, LevyMeasure.none(), 3, 0)
    fb = lambda k, x: (np.full(x.shape[0], 2.0), np.zeros((x.shape[0], 1)), np.zeros(x.shape[0]))
    X, U = euler_forward(c, LevyMeasure.none(), grid, nb, np.array([0.0]), lambda k, x, y: 1.0, fb)
    assert np.allclose(X[:, -1, 0], 3.0) and np.all(U == 1.0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), stream=st.integers(0, 50), paths=st.integers(1, 600))
def test_sampling_deterministic_for_any_seed(seed, stream, paths):
    grid, lv = TimeGrid(0, 1, 3), make_levy(1.0, "normal", (0.0, 1.0), 4)
    a = sample_noise(grid, lv, paths, seed, stream=stream)
    b = sample_noise(grid, lv, paths, seed, stream=stream)
    assert a.brownian_increments.tobytes() == b.brownian_increments.tobytes()
    assert a.jump_time.tobytes() == b.jump_time.tobytes()
    assert a.path_count == paths


def test_dump_paths_csv(tmp_path):
    grid, lv = TimeGrid(0, 1, 4), make_levy(2.0, "point", (1.0,))
    nb = sample_noise(grid, lv, 3, 0)
    X, _ = euler_forward(_const(jump=1.0), lv, grid, nb, np.array([0.0]))
    out = tmp_path / "paths.csv"
    dump_paths_csv(out, X, nb, grid)
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["path", "step", "time", "x1", "jump_count"]
    assert len(rows) == 1 + 3 * 5
    assert sum(int(r[-1]) for r in rows[1:]) == nb.jump_counts().sum()
    assert float(rows[5][3]) == X[0, 4, 0]
