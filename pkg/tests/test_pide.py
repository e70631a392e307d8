import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpfbsde.dpp import ValueField, padded_axes
from jumpfbsde.model import CoefficientSet, ControlGrid, LevyMeasure, make_levy
from jumpfbsde.pide import (
    CFLError,
    PideGrid,
    SmoothTestFunction,
    hamiltonian_H0,
    integro_A,
    integro_B,
    solve_pide,
    viscosity_residual,
)
from jumpfbsde.presets import get_preset

LAM = 1.7


def _jump_model(scale=1.0, sigma=0.0):
    return CoefficientSet(
        b=lambda t, x, y, z, k, u: np.zeros_like(x),
        sigma=lambda t, x, y, u: np.full((x.shape[0], 1, 1), sigma),
        g=lambda t, x, y, e, u: scale * np.broadcast_to(e[:, :1], x.shape),
        f=lambda t, x, y, z, k, u: np.zeros(x.shape[0]),
        phi=lambda x: x[:, 0],
    )


def _smooth(fn, d1=None, d2=None):
    return SmoothTestFunction(
        lambda t, x: fn(x[:, 0]),
        grad_x=None if d1 is None else (lambda t, x: d1(x[:, 0])[:, None]),
        hess_x=None if d2 is None else (lambda t, x: d2(x[:, 0])[:, None, None]),
    )


X = np.array([[-1.0], [0.0], [0.5], [2.0]])
POINT = make_levy(LAM, "point", (1.0,))


# ------------------------------------------------------- nonlocal terms


def test_identity_test_function():
    phi = _smooth(lambda x: x, lambda x: np.ones_like(x))
    c = _jump_model()
    assert np.allclose(integro_A(phi, 0.0, X, 0.0, c, POINT), LAM)
    assert np.allclose(integro_B(phi, 0.0, X, 0.0, c, POINT), 0.0, atol=1e-14)


def test_square_test_function():
    # (x + 1)^2 - x^2 = 2x + 1; subtracting 2x leaves the constant
    phi = _smooth(lambda x: x**2, lambda x: 2 * x)
    c = _jump_model()
    assert np.allclose(integro_A(phi, 0.0, X, 0.0, c, POINT), LAM * (2 * X[:, 0] + 1))
    assert np.allclose(integro_B(phi, 0.0, X, 0.0, c, POINT), LAM)


def test_small_jumps_approach_second_order_term():
    lv = make_levy(2.0, "normal", (0.0, 1.0), 8)
    phi = _smooth(np.sin, np.cos)
    eps = 1e-2
    B = integro_B(phi, 0.0, X, 0.0, _jump_model(eps), lv)
    second = 0.5 * (lv.weights @ lv.nodes[:, 0] ** 2) * -np.sin(X[:, 0])
    assert np.allclose(B / eps**2, second, rtol=0.1, atol=1e-3)


def test_gridded_field_needs_gradient():
    with pytest.raises(ValueError, match="gradient"):
        integro_B(lambda x: x[:, 0], 0.0, X, 0.0, _jump_model(), POINT)


@settings(max_examples=25, deadline=None)
@given(shift=st.floats(-50, 50), x=st.floats(-3, 3))
def test_nonlocal_terms_ignore_constants(shift, x):
    lv = make_levy(1.0, "uniform", (-1.0, 1.0), 4)
    c = _jump_model(0.5)
    xs = np.array([[x]])
    base = _smooth(np.cos, lambda v: -np.sin(v))
    moved = _smooth(lambda v: np.cos(v) + shift, lambda v: -np.sin(v))
    assert integro_A(moved, 0.0, xs, 0.0, c, lv) == pytest.approx(integro_A(base, 0.0, xs, 0.0, c, lv), abs=1e-9)
    assert integro_B(moved, 0.0, xs, 0.0, c, lv) == pytest.approx(integro_B(base, 0.0, xs, 0.0, c, lv), abs=1e-9)


# ------------------------------------------------------------ Hamiltonian


def test_pure_diffusion_hamiltonian():
    c = _jump_model(sigma=1.0)
    H = hamiltonian_H0(0.0, X, 0.0, 0.0, 2.0, 0.0, c, LevyMeasure.none(), 0.0, 0.0)
    assert np.allclose(H, 1.0)


def test_drift_enters_through_gradient():
    p = get_preset("drifted-linear")
    H = hamiltonian_H0(0.0, X, 0.0, 1.0, 0.0, 1.0, p.coeffs, p.levy, 0.0, 0.0)
    assert np.allclose(H, 1.2)


def test_oracle_has_zero_residual():
    # W = x + mu (T - t) for drifted-linear with u = 0
    p = get_preset("drifted-linear")
    phi = SmoothTestFunction(lambda t, x: x[:, 0] + 0.2 * (1.0 - t))
    probes = [(0.3, np.array([x]), phi) for x in (-1.0, 0.0, 1.5)]
    rep = viscosity_residual(None, p.coeffs, p.levy, p.controls, probes=probes, tol=1e-6)
    assert rep.passed and rep.max_abs <= 1e-6


def test_finite_difference_derivatives():
    h = 1e-3
    phi = SmoothTestFunction(lambda t, x: np.sin(x[:, 0]) * np.exp(-t), h_fd=h)
    x = np.linspace(-2, 2, 9)[:, None]
    assert np.allclose(phi.dx(0.5, x)[:, 0], np.cos(x[:, 0]) * np.exp(-0.5), atol=10 * h**2)
    assert np.allclose(phi.d2x(0.5, x)[:, 0, 0], -np.sin(x[:, 0]) * np.exp(-0.5), atol=10 * h**2)
    assert np.allclose(phi.dt(0.5, x), -np.sin(x[:, 0]) * np.exp(-0.5), atol=10 * h**2)


# ----------------------------------------------------------------- scheme


def _solve(p, dx=0.1, **kw):
    axes = padded_axes((-1.0, 1.0), dx, p.coeffs, p.levy, p.T - p.t0, p.controls)
    grid = PideGrid.build(p.t0, p.T, axes, p.coeffs, p.levy, p.controls, **kw)
    return solve_pide(p.coeffs, p.levy, p.controls, grid)


def _sup_error(W, p, box=(-1.0, 1.0)):
    inside = W.interior_mask(box).reshape(-1)
    exact = np.stack([p.oracle(t, W.nodes) for t in W.times])
    return float(np.abs(W.values.reshape(W.times.size, -1) - exact)[:, inside].max())


def test_zero_model_is_static():
    p = get_preset("zero")
    axes = (np.linspace(-1, 1, 11),)
    W = solve_pide(p.coeffs, p.levy, p.controls, PideGrid.build(0.0, 1.0, axes, p.coeffs, p.levy, p.controls))
    assert np.array_equal(W.values[0], W.values[-1])


@pytest.mark.parametrize("name", ["controlled-drift", "drifted-linear"])
def test_linear_oracles_are_reproduced(name):
    p = get_preset(name)
    assert _sup_error(_solve(p), p) <= 1e-10


def test_heat_equation_boundary_leak_shrinks_with_padding():
    # central differences are exact on quadratics; only the affine ghost closure,
    # which flattens curvature at the edge, feeds error into the box
    p = get_preset("heat")
    errors = []
    for half in (5.4, 7.4):
        axes = (np.round(np.arange(-half, half + 1e-9, 0.2), 10),)
        grid = PideGrid.build(p.t0, p.T, axes, p.coeffs, p.levy, p.controls)
        errors.append(_sup_error(solve_pide(p.coeffs, p.levy, p.controls, grid), p))
    assert errors[0] <= 1e-3
    assert errors[1] < 0.1 * errors[0]


def test_controlled_drift_policy():
    p = get_preset("controlled-drift")
    W = _solve(p)
    inside = W.interior_mask((-1.0, 1.0))
    assert np.all(W.argmax[:-1][:, inside] == list(p.controls).index(1.0))


def test_jump_variant_matches_oracle():
    p = get_preset("controlled-drift", jump_scale=0.1, intensity=2.0)
    assert _sup_error(_solve(p), p) <= 1e-8


def test_dt_above_bound_is_rejected():
    p = get_preset("heat")
    axes = (np.linspace(-2, 2, 41),)
    with pytest.raises(CFLError, match="dt"):
        PideGrid.build(0.0, 1.0, axes, p.coeffs, p.levy, p.controls, dt=0.1)
    ok = PideGrid.build(0.0, 1.0, axes, p.coeffs, p.levy, p.controls)
    assert ok.dt * ok.cfl_rate <= 0.9 + 1e-12


def test_alignment_includes_coarse_knots():
    p = get_preset("controlled-drift")
    grid = PideGrid.build(0.0, 1.0, (np.linspace(-2, 2, 21),), p.coeffs, p.levy, p.controls, align=8)
    assert (grid.times.size - 1) % 8 == 0
    assert np.allclose(grid.times[:: (grid.times.size - 1) // 8], np.linspace(0, 1, 9))


def test_scheme_is_monotone_in_terminal():
    p = get_preset("controlled-drift", sigma=0.3, jump_scale=0.2, intensity=1.0, terminal="neg-abs")
    axes = padded_axes((-1.0, 1.0), 0.1, p.coeffs, p.levy, 1.0, p.controls)
    grid = PideGrid.build(0.0, 1.0, axes, p.coeffs, p.levy, p.controls)
    lo = solve_pide(p.coeffs, p.levy, p.controls, grid)
    hi = solve_pide(p.coeffs, p.levy, p.controls, grid, phi=lambda x: p.coeffs.phi(x) + 0.1 * np.exp(-x[:, 0] ** 2))
    inside = lo.interior_mask((-1.0, 1.0))
    assert np.min((hi.values - lo.values)[:, inside]) >= 0.0


def test_grid_rejects_uneven_axes():
    p = get_preset("zero")
    with pytest.raises(ValueError, match="uniformly"):
        PideGrid.build(0.0, 1.0, (np.array([0.0, 0.1, 0.3]),), p.coeffs, p.levy, p.controls)


# -------------------------------------------------------------- residual


def test_exact_heat_field_has_small_residual():
    p = get_preset("heat")
    W = _solve(p, dx=0.2)
    rep = viscosity_residual(W, p.coeffs, p.levy, p.controls, interior_box=(-1.0, 1.0))
    assert rep.passed and rep.max_abs <= rep.tol


def test_corrupted_field_is_flagged():
    p = get_preset("controlled-drift")
    W = _solve(p)
    vals = W.values.copy()
    i = int(np.argmin(np.abs(W.axes[0] - 0.3)))
    vals[len(W.times) // 2, i] += 0.05
    bad = ValueField(W.times, W.axes, vals)
    rep = viscosity_residual(bad, p.coeffs, p.levy, p.controls, interior_box=(-1.0, 1.0))
    assert not rep.passed
    hit = rep.sub_violations + rep.super_violations
    assert any(abs(x[0] - 0.3) < 0.11 for _, x, _ in hit)


def test_probe_functions_classify_sign():
    p = get_preset("drifted-linear")
    # phi_t + H = -1 + 0.2 for W = x + (T - t): below the oracle's slope in time
    phi = SmoothTestFunction(lambda t, x: x[:, 0] + (1.0 - t))
    rep = viscosity_residual(None, p.coeffs, p.levy, ControlGrid((0.0,)), probes=[(0.5, np.array([0.0]), phi)], tol=0.1)
    assert rep.sub_violations and not rep.super_violations
    assert rep.residuals[0] == pytest.approx(-0.8)
