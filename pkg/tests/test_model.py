import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpfbsde.model import (
    CoefficientSet,
    ControlGrid,
    LevyMeasure,
    MonotonicityCertificate,
    check_comparison_condition,
    check_lipschitz,
    check_monotonicity,
    make_levy,
)
from jumpfbsde.presets import PRESETS, get_preset


def _coeffs(b=None, f=None, phi=None, **kw):
    zero_b = lambda t, x, y, z, k, u: np.zeros_like(x)
    return CoefficientSet(
        b=b or zero_b,
        sigma=lambda t, x, y, u: np.zeros((x.shape[0], 1, 1)),
        g=lambda t, x, y, e, u: np.zeros_like(x),
        f=f or (lambda t, x, y, z, k, u: np.zeros(x.shape[0])),
        phi=phi or (lambda x: np.zeros(x.shape[0])),
        **kw,
    )


# ------------------------------------------------------------ Lipschitz


def test_zero_drift_has_zero_ratio():
    rep = check_lipschitz(_coeffs(lip_constants={"b": 0.0}), (-1, 1), 512, seed=1)
    assert rep.ratios["b"] == 0.0 and rep.passed


def test_linear_drift_within_its_constant():
    c = _coeffs(b=lambda t, x, y, z, k, u: 2 * x, lip_constants={"b": 2.0})
    rep = check_lipschitz(c, {"default": (-1, 1), "y": (0, 1e-12), "z": (0, 1e-12), "k": (0, 1e-12)}, 1024, 3)
    assert rep.ratios["b"] <= 2.0 * (1 + 1e-9)
    assert rep.ratios["b"] > 1.99
    assert rep.passed


def test_square_drift_fails_with_ratio_near_twenty():
    c = _coeffs(b=lambda t, x, y, z, k, u: x**2, lip_constants={"b": 1.0})
    tiny = (0.0, 1e-12)
    rep = check_lipschitz(c, {"x": (-10, 10), "y": tiny, "z": tiny, "k": tiny}, 4096, seed=0)
    assert not rep.passed
    # oracle: |x^2 - x'^2| / |(x, y, z, k) - (x', y', z', k')| from the reported pair
    w = rep.worst_inputs["b"]
    a = np.array([w["first"]["x"][0], w["first"]["y"], w["first"]["z"][0], w["first"]["k"]])
    a2 = np.array([w["second"]["x"][0], w["second"]["y"], w["second"]["z"][0], w["second"]["k"]])
    direct = abs(a[0] ** 2 - a2[0] ** 2) / np.linalg.norm(a - a2)
    assert rep.ratios["b"] == pytest.approx(direct, rel=1e-12)
    assert 19.0 < rep.ratios["b"] <= 20.0


def test_non_finite_output_echoes_input():
    c = _coeffs(b=lambda t, x, y, z, k, u: np.where(x > 0.5, np.inf, x))
    with pytest.raises(ValueError, match="non-finite"):
        check_lipschitz(c, (-1, 1), 256, 0)


def test_lipschitz_rejects_bad_inputs():
    with pytest.raises(ValueError):
        check_lipschitz(_coeffs(), (-1, 1), 1, 0)
    with pytest.raises(ValueError):
        check_lipschitz(_coeffs(), (1, 1), 16, 0)


@settings(max_examples=20, deadline=None)
@given(slope=st.floats(0.1, 5.0), extra=st.floats(0.0, 3.0), seed=st.integers(0, 2**32 - 1))
def test_larger_constants_still_pass(slope, extra, seed):
    b = lambda t, x, y, z, k, u: slope * x
    tight = check_lipschitz(_coeffs(b=b), (-1, 1), 256, seed).ratios["b"]
    loose = check_lipschitz(_coeffs(b=b, lip_constants={"b": tight + extra}), (-1, 1), 256, seed)
    assert loose.passed


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_pass_their_declared_constants(name):
    p = get_preset(name)
    assert check_lipschitz(p.coeffs, (-1, 1), 2048, 4, p.levy, p.controls).passed


def test_checker_is_deterministic():
    p = get_preset("pure-jump")
    a = check_lipschitz(p.coeffs, (-1, 1), 512, 9, p.levy)
    b = check_lipschitz(p.coeffs, (-1, 1), 512, 9, p.levy)
    assert a.ratios == b.ratios


# ---------------------------------------------------------- monotonicity


def test_zero_model_has_zero_slack():
    rep = check_monotonicity(_coeffs(coupled=False), MonotonicityCertificate.zero(), LevyMeasure.none(), 512, 0)
    assert rep.passed and rep.worst_slack == 0.0


def test_driver_in_x_meets_certificate_exactly():
    # -f^ x^ = -x^2 = -beta1 x^2 and phi^ x^ = mu1 x^2: both slacks vanish
    c = _coeffs(f=lambda t, x, y, z, k, u: x[:, 0], phi=lambda x: x[:, 0])
    cert = MonotonicityCertificate(np.ones((1, 1)), beta1=1.0, beta2=0.0, mu1=1.0)
    rep = check_monotonicity(c, cert, LevyMeasure.none(), 1024, 5)
    assert rep.passed and rep.worst_slack == 0.0


def test_flipped_driver_fails():
    c = _coeffs(f=lambda t, x, y, z, k, u: -x[:, 0], phi=lambda x: x[:, 0])
    cert = MonotonicityCertificate(np.ones((1, 1)), beta1=1.0, beta2=0.0, mu1=1.0)
    rep = check_monotonicity(c, cert, LevyMeasure.none(), 1024, 5)
    assert not rep.passed and rep.worst_slack < 0


def test_coupled_linear_admits_no_certificate():
    p = get_preset("coupled-linear")
    cert = MonotonicityCertificate(np.ones((1, 1)), beta1=0.0, beta2=0.1, mu1=1.0)
    assert not check_monotonicity(p.coeffs, cert, p.levy, 1024, 2).passed
    with pytest.raises(ValueError, match="decoupled"):
        check_monotonicity(p.coeffs, MonotonicityCertificate.zero(), p.levy, 64, 2)


def test_monotonicity_dimension_mismatch():
    cert = MonotonicityCertificate(np.ones((1, 2)), 1.0, 1.0, 1.0)
    with pytest.raises(ValueError, match="columns"):
        check_monotonicity(_coeffs(), cert, LevyMeasure.none(), 16, 0)


def test_jump_note_reported():
    p = get_preset("pure-jump")
    rep = check_monotonicity(p.coeffs, p.certificate, p.levy, 256, 0)
    assert "quadrature nodes" in rep.note


def test_certificate_invariants():
    with pytest.raises(ValueError):
        MonotonicityCertificate(np.zeros((1, 1)), 1, 1, 1)
    with pytest.raises(ValueError):
        MonotonicityCertificate(np.ones((1, 1)), 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        MonotonicityCertificate(np.ones((1, 2)), 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        MonotonicityCertificate(np.ones((2, 1)), 1.0, 1.0, 1.0)


# ------------------------------------------------------------ comparison


def test_comparison_k_free_driver():
    rep = check_comparison_condition(_coeffs(comparison_K=0.0), 512, 0)
    assert rep.passed and rep.worst_slack == 0.0


def test_comparison_increasing_driver():
    c = _coeffs(f=lambda t, x, y, z, k, u: 2 * k, comparison_K=0.0)
    assert check_comparison_condition(c, 512, 0).passed


def test_comparison_decreasing_driver_fails():
    c = _coeffs(f=lambda t, x, y, z, k, u: -2 * k, comparison_K=-0.5)
    rep = check_comparison_condition(c, 512, 0)
    assert not rep.passed
    # worst margin equals -1.5 (k1 - k2) at the reported pair
    w = rep.worst_input
    assert rep.worst_slack == pytest.approx(-1.5 * (w["k1"] - w["k2"]))


# ------------------------------------------------------------- types


def test_control_grid_rejects_duplicates_and_empty():
    with pytest.raises(ValueError):
        ControlGrid((0.0, 1.0, 0.0))
    with pytest.raises(ValueError):
        ControlGrid(())
    assert list(ControlGrid((1, -1))) == [1.0, -1.0]


@pytest.mark.parametrize("law,params", [("point", (0.5,)), ("normal", (0.0, 1.0)), ("uniform", (-1.0, 2.0))])
def test_levy_weights_sum_to_intensity(law, params):
    lv = make_levy(2.0, law, params, 8)
    assert lv.weights.sum() == pytest.approx(2.0, rel=1e-12)
    assert np.all(lv.weights > 0)


def test_normal_quadrature_moments():
    lv = make_levy(3.0, "normal", (0.5, 0.25), 8)
    mean = lv.weights @ lv.nodes[:, 0] / 3.0
    second = lv.weights @ lv.nodes[:, 0] ** 2 / 3.0
    assert mean == pytest.approx(0.5, abs=1e-12)
    assert second == pytest.approx(0.25 + 0.0625, abs=1e-12)


def test_truncation_reports_discarded_mass():
    lv = make_levy(2.0, "uniform", (-1.0, 1.0), 8, eps_trunc=0.5)
    assert lv.discarded_mass > 0
    assert lv.total_intensity + lv.discarded_mass == pytest.approx(2.0)
    assert np.all(np.abs(lv.nodes) >= 0.5)


def test_levy_invariants():
    with pytest.raises(ValueError):
        LevyMeasure(1.0, np.array([[1.0]]), np.array([0.5]), lambda r, n: np.ones((n, 1)))
    with pytest.raises(ValueError):
        LevyMeasure(1.0, np.array([[1.0]]), np.array([1.0]))
    assert LevyMeasure.none().n_nodes == 0
