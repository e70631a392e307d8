"""Named model instances with closed-form value functions, plus a registry for user models."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import (
    CoefficientSet,
    ControlGrid,
    LevyMeasure,
    MonotonicityCertificate,
    make_levy,
)


@dataclass(frozen=True)
class Preset:
    name: str
    coeffs: CoefficientSet
    levy: LevyMeasure
    controls: ControlGrid
    certificate: MonotonicityCertificate | None
    oracle: Callable[[float, np.ndarray], np.ndarray] | None  # W(t, x[N, n]) -> [N]
    t0: float = 0.0
    T: float = 1.0
    params: dict | None = None


def _zeros_n(x):
    return np.zeros_like(x)


def _col(x):
    return x[:, 0]


def _sigma_const(s):
    return lambda t, x, y, u: np.full((x.shape[0], 1, 1), s)


def _no_jump(t, x, y, e, u):
    return np.zeros_like(x)


def _no_driver(t, x, y, z, k, u):
    return np.zeros(x.shape[0])


def zero(**_) -> Preset:
    coeffs = CoefficientSet(
        b=lambda t, x, y, z, k, u: np.zeros_like(x),
        sigma=_sigma_const(0.0),
        g=_no_jump,
        f=_no_driver,
        phi=_col,
        lip_constants={"b": 0.0, "sigma": 0.0, "g": 0.0, "f": 0.0, "phi": 1.0},
        coupled=False,
        name="zero",
    )
    return Preset("zero", coeffs, LevyMeasure.none(), ControlGrid((0.0,)), MonotonicityCertificate.zero(),
                  lambda t, x: x[:, 0].copy())


def drifted_linear(mu=0.2, sigma=0.5, kappa=0.0, T=1.0, **_) -> Preset:
    """b = mu + kappa x + u, constant sigma; the control set is {0}."""
    mu, sigma, kappa = float(mu), float(sigma), float(kappa)

    def b(t, x, y, z, k, u):
        return mu + kappa * x + np.reshape(u, (-1, 1))

    coeffs = CoefficientSet(
        b=b, sigma=_sigma_const(sigma), g=_no_jump, f=_no_driver, phi=_col,
        lip_constants={"b": abs(kappa), "sigma": 0.0, "g": 0.0, "f": 0.0, "phi": 1.0},
        coupled=False, name="drifted-linear",
    )

    def oracle(t, x):
        tau = T - t
        if kappa == 0:
            return x[:, 0] + mu * tau
        growth = math.exp(kappa * tau)
        return x[:, 0] * growth + mu * (growth - 1) / kappa

    return Preset("drifted-linear", coeffs, LevyMeasure.none(), ControlGrid((0.0,)),
                  MonotonicityCertificate.zero(), oracle, T=T,
                  params={"mu": mu, "sigma": sigma, "kappa": kappa})


def pure_jump(intensity=2.0, mark_mean=0.5, mark_std=0.25, driver=0.5, n_nodes=8, T=1.0, **_) -> Preset:
    """Compensated compound Poisson state, driver c * k; Y = x + c Lambda E[e] (T - t)."""
    c = float(driver)
    levy = make_levy(float(intensity), "normal", (mark_mean, mark_std), int(n_nodes))
    coeffs = CoefficientSet(
        b=lambda t, x, y, z, k, u: np.zeros_like(x),
        sigma=_sigma_const(0.0),
        g=lambda t, x, y, e, u: np.broadcast_to(e[:, :1], x.shape).copy(),
        f=lambda t, x, y, z, k, u: c * np.asarray(k, dtype=float),
        phi=_col,
        lip_constants={"b": 0.0, "sigma": 0.0, "g": 0.0, "f": abs(c), "phi": 1.0},
        comparison_K=c if c > -1 else 0.0,
        coupled=False, name="pure-jump",
    )
    mass = float(levy.weights @ levy.nodes[:, 0])
    return Preset("pure-jump", coeffs, levy, ControlGrid((0.0,)), MonotonicityCertificate.zero(),
                  lambda t, x: x[:, 0] + c * mass * (T - t), T=T,
                  params={"intensity": intensity, "mark_mean": mark_mean, "mark_std": mark_std, "driver": c})


def coupled_linear(a=0.5, T=1.0, **_) -> Preset:
    """b = a y, sigma = 1: u(t, x) = x / (1 - a (T - t)) while a (T - t) < 1."""
    a = float(a)
    coeffs = CoefficientSet(
        b=lambda t, x, y, z, k, u: a * np.asarray(y, dtype=float)[:, None] * np.ones_like(x),
        sigma=_sigma_const(1.0), g=_no_jump, f=_no_driver, phi=_col,
        lip_constants={"b": abs(a), "sigma": 0.0, "g": 0.0, "f": 0.0, "phi": 1.0},
        coupled=True, name="coupled-linear",
    )

    def oracle(t, x):
        denom = 1.0 - a * (T - t)
        if denom <= 0:
            raise ValueError("closed form only valid for a (T - t) < 1")
        return x[:, 0] / denom

    return Preset("coupled-linear", coeffs, LevyMeasure.none(), ControlGrid((0.0,)), None, oracle, T=T,
                  params={"a": a})


def controlled_drift(controls=(-1.0, 0.0, 1.0), sigma=0.2, jump_scale=0.0, intensity=0.0,
                     mark_mean=0.0, mark_std=1.0, n_nodes=8, terminal="x", T=1.0, **_) -> Preset:
    """b = u with u in a finite set; optional jumps g = jump_scale * e.

    With terminal x the value is x + max(U) (T - t), jumps or not, since the
    compensated jump part is mean-zero.
    """
    sigma, scale = float(sigma), float(jump_scale)
    levy = make_levy(float(intensity), "normal", (mark_mean, mark_std), int(n_nodes)) if intensity else LevyMeasure.none()
    if terminal == "x":
        phi, lip_phi = _col, 1.0
    elif terminal == "neg-abs":
        phi, lip_phi = (lambda x: -np.abs(x[:, 0])), 1.0
    else:
        raise ValueError(f"unknown terminal {terminal!r}")
    coeffs = CoefficientSet(
        b=lambda t, x, y, z, k, u: np.broadcast_to(np.reshape(u, (-1, 1)), x.shape).astype(float),
        sigma=_sigma_const(sigma),
        g=lambda t, x, y, e, u: scale * np.broadcast_to(e[:, :1], x.shape),
        f=_no_driver, phi=phi,
        lip_constants={"b": 0.0, "sigma": 0.0, "g": 0.0, "f": 0.0, "phi": lip_phi},
        coupled=False, name="controlled-drift",
    )
    grid = ControlGrid(tuple(controls))
    umax = max(grid.points)
    oracle = (lambda t, x: x[:, 0] + umax * (T - t)) if terminal == "x" else None
    return Preset("controlled-drift", coeffs, levy, grid, MonotonicityCertificate.zero(), oracle, T=T,
                  params={"sigma": sigma, "jump_scale": scale, "intensity": intensity, "terminal": terminal})


def heat(sigma=math.sqrt(2.0), T=1.0, **_) -> Preset:
    """Pure diffusion with quadratic terminal: W = x^2 + sigma^2 (T - t)."""
    sigma = float(sigma)
    coeffs = CoefficientSet(
        b=lambda t, x, y, z, k, u: np.zeros_like(x),
        sigma=_sigma_const(sigma), g=_no_jump, f=_no_driver,
        phi=lambda x: x[:, 0] ** 2,
        lip_constants={"b": 0.0, "sigma": 0.0, "g": 0.0, "f": 0.0},
        coupled=False, name="heat",
    )
    return Preset("heat", coeffs, LevyMeasure.none(), ControlGrid((0.0,)), MonotonicityCertificate.zero(),
                  lambda t, x: x[:, 0] ** 2 + sigma**2 * (T - t), T=T, params={"sigma": sigma})


PRESETS: dict[str, Callable[..., Preset]] = {
    "zero": zero,
    "drifted-linear": drifted_linear,
    "pure-jump": pure_jump,
    "coupled-linear": coupled_linear,
    "controlled-drift": controlled_drift,
    "heat": heat,
}


def register(name: str, factory: Callable[..., Preset]) -> None:
    """Make a user-defined model available to the CLI under ``name``."""
    if name in PRESETS:
        raise ValueError(f"model id {name!r} already registered")
    PRESETS[name] = factory


def get_preset(name: str, **params) -> Preset:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model id {name!r}; known: {sorted(PRESETS)}") from None
    return factory(**params)
