"""Certificate and property checks behind the ``verify`` subcommand."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dpp import padded_axes
from .fbsde import PicardConfig, RegressionBasis, solve_fbsde_coupled
from .model import check_comparison_condition, check_lipschitz, check_monotonicity
from .paths import TimeGrid, sample_noise
from .pide import PideGrid, hamiltonian_H0, solve_pide
from .presets import Preset


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def certificate_checks(preset: Preset, n_samples: int = 4096, seed: int = 0, box=(-1.0, 1.0)) -> list[CheckResult]:
    c, levy = preset.coeffs, preset.levy
    out = []
    rep = check_lipschitz(c, box, n_samples, seed, levy, preset.controls)
    detail = ", ".join(f"{k}={v:.4g}/{rep.declared[k]}" for k, v in rep.ratios.items())
    out.append(CheckResult("lipschitz", rep.passed, detail))
    if c.coupled:
        if preset.certificate is None:
            out.append(CheckResult("monotonicity", False, "coupled model without a monotonicity certificate"))
        else:
            m = check_monotonicity(c, preset.certificate, levy, n_samples, seed, box, preset.controls)
            out.append(CheckResult("monotonicity", m.passed, f"worst slack {m.worst_slack:.4g} ({m.note or 'ok'})"))
    else:
        out.append(CheckResult("monotonicity", True, "decoupled model; condition not required"))
    cmp = check_comparison_condition(c, n_samples, seed, box, preset.controls)
    out.append(CheckResult("comparison", cmp.passed, f"worst margin {cmp.worst_slack:.4g} with K={c.comparison_K}"))
    return out


def property_checks(preset: Preset, seed: int = 0, x0=(1.0,), box=(-2.0, 2.0)) -> list[CheckResult]:
    """Small-scale runs of the solver invariants; each takes at most a few seconds."""
    c, levy = preset.coeffs, preset.levy
    out = []
    grid = TimeGrid(preset.t0, preset.T, 16)
    a = sample_noise(grid, levy, 512, seed, c.d)
    b = sample_noise(grid, levy, 512, seed, c.d)
    same = np.array_equal(a.brownian_increments, b.brownian_increments) and np.array_equal(a.jump_time, b.jump_time)
    out.append(CheckResult("noise determinism", bool(same), "identical batches for a repeated seed"))

    x0 = np.asarray(x0, dtype=float)
    pic = PicardConfig(max_iters=30, tol=1e-6, delta_max=preset.T - preset.t0)
    try:
        b1 = solve_fbsde_coupled(c, levy, grid, x0, basis=RegressionBasis(), picard=pic, paths=2000, seed=seed)
        ok = np.all(np.isfinite(b1.Y))
        if c.coupled:
            accepted = [g["gaps"] for g in b1.metadata["gaps"] if g["accepted"]]
            mono = all(all(s[i + 1] <= s[i] * (1 + 1e-9) for i in range(1, len(s) - 1)) for s in accepted)
            out.append(CheckResult("picard contraction", bool(ok and mono), f"{len(accepted)} accepted subintervals"))
        else:
            b2 = solve_fbsde_coupled(replace(c, coupled=True), levy, grid, x0, basis=RegressionBasis(), picard=pic,
                                     paths=2000, seed=seed)
            diff = float(np.max(np.abs(b1.y0 - b2.y0)))
            out.append(CheckResult("decoupled fixed point", bool(ok and diff == 0.0), f"|dY0| = {diff:.3g}"))
    except Exception as exc:  # reported, not raised: verify summarizes failures
        out.append(CheckResult("fbsde solve", False, f"{type(exc).__name__}: {exc}"))

    if c.n <= 2:
        try:
            axes = padded_axes(box, 0.2, c, levy, preset.T - preset.t0, preset.controls)
            # lagged W can outgrow phi in the y-slot; leave CFL headroom
            pg = PideGrid.build(preset.t0, preset.T, axes, c, levy, preset.controls, safety=0.5)
            bump = lambda x: 0.1 * np.exp(-np.sum(x**2, axis=1) / 0.1)
            lo = solve_pide(c, levy, preset.controls, pg)
            hi = solve_pide(c, levy, preset.controls, pg, phi=lambda x: c.phi(x) + bump(x))
            # the affine ghost closure is not monotone, so only the reporting box is compared
            inside = hi.interior_mask(box)
            gap = float(np.min((hi.values - lo.values)[:, inside]))
            out.append(CheckResult("scheme monotonicity", gap >= 0.0, f"min ordered gap {gap:.3g} inside the box"))
        except Exception as exc:
            out.append(CheckResult("scheme monotonicity", False, f"{type(exc).__name__}: {exc}"))

    xs = np.linspace(box[0], box[1], 7)[:, None] * np.ones((1, c.n))
    shift = replace(c, f=lambda t, x, y, z, k, u: np.asarray(c.f(t, x, y, z, k, u), dtype=float) + 0.75)
    w, Dw, D2 = xs[:, 0], np.ones_like(xs), np.zeros((xs.shape[0], c.n, c.n))
    zero = np.zeros(xs.shape[0])
    base = np.array([hamiltonian_H0(0.0, xs, w, Dw, D2, u, c, levy, zero, zero) for u in preset.controls])
    moved = np.array([hamiltonian_H0(0.0, xs, w, Dw, D2, u, shift, levy, zero, zero) for u in preset.controls])
    ok = np.allclose(moved - base, 0.75, rtol=0, atol=1e-12) and np.array_equal(base.argmax(0), moved.argmax(0))
    out.append(CheckResult("hamiltonian shift invariance", bool(ok), "f + c shifts H0 by c, argmax unchanged"))
    return out
