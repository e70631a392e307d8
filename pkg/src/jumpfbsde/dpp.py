"""Backward stochastic semigroup and the dynamic programming recursion on a state grid."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .fbsde import PicardConfig, RegressionBasis, solve_fbsde_coupled
from .model import CoefficientSet, ControlGrid, LevyMeasure
from .paths import TimeGrid, sample_noise

# Streams for consistency probes sit above any DPP step index.
PROBE_STREAM_OFFSET = 10_000


@dataclass
class ValueField:
    """W on DPP knots x a rectangular state grid.

    ``argmax`` holds the maximizing control index (-1 where no
    maximization happened, e.g. at T); ``stderr`` is the Monte-Carlo
    standard error of the maximizing semigroup value; ``top2_gap`` is the
    margin between the best and second-best control.
    """

    times: np.ndarray
    axes: tuple[np.ndarray, ...]
    values: np.ndarray  # [T_n, *shape]
    argmax: np.ndarray | None = None
    stderr: np.ndarray | None = None
    top2_gap: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        shape = (self.times.size,) + tuple(a.size for a in self.axes)
        self.values = np.asarray(self.values, dtype=float).reshape(shape)
        for name in ("argmax", "stderr", "top2_gap"):
            arr = getattr(self, name)
            if arr is None:
                fill = -1 if name == "argmax" else 0.0
                arr = np.full(shape, fill, dtype=int if name == "argmax" else float)
            setattr(self, name, np.asarray(arr).reshape(shape))
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("field times must be strictly increasing")
        for a in self.axes:
            if a.size < 2 or np.any(np.diff(a) <= 0):
                raise ValueError("state axes need >= 2 strictly increasing nodes")

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def nodes(self) -> np.ndarray:
        """All state nodes [S, n] in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def time_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a field knot")
        return i

    def interpolator(self, ti: int):
        """Multilinear in the box, affine continuation of the edge cells outside."""
        rgi = RegularGridInterpolator(self.axes, self.values[ti], method="linear", bounds_error=False, fill_value=None)
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])

        def w(x):
            x = np.asarray(x, dtype=float).reshape(-1, self.n)
            w.outside += int(np.count_nonzero(np.any((x < lo) | (x > hi), axis=1)))
            return rgi(x)

        w.outside = 0
        return w

    def __call__(self, t: float, x) -> np.ndarray:
        return self.interpolator(self.time_index(t))(x)

    def lipschitz_estimate(self, interior: np.ndarray | None = None) -> np.ndarray:
        """Max absolute finite-difference slope along any axis, per time."""
        out = np.zeros(self.times.size)
        for ax, a in enumerate(self.axes):
            slope = np.abs(np.diff(self.values, axis=ax + 1)) / np.expand_dims(
                np.diff(a), tuple(i for i in range(self.n + 1) if i != ax + 1)
            )
            out = np.maximum(out, slope.reshape(self.times.size, -1).max(axis=1))
        return out

    def interior_mask(self, box) -> np.ndarray:
        """Nodes strictly inside ``box`` = (lo, hi), broadcast over axes."""
        lo, hi = box
        mesh = np.meshgrid(*self.axes, indexing="ij")
        mask = np.ones(mesh[0].shape, dtype=bool)
        for m in mesh:
            mask &= (m > lo - 1e-12) & (m < hi + 1e-12)
        return mask

    def to_csv(self, path, controls: ControlGrid | None = None) -> None:
        nodes = self.nodes
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time"] + [f"x{i + 1}" for i in range(self.n)] + ["W", "argmax"])
            for ti, t in enumerate(self.times):
                vals = self.values[ti].reshape(-1)
                arg = self.argmax[ti].reshape(-1)
                for s in range(nodes.shape[0]):
                    w.writerow([format(t, ".17g")] + [format(v, ".17g") for v in nodes[s]]
                               + [format(vals[s], ".17g"), int(arg[s])])
        meta = dict(self.metadata)
        if controls is not None:
            meta["controls"] = list(controls.points)
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)

    @classmethod
    def from_csv(cls, path) -> "ValueField":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        n = len(header) - 3
        if header[0] != "time" or header[-2:] != ["W", "argmax"] or n < 1:
            raise ValueError(f"{path}: not a value-field CSV (header {header})")
        times = np.unique(body[:, 0])
        axes = tuple(np.unique(body[:, 1 + i]) for i in range(n))
        shape = (times.size,) + tuple(a.size for a in axes)
        if body.shape[0] != int(np.prod(shape)):
            raise ValueError(f"{path}: rows do not form a full time x state grid")
        order = np.lexsort(tuple(body[:, c] for c in range(n, -1, -1)))
        body = body[order]
        return cls(times, axes, body[:, n + 1].reshape(shape), body[:, n + 2].astype(int).reshape(shape))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    return float(o)


def padded_axes(report_box, dx: float, coeffs: CoefficientSet, levy: LevyMeasure, horizon: float,
                controls: ControlGrid | None = None) -> tuple[np.ndarray, ...]:
    """Grid axes covering ``report_box`` plus a boundary layer of 3 (sigma_max sqrt(T) + jump span).

    The box edges are aligned to multiples of ``dx``.
    """
    lo, hi = (float(v) for v in report_box)
    n = coeffs.n
    probe = np.linspace(lo, hi, 9)[:, None] * np.ones((1, n))
    smax = 0.0
    for u in (controls.points if controls is not None else (0.0,)):
        sig = np.asarray(coeffs.sigma(0.0, probe, np.zeros(probe.shape[0]), u), dtype=float)
        smax = max(smax, float(np.max(np.linalg.norm(sig.reshape(probe.shape[0], n, -1), axis=(1, 2), ord=None))))
    span = 0.0
    if levy.n_nodes:
        for u in (controls.points if controls is not None else (0.0,)):
            for e, _ in levy.quad_nodes:
                jump = coeffs.g(0.0, probe, np.zeros(probe.shape[0]), np.broadcast_to(e, (probe.shape[0], e.size)), u)
                span = max(span, float(np.max(np.abs(jump))))
    pad = 3.0 * (smax * np.sqrt(horizon) + span)
    a = np.floor((lo - pad) / dx + 1e-9) * dx
    b = np.ceil((hi + pad) / dx - 1e-9) * dx
    m = int(round((b - a) / dx))
    axis = a + dx * np.arange(m + 1)
    return tuple(axis.copy() for _ in range(n))


def _constant(u):
    return lambda step, x, y: u


def semigroup_batch(
    coeffs: CoefficientSet,
    levy: LevyMeasure,
    t: float,
    states: np.ndarray,
    u: float,
    delta: float,
    psi,
    n_sub: int = 8,
    basis: RegressionBasis | None = None,
    picard: PicardConfig | None = None,
    paths: int = 2000,
    seed: int = 0,
    stream: int = 0,
    noise=None,
) -> tuple[np.ndarray, np.ndarray]:
    """G_{t, t+delta}[psi] at every row of ``states`` under constant control u.

    All states share one noise batch. Returns (values [S], stderr [S]).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    grid = TimeGrid(t, t + delta, n_sub)
    if noise is None:
        noise = sample_noise(grid, levy, paths, seed, coeffs.d, stream)
    bundle = solve_fbsde_coupled(
        coeffs, levy, grid, states, _constant(u), basis, picard or PicardConfig(delta_max=delta),
        terminal=psi, groups=states.shape[0], noise=noise, keep_K=False,
    )
    return bundle.y0, bundle.y0_stderr


def backward_semigroup(
    coeffs: CoefficientSet,
    levy: LevyMeasure,
    x,
    u_const: float,
    delta: float,
    psi,
    t: float = 0.0,
    n_sub: int = 8,
    basis: RegressionBasis | None = None,
    picard: PicardConfig | None = None,
    paths: int = 10_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Y_t of the FBSDE on [t, t+delta] with terminal psi(X_{t+delta}); returns (value, stderr)."""
    v, se = semigroup_batch(coeffs, levy, t, np.atleast_1d(np.asarray(x, float))[None, :], u_const, delta, psi,
                            n_sub, basis, picard, paths, seed)
    return float(v[0]), float(se[0])


def _sup_over_controls(coeffs, levy, controls, t, states, delta, psi, n_sub, basis, picard, paths, seed, stream):
    grid = TimeGrid(t, t + delta, n_sub)
    noise = sample_noise(grid, levy, paths, seed, coeffs.d, stream)  # common random numbers
    vals, ses = [], []
    for u in controls:
        v, se = semigroup_batch(coeffs, levy, t, states, u, delta, psi, n_sub, basis, picard, noise=noise)
        vals.append(v)
        ses.append(se)
    vals, ses = np.array(vals), np.array(ses)
    best = np.argmax(vals, axis=0)  # first maximum, i.e. smallest control index on ties
    cols = np.arange(vals.shape[1])
    top = vals[best, cols]
    if len(controls) > 1:
        second = np.sort(vals, axis=0)[-2]
        gap = top - second
    else:
        gap = np.full(top.shape, np.inf)
    return top, best, ses[best, cols], gap


def compute_value_function(
    coeffs: CoefficientSet,
    levy: LevyMeasure,
    control_grid: ControlGrid,
    dpp_times,
    axes,
    n_sub: int = 8,
    basis: RegressionBasis | None = None,
    picard: PicardConfig | None = None,
    paths: int = 2000,
    seed: int = 0,
    terminal=None,
) -> ValueField:
    """W(T, .) = phi; W(t_k, x) = max_u G_{t_k, t_{k+1}}[W(t_{k+1}, .)](x) backward over the knots."""
    times = np.asarray(dpp_times, dtype=float)
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    shape = (times.size,) + tuple(a.size for a in axes)
    field_ = ValueField(times, axes, np.zeros(shape))
    nodes = field_.nodes
    phi = terminal or coeffs.phi
    field_.values[-1] = np.asarray(phi(nodes), dtype=float).reshape(shape[1:])
    field_.top2_gap[-1] = np.inf
    outside = 0
    for k in range(times.size - 2, -1, -1):
        psi = field_.interpolator(k + 1)
        top, best, se, gap = _sup_over_controls(
            coeffs, levy, control_grid, times[k], nodes, times[k + 1] - times[k], psi,
            n_sub, basis, picard, paths, seed, stream=k,
        )
        if not np.all(np.isfinite(top)):
            bad = int(np.flatnonzero(~np.isfinite(top))[0])
            raise RuntimeError(f"semigroup failed at t={times[k]}, x={nodes[bad].tolist()}")
        field_.values[k] = top.reshape(shape[1:])
        field_.argmax[k] = best.reshape(shape[1:])
        field_.stderr[k] = se.reshape(shape[1:])
        field_.top2_gap[k] = gap.reshape(shape[1:])
        outside += psi.outside
    field_.metadata = {
        "solver": "dpp", "model": coeffs.name, "seed": seed, "paths": paths, "n_sub": n_sub,
        "controls": list(control_grid.points), "extrapolated_queries": outside,
        "basis": (basis or RegressionBasis()).kind,
    }
    return field_


@dataclass
class ConsistencyReport:
    defects: np.ndarray
    tolerances: np.ndarray
    probes: list
    max_defect: float
    passed: bool
    worst: dict


def interpolation_error(field_: ValueField, ti: int) -> float:
    """Bound on multilinear interpolation error: max |second difference| / 8."""
    err = 0.0
    for ax in range(field_.n):
        d2 = np.abs(np.diff(field_.values[ti], n=2, axis=ax))
        if d2.size:
            err = max(err, float(d2.max()) / 8.0)
    return err


def dpp_consistency_check(
    field_: ValueField,
    coeffs: CoefficientSet,
    levy: LevyMeasure,
    control_grid: ControlGrid,
    probe_points,
    delta_probe: float,
    seed: int = 0,
    n_sub: int = 8,
    basis: RegressionBasis | None = None,
    picard: PicardConfig | None = None,
    paths: int = 4000,
    tol_dpp: float | None = None,
) -> ConsistencyReport:
    """Recompute sup_u G_{t, t+delta_probe}[W(t+delta_probe, .)] at probes (t, x) and compare with W(t, x).

    The default tolerance per probe is 4 combined standard errors (probe
    plus the field nodes involved) plus the interpolation error bound, plus
    a 1e-10 relative round-off floor.
    """
    steps = np.diff(field_.times)
    h = float(steps[0])
    ratio = delta_probe / h
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ValueError("delta_probe must be an integer multiple of the DPP step")
    L = int(round(ratio))
    by_time: dict[int, list] = {}
    for i, (t, x) in enumerate(probe_points):
        ti = field_.time_index(t)
        if ti + L >= field_.times.size:
            raise ValueError(f"probe at t={t} runs past the field horizon")
        by_time.setdefault(ti, []).append((i, np.atleast_1d(np.asarray(x, dtype=float))))
    P = len(probe_points)
    defects, tols = np.zeros(P), np.zeros(P)
    for ti, items in sorted(by_time.items()):
        idx = [i for i, _ in items]
        xs = np.stack([x for _, x in items])
        psi = field_.interpolator(ti + L)
        top, _, se, _ = _sup_over_controls(
            coeffs, levy, control_grid, field_.times[ti], xs, delta_probe, psi,
            n_sub * L, basis, picard, paths, seed, stream=PROBE_STREAM_OFFSET + ti,
        )
        here = field_.interpolator(ti)(xs)
        se_field = np.zeros(len(idx))
        for tj in range(ti, ti + L + 1):
            rgi = RegularGridInterpolator(field_.axes, field_.stderr[tj], bounds_error=False, fill_value=None)
            se_field += rgi(xs) ** 2
        interp = interpolation_error(field_, ti) + interpolation_error(field_, ti + L)
        defects[idx] = np.abs(top - here)
        # a round-off floor keeps noise-free fields from failing on 1e-15 defects
        floor = 1e-10 * (1.0 + np.abs(here))
        tols[idx] = tol_dpp if tol_dpp is not None else 4.0 * np.sqrt(se**2 + se_field) + interp + floor
    worst = int(np.argmax(defects - tols))
    t_w, x_w = probe_points[worst]
    return ConsistencyReport(
        defects, tols, list(probe_points), float(defects.max()), bool(np.all(defects <= tols)),
        {"t": float(t_w), "x": np.atleast_1d(x_w).tolist(), "defect": float(defects[worst]), "tol": float(tols[worst])},
    )


@dataclass
class ContinuityReport:
    lags: list
    deltas: list
    max_increments: list
    slope: float
    passed: bool


def check_time_continuity(field_: ValueField, lags=(1, 2, 4), interior_box=None, threshold: float = 0.35) -> ContinuityReport:
    """Fit the log-log slope of max_x |W(t,x) - W(t+delta,x)| / (1+|x|) against delta."""
    mask = np.ones(field_.values.shape[1:], dtype=bool) if interior_box is None else field_.interior_mask(interior_box)
    norm = 1.0 + np.linalg.norm(field_.nodes, axis=1).reshape(mask.shape)
    h = float(np.diff(field_.times)[0])
    used, deltas, incs = [], [], []
    for L in lags:
        if L >= field_.times.size:
            continue
        diff = np.abs(field_.values[:-L] - field_.values[L:]) / norm
        used.append(int(L))
        deltas.append(L * h)
        incs.append(float(diff[:, mask].max()))
    if len(used) < 2:
        raise ValueError("need at least two usable lags")
    if max(incs) == 0.0:
        return ContinuityReport(used, deltas, incs, float("inf"), True)
    if min(incs) <= 0.0:
        return ContinuityReport(used, deltas, incs, float("nan"), False)
    slope = float(np.polyfit(np.log(deltas), np.log(incs), 1)[0])
    return ContinuityReport(used, deltas, incs, slope, slope >= threshold)


# ------------------------------------------------------------- tree oracle


def tree_value(x: float, t_index: int, n_steps: int, step: float, controls, sigma: float, phi, substeps: int = 4) -> float:
    """Exact DPP value for b = u, constant sigma, f = 0, no jumps, with binomial noise.

    Each DPP step applies a constant control and ``substeps`` symmetric
    +/- sigma sqrt(step/substeps) moves. Intended as a brute-force oracle on
    small 1D instances.
    """
    from math import comb, sqrt

    hop = sigma * sqrt(step / substeps)
    moves = [((2 * j - substeps) * hop, comb(substeps, j) / 2.0**substeps) for j in range(substeps + 1)]

    @lru_cache(maxsize=None)
    def v(xr: float, k: int) -> float:
        if k == n_steps:
            return float(phi(np.array([[xr]]))[0])
        best = -np.inf
        for u in controls:
            acc = 0.0
            for dz, p in moves:
                acc += p * v(round(xr + u * step + dz, 12), k + 1)
            best = max(best, acc)
        return best

    return v(round(float(x), 12), t_index)
