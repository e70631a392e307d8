"""HJB integro-differential equation: Hamiltonian, explicit monotone scheme, viscosity residuals."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .dpp import ValueField
from .model import CoefficientSet, ControlGrid, LevyMeasure
from .paths import _broadcast


class CFLError(RuntimeError):
    """Explicit step too large for a monotone update."""


@dataclass(frozen=True)
class SmoothTestFunction:
    """phi(t, x[N, n]) -> [N] with optional analytic derivatives.

    Missing derivatives fall back to central differences with step ``h_fd``.
    """

    value: Callable
    grad_t: Callable | None = None
    grad_x: Callable | None = None
    hess_x: Callable | None = None
    h_fd: float = 1e-3

    def __call__(self, t, x):
        return np.asarray(self.value(t, np.asarray(x, dtype=float)), dtype=float)

    def dt(self, t, x):
        if self.grad_t is not None:
            return np.asarray(self.grad_t(t, x), dtype=float)
        h = self.h_fd
        return (self(t + h, x) - self(t - h, x)) / (2 * h)

    def dx(self, t, x):
        if self.grad_x is not None:
            return np.asarray(self.grad_x(t, x), dtype=float)
        return self.fd_grad(t, x)

    def d2x(self, t, x):
        if self.hess_x is not None:
            return np.asarray(self.hess_x(t, x), dtype=float)
        return self.fd_hess(t, x)

    def fd_grad(self, t, x):
        x = np.asarray(x, dtype=float)
        h, out = self.h_fd, np.empty_like(x)
        for i in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[i] = h
            out[:, i] = (self(t, x + e) - self(t, x - e)) / (2 * h)
        return out

    def fd_hess(self, t, x):
        x = np.asarray(x, dtype=float)
        N, n = x.shape
        h, out = self.h_fd, np.empty((N, n, n))
        mid = self(t, x)
        for i in range(n):
            ei = np.zeros(n)
            ei[i] = h
            out[:, i, i] = (self(t, x + ei) - 2 * mid + self(t, x - ei)) / h**2
            for j in range(i + 1, n):
                ej = np.zeros(n)
                ej[j] = h
                val = (self(t, x + ei + ej) - self(t, x + ei - ej) - self(t, x - ei + ej) + self(t, x - ei - ej)) / (4 * h**2)
                out[:, i, j] = out[:, j, i] = val
        return out


def _as_values(phi, t, x):
    if isinstance(phi, SmoothTestFunction):
        return phi(t, x)
    return np.asarray(phi(x), dtype=float)


def _jumps(coeffs, levy, t, x, y, u):
    """g(t, x, y, e_i, u) for every node: list of [N, n] arrays."""
    N = x.shape[0]
    return [_broadcast(coeffs.g(t, x, y, np.broadcast_to(e, (N, e.size)), u), x.shape) for e, _ in levy.quad_nodes]


def integro_A(phi, t, x, u, coeffs: CoefficientSet, levy: LevyMeasure, jumps=None) -> np.ndarray:
    """sum_i w_i (phi(t, x + g(t, x, phi(t, x), e_i, u)) - phi(t, x)).

    ``phi`` is a SmoothTestFunction or a state function (e.g. a gridded
    field interpolator at time t).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    base = _as_values(phi, t, x)
    if jumps is None:
        jumps = _jumps(coeffs, levy, t, x, base, u)
    out = np.zeros(x.shape[0])
    for (_, w), jump in zip(levy.quad_nodes, jumps):
        out += w * (_as_values(phi, t, x + jump) - base)
    return out


def integro_B(phi, t, x, u, coeffs: CoefficientSet, levy: LevyMeasure, grad=None, jumps=None) -> np.ndarray:
    """A-term minus sum_i w_i Dphi . g(e_i); ``grad`` is required for non-smooth phi."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if grad is None:
        if not isinstance(phi, SmoothTestFunction):
            raise ValueError("a gradient must be supplied for gridded fields")
        grad = phi.dx(t, x)
    base = _as_values(phi, t, x)
    if jumps is None:
        jumps = _jumps(coeffs, levy, t, x, base, u)
    a = integro_A(phi, t, x, u, coeffs, levy, jumps)
    comp = np.zeros_like(x)
    for (_, w), jump in zip(levy.quad_nodes, jumps):
        comp += w * jump
    return a - np.sum(grad * comp, axis=1)


def hamiltonian_H0(t, x, w, Dw, D2w, u, coeffs: CoefficientSet, levy: LevyMeasure, a_term, b_term) -> np.ndarray:
    """1/2 tr(sigma sigma^T D2w) + Dw . b(t,x,w,Dw sigma,A,u) + B + f(t,x,w,Dw sigma,A,u)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    N, n, d = x.shape[0], coeffs.n, coeffs.d
    w = _broadcast(w, (N,))
    Dw = _broadcast(Dw, (N, n))
    D2w = _broadcast(D2w, (N, n, n))
    sig = _broadcast(coeffs.sigma(t, x, w, u), (N, n, d))
    z = np.einsum("ni,nij->nj", Dw, sig)
    a = _broadcast(a_term, (N,))
    drift = _broadcast(coeffs.b(t, x, w, z, a, u), (N, n))
    diff = 0.5 * np.einsum("nij,nkj,nik->n", sig, sig, D2w)
    f = _broadcast(coeffs.f(t, x, w, z, a, u), (N,))
    return diff + np.sum(Dw * drift, axis=1) + _broadcast(b_term, (N,)) + f


# ------------------------------------------------------------------ scheme


@dataclass(frozen=True)
class PideGrid:
    times: np.ndarray
    axes: tuple
    cfl_rate: float
    scheme: str = "explicit-monotone"

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def dx(self) -> tuple:
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @classmethod
    def build(cls, t0, T, axes, coeffs: CoefficientSet, levy: LevyMeasure, controls: ControlGrid,
              dt: float | None = None, safety: float = 0.9, align: int = 1) -> "PideGrid":
        """Pick (or validate) an explicit step against the monotonicity bound.

        dt * (sum_i a_ii / dx_i^2 + sum_i |c_i| / dx_i + Lambda) <= 1 with
        a = sigma sigma^T and c the drift net of jump compensation, both
        bounded over the grid nodes. ``align`` forces the step count to a
        multiple of it so coarser knots (e.g. DPP times) are included.
        """
        axes = tuple(np.asarray(a, dtype=float) for a in axes)
        if len(axes) != coeffs.n or coeffs.n > 2:
            raise ValueError("grids support n = 1 or 2 and must match the state dimension")
        for a in axes:
            if a.size < 3 or np.ptp(np.diff(a)) > 1e-9 * np.diff(a).mean():
                raise ValueError("each axis needs >= 3 uniformly spaced nodes")
        rate = _rate_bound(coeffs, levy, controls, axes, t0)
        if dt is None:
            steps = int(np.ceil((T - t0) * rate / safety)) if rate > 0 else 1
            steps = max(align, int(np.ceil(steps / align)) * align)
        else:
            steps = int(round((T - t0) / dt))
            if abs(steps * dt - (T - t0)) > 1e-9:
                raise ValueError(f"dt={dt} does not divide [{t0}, {T}]")
            if dt * rate > 1.0:
                raise CFLError(f"dt={dt} violates the monotonicity bound; use dt <= {1.0 / rate:.3g}")
        times = t0 + (T - t0) * np.arange(steps + 1) / steps
        return cls(times, axes, rate)


def _nodes(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _rate_bound(coeffs, levy, controls, axes, t):
    x = _nodes(axes)
    N, n = x.shape
    dx = np.array([a[1] - a[0] for a in axes])
    phi = np.asarray(coeffs.phi(x), dtype=float)
    best = 0.0
    for y in (np.zeros(N), phi):
        for u in controls:
            sig = _broadcast(coeffs.sigma(t, x, y, u), (N, n, coeffs.d))
            a = np.einsum("nij,nij->ni", sig, sig)
            drift = _broadcast(coeffs.b(t, x, y, np.zeros((N, coeffs.d)), np.zeros(N), u), (N, n))
            comp = np.zeros_like(x)
            for (_, w), jump in zip(levy.quad_nodes, _jumps(coeffs, levy, t, x, y, u)):
                comp += w * jump
            r = np.sum(a / dx**2, axis=1) + np.sum(np.abs(drift - comp) / dx, axis=1) + levy.total_intensity
            best = max(best, float(r.max()))
    return best


def _ghosted(W, ax):
    """Pad axis ``ax`` with affine-extrapolated ghost nodes."""
    lo = 2 * np.take(W, [0], axis=ax) - np.take(W, [1], axis=ax)
    hi = 2 * np.take(W, [-1], axis=ax) - np.take(W, [-2], axis=ax)
    return np.concatenate([lo, W, hi], axis=ax)


def _differences(W, axes):
    """Forward, backward, central first differences and second differences per axis, each [S, n]."""
    n = len(axes)
    fwd, bwd, d2 = [], [], []
    for ax in range(n):
        h = axes[ax][1] - axes[ax][0]
        P = _ghosted(W, ax)
        m = W.shape[ax]
        up = np.take(P, np.arange(2, m + 2), axis=ax)
        dn = np.take(P, np.arange(0, m), axis=ax)
        fwd.append(((up - W) / h).reshape(-1))
        bwd.append(((W - dn) / h).reshape(-1))
        d2.append(((up - 2 * W + dn) / h**2).reshape(-1))
    fwd, bwd, d2 = (np.stack(v, axis=1) for v in (fwd, bwd, d2))
    return fwd, bwd, 0.5 * (fwd + bwd), d2


def _fz_drift(coeffs, t, x, y, z, k, u, sig, h=1e-6):
    """sigma . df/dz, the drift f contributes through its z-slot."""
    N, d = z.shape
    fz = np.empty((N, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        fz[:, j] = (_broadcast(coeffs.f(t, x, y, z + e, k, u), (N,)) - _broadcast(coeffs.f(t, x, y, z - e, k, u), (N,))) / (2 * h)
    return np.einsum("nij,nj->ni", sig, fz)


def discrete_hamiltonian(W, axes, t, u, coeffs: CoefficientSet, levy: LevyMeasure, y=None, dt=None):
    """Upwinded H0 at every node for one control; returns (H [S], rate [S]).

    ``y`` is the value fed to the coefficients' y-slot (lagged W by default).
    ``rate`` is the sum of off-diagonal weights per unit time; the explicit
    update is monotone where dt * rate <= 1.
    """
    x = _nodes(axes)
    N, n, d = x.shape[0], coeffs.n, coeffs.d
    dx = np.array([a[1] - a[0] for a in axes])
    w = W.reshape(-1)
    y = w if y is None else np.asarray(y).reshape(-1)
    fwd, bwd, cen, d2 = _differences(W, axes)
    sig = _broadcast(coeffs.sigma(t, x, y, u), (N, n, d))
    a = np.einsum("nij,nkj->nik", sig, sig)
    if n > 1:
        off = a - np.einsum("nii->ni", a)[..., None] * np.eye(n)
        if np.max(np.abs(off)) > 1e-12:
            raise ValueError("the grid scheme supports diagonal diffusion only")
    jumps = _jumps(coeffs, levy, t, x, y, u) if levy.n_nodes else []
    if jumps:
        rgi = RegularGridInterpolator(axes, W, method="linear", bounds_error=False, fill_value=None)
        A = np.zeros(N)
        comp = np.zeros((N, n))
        for (_, wt), jump in zip(levy.quad_nodes, jumps):
            A += wt * (rgi(x + jump) - w)
            comp += wt * jump
    else:
        A, comp = np.zeros(N), np.zeros((N, n))
    zc = np.einsum("ni,nij->nj", cen, sig)
    c = _broadcast(coeffs.b(t, x, y, zc, A, u), (N, n)) - comp + _fz_drift(coeffs, t, x, y, zc, A, u, sig)
    Du = np.where(c > 0, fwd, np.where(c < 0, bwd, cen))
    D2 = np.zeros((N, n, n))
    D2[:, np.arange(n), np.arange(n)] = d2
    B = A - np.sum(Du * comp, axis=1)
    H = hamiltonian_H0(t, x, y, Du, D2, u, coeffs, levy, A, B)
    # The y-slot carries the lagged level; H0 also reads w through y only.
    rate = np.sum(np.einsum("nii->ni", a) / dx**2, axis=1) + np.sum(np.abs(c) / dx, axis=1) + levy.total_intensity
    return H, rate


def solve_pide(
    coeffs: CoefficientSet,
    levy: LevyMeasure,
    control_grid: ControlGrid,
    pide_grid: PideGrid,
    phi: Callable | None = None,
    fixed_point_sweeps: int = 0,
) -> ValueField:
    """Explicit backward stepping W(t - dt) = W(t) + dt max_u H0 on the grid.

    Coefficients read the current level in their y-slot (lagged); each
    optional fixed-point sweep re-evaluates them at the updated level.
    """
    axes, times = pide_grid.axes, pide_grid.times
    shape = tuple(a.size for a in axes)
    phi = phi or coeffs.phi
    x = _nodes(axes)
    values = np.empty((times.size,) + shape)
    argmax = np.full((times.size,) + shape, -1, dtype=int)
    values[-1] = np.asarray(phi(x), dtype=float).reshape(shape)
    dt = pide_grid.dt
    for k in range(times.size - 1, 0, -1):
        t, W = times[k], values[k]
        y = None
        for _ in range(1 + fixed_point_sweeps):
            Hs, rates = [], []
            for u in control_grid:
                H, r = discrete_hamiltonian(W, axes, t, u, coeffs, levy, y=y)
                Hs.append(H)
                rates.append(r)
            Hs = np.array(Hs)
            best = np.argmax(Hs, axis=0)  # first maximum -> smallest control index
            rate = np.array(rates)[best, np.arange(best.size)]
            if np.any(dt * rate > 1.0 + 1e-12):
                j = int(np.argmax(rate))
                raise CFLError(
                    f"monotonicity lost at t={t:.6g}, x={x[j].tolist()}: dt*rate={dt * rate[j]:.4g} > 1; reduce dt"
                )
            new = W.reshape(-1) + dt * Hs[best, np.arange(best.size)]
            y = new
        if not np.all(np.isfinite(new)):
            j = int(np.flatnonzero(~np.isfinite(new))[0])
            raise FloatingPointError(f"non-finite value at t={times[k - 1]:.6g}, x={x[j].tolist()}")
        values[k - 1] = new.reshape(shape)
        argmax[k - 1] = best.reshape(shape)
    meta = {
        "solver": "pide", "model": coeffs.name, "dt": dt, "dx": list(pide_grid.dx), "cfl_rate": pide_grid.cfl_rate,
        "controls": list(control_grid.points), "fixed_point_sweeps": fixed_point_sweeps, "scheme": pide_grid.scheme,
    }
    return ValueField(times, axes, values, argmax, metadata=meta)


# ------------------------------------------------------- viscosity residual


@dataclass
class ResidualReport:
    residuals: np.ndarray  # per evaluated point
    points: list  # (t, x) per residual
    sub_violations: list
    super_violations: list
    skipped: int
    tol: float
    max_abs: float = field(init=False)

    def __post_init__(self):
        self.max_abs = float(np.max(np.abs(self.residuals))) if self.residuals.size else 0.0

    @property
    def passed(self) -> bool:
        return not self.sub_violations and not self.super_violations


def _residual_smooth(phi: SmoothTestFunction, t, x, coeffs, levy, controls):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w, Dw, D2w = phi(t, x), phi.dx(t, x), phi.d2x(t, x)
    best = np.full(x.shape[0], -np.inf)
    for u in controls:
        A = integro_A(phi, t, x, u, coeffs, levy) if levy.n_nodes else np.zeros(x.shape[0])
        B = integro_B(phi, t, x, u, coeffs, levy, grad=Dw) if levy.n_nodes else np.zeros(x.shape[0])
        best = np.maximum(best, hamiltonian_H0(t, x, w, Dw, D2w, u, coeffs, levy, A, B))
    return phi.dt(t, x) + best


def viscosity_residual(
    field_: ValueField,
    coeffs: CoefficientSet,
    levy: LevyMeasure,
    controls: ControlGrid,
    probes=None,
    tol: float | None = None,
    interior_box=None,
    bend: float = 1e-6,
) -> ResidualReport:
    """d/dt phi + sup_u H0(phi) at points where phi touches the field.

    With ``probes`` = [(t, x, SmoothTestFunction), ...] the given functions
    are used. Otherwise every interior node gets a paraboloid through its
    3-point spatial stencil (per axis) and the forward time difference; the
    max-touch version bends it up by ``bend`` and the min-touch version down.
    Subsolution requires residual >= -tol at max-touch points, supersolution
    residual <= tol at min-touch points. Nonlocal terms read the gridded
    field. Default tol is 10 (dx^2 + dt).
    """
    if tol is None:
        if field_ is None:
            raise ValueError("a tolerance is required when no field is given")
        dxs = [a[1] - a[0] for a in field_.axes]
        tol = 10.0 * (max(dxs) ** 2 + float(np.diff(field_.times).max()))
    res, pts, sub, sup_ = [], [], [], []
    skipped = 0
    if probes is not None:
        for t, x, phi in probes:
            r = float(_residual_smooth(phi, t, np.atleast_2d(x), coeffs, levy, controls)[0])
            if not np.isfinite(r):
                skipped += 1
                continue
            res.append(r)
            pts.append((float(t), np.atleast_1d(x).tolist()))
            if r < -tol:
                sub.append(pts[-1] + (r,))
            if r > tol:
                sup_.append(pts[-1] + (r,))
        return ResidualReport(np.array(res), pts, sub, sup_, skipped, tol)

    if field_ is None:
        raise ValueError("either a field or explicit probes are required")
    dts = np.diff(field_.times)
    n = field_.n
    shape = field_.values.shape[1:]
    nodes = field_.nodes
    inner = np.ones(shape, dtype=bool)
    for ax in range(n):
        sl = [slice(None)] * n
        sl[ax] = [0, -1]
        inner[tuple(sl)] = False
    if interior_box is not None:
        inner &= field_.interior_mask(interior_box)
    skipped += int(np.count_nonzero(~inner)) * (field_.times.size - 1)
    idx = np.flatnonzero(inner.reshape(-1))
    xi = nodes[idx]
    for ti in range(field_.times.size - 1):
        t, h_t = field_.times[ti], dts[ti]
        W = field_.values[ti]
        _, _, cen, d2 = _differences(W, field_.axes)
        wt = (field_.values[ti + 1].reshape(-1) - W.reshape(-1)) / h_t
        w = W.reshape(-1)
        good = np.isfinite(w[idx]) & np.isfinite(wt[idx]) & np.all(np.isfinite(cen[idx]), axis=1) & np.all(np.isfinite(d2[idx]), axis=1)
        skipped += int(np.count_nonzero(~good))
        sel, xs = idx[good], xi[good]
        rgi = RegularGridInterpolator(field_.axes, W, method="linear", bounds_error=False, fill_value=None)
        for sign, bucket in ((1.0, sub), (-1.0, sup_)):
            best = np.full(sel.size, -np.inf)
            D2 = np.zeros((sel.size, n, n))
            D2[:, np.arange(n), np.arange(n)] = d2[sel] + 2.0 * sign * bend
            for u in controls:
                if levy.n_nodes:
                    jumps = _jumps(coeffs, levy, t, xs, w[sel], u)
                    A = integro_A(rgi, t, xs, u, coeffs, levy, jumps)
                    B = integro_B(rgi, t, xs, u, coeffs, levy, grad=cen[sel], jumps=jumps)
                else:
                    A = B = np.zeros(sel.size)
                best = np.maximum(best, hamiltonian_H0(t, xs, w[sel], cen[sel], D2, u, coeffs, levy, A, B))
            r = wt[sel] + best
            for j in range(sel.size):
                point = (float(t), xs[j].tolist())
                if sign > 0:
                    res.append(float(r[j]))
                    pts.append(point)
                    if r[j] < -tol:
                        bucket.append(point + (float(r[j]),))
                elif r[j] > tol:
                    bucket.append(point + (float(r[j]),))
    return ResidualReport(np.array(res), pts, sub, sup_, skipped, tol)
