"""Seedable Brownian/Poisson noise and Euler simulation of the controlled jump SDE."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import CoefficientSet, LevyMeasure

# Paths are generated in fixed-size blocks, each with its own Philox counter,
# so path i's noise does not depend on the total path count.
BLOCK = 256
_BROWNIAN, _JUMPS = 0, 1


class SimulationError(RuntimeError):
    """Non-finite state or other unrecoverable failure during simulation."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError(f"need T > t0, got t0={self.t0}, T={self.T}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @classmethod
    def from_dt(cls, t0: float, T: float, dt: float) -> "TimeGrid":
        m = int(round((T - t0) / dt))
        if m < 1 or abs(m * dt - (T - t0)) > 1e-9 * max(1.0, T - t0):
            raise ValueError(f"dt={dt} does not divide [{t0}, {T}]")
        return cls(t0, T, m)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def knots(self) -> np.ndarray:
        return self.t0 + (self.T - self.t0) * np.arange(self.n_steps + 1) / self.n_steps

    def time(self, k: int) -> float:
        return self.t0 + (self.T - self.t0) * k / self.n_steps

    def sub(self, a: int, e: int) -> "TimeGrid":
        return TimeGrid(self.time(a), self.time(e), e - a)


@dataclass(frozen=True)
class NoiseBatch:
    """Brownian increments and Poisson jump events on a grid.

    Jumps are stored flat, sorted by (step, path, time); ``jump_step[j]`` is
    the Euler step whose interval (s_k, s_{k+1}] contains jump j.
    """

    grid: TimeGrid
    brownian_increments: np.ndarray  # [P, M, d]
    jump_path: np.ndarray
    jump_step: np.ndarray
    jump_time: np.ndarray
    jump_mark: np.ndarray  # [J, l]
    seed: int
    stream: int = 0

    @property
    def path_count(self) -> int:
        return self.brownian_increments.shape[0]

    @property
    def jump_events(self) -> list[list[tuple[float, np.ndarray]]]:
        events = [[] for _ in range(self.path_count)]
        order = np.lexsort((self.jump_time, self.jump_path))
        for j in order:
            events[self.jump_path[j]].append((float(self.jump_time[j]), self.jump_mark[j]))
        return events

    def jump_counts(self) -> np.ndarray:
        return np.bincount(self.jump_path, minlength=self.path_count)

    def step_counts(self) -> np.ndarray:
        """Jumps per (path, step) as an integer array [P, M]."""
        out = np.zeros((self.path_count, self.grid.n_steps), dtype=np.int64)
        np.add.at(out, (self.jump_path, self.jump_step), 1)
        return out

    def jumps_at(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = np.searchsorted(self.jump_step, [step, step + 1])
        return self.jump_path[lo:hi], self.jump_mark[lo:hi]

    def steps(self, a: int, e: int) -> "NoiseBatch":
        """Restriction to steps a..e-1, re-indexed from zero."""
        lo, hi = np.searchsorted(self.jump_step, [a, e])
        return NoiseBatch(
            self.grid.sub(a, e),
            self.brownian_increments[:, a:e],
            self.jump_path[lo:hi],
            self.jump_step[lo:hi] - a,
            self.jump_time[lo:hi],
            self.jump_mark[lo:hi],
            self.seed,
            self.stream,
        )

    def coarsen(self, factor: int) -> "NoiseBatch":
        """Same noise on a grid with ``factor`` times fewer steps."""
        m = self.grid.n_steps
        if factor < 1 or m % factor:
            raise ValueError(f"factor {factor} does not divide {m} steps")
        p, _, d = self.brownian_increments.shape
        inc = self.brownian_increments.reshape(p, m // factor, factor, d).sum(axis=2)
        step = self.jump_step // factor
        order = np.lexsort((self.jump_time, self.jump_path, step))
        return NoiseBatch(
            TimeGrid(self.grid.t0, self.grid.T, m // factor),
            inc,
            self.jump_path[order],
            step[order],
            self.jump_time[order],
            self.jump_mark[order],
            self.seed,
            self.stream,
        )


def _block_rng(seed: int, stream: int, block: int, kind: int) -> np.random.Generator:
    # Philox increments the low counter word; block/stream live in high words.
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, kind, stream, block]))


def sample_noise(
    grid: TimeGrid,
    levy: LevyMeasure,
    path_count: int,
    seed: int,
    d: int = 1,
    stream: int = 0,
) -> NoiseBatch:
    """Draw Brownian increments and compound-Poisson jumps for ``path_count`` paths.

    Deterministic in (grid, levy, path_count, seed, stream); path i's draws do
    not depend on ``path_count``. Jump times are uniform on (t0, T].
    """
    if path_count < 1:
        raise ValueError("path_count must be >= 1")
    m, dt, span = grid.n_steps, grid.dt, grid.T - grid.t0
    n_blocks = -(-path_count // BLOCK)
    incs, jp, jt, jmk = [], [], [], []
    for blk in range(n_blocks):
        rng = _block_rng(seed, stream, blk, _BROWNIAN)
        incs.append(rng.standard_normal((BLOCK, m, d)) * np.sqrt(dt))
        if levy.total_intensity > 0:
            rng = _block_rng(seed, stream, blk, _JUMPS)
            counts = rng.poisson(levy.total_intensity * span, BLOCK)
            total = int(counts.sum())
            times = grid.T - span * rng.random(total)
            marks = np.asarray(levy.mark_sampler(rng, total), dtype=float).reshape(total, -1)
            paths = np.repeat(np.arange(BLOCK) + blk * BLOCK, counts)
            keep = paths < path_count
            jp.append(paths[keep])
            jt.append(times[keep])
            jmk.append(marks[keep])
    brownian = np.concatenate(incs)[:path_count]
    l = levy.dim_marks
    if jp:
        paths, times, marks = np.concatenate(jp), np.concatenate(jt), np.concatenate(jmk)
    else:
        paths, times, marks = np.zeros(0, np.int64), np.zeros(0), np.zeros((0, l))
    step = np.clip(np.ceil((times - grid.t0) / dt - 1e-12).astype(np.int64) - 1, 0, m - 1)
    order = np.lexsort((times, paths, step))
    return NoiseBatch(grid, brownian, paths[order], step[order], times[order], marks[order], seed, stream)


def _as_states(x0, count: int, groups: int, n: int) -> np.ndarray:
    """Initial states [groups*count, n] from x0 of shape (n,), (groups, n) or (groups*count, n)."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = x0[None, :]
    if x0.shape == (groups * count, n):
        return x0.copy()
    if x0.shape == (groups, n):
        return np.repeat(x0, count, axis=0)
    if x0.shape == (1, n) and groups == 1:
        return np.repeat(x0, count, axis=0)
    raise ValueError(f"initial state shape {x0.shape} incompatible with {groups} groups of {count}")


def _broadcast(value, shape):
    return np.broadcast_to(np.asarray(value, dtype=float), shape)


def compensator(coeffs, levy, t, x, y, u) -> np.ndarray:
    """sum_i w_i g(t, x, y, e_i, u), shape [N, n]."""
    out = np.zeros_like(x)
    for e, w in levy.quad_nodes:
        marks = np.broadcast_to(e, (x.shape[0], e.size))
        out += w * _broadcast(coeffs.g(t, x, y, marks, u), x.shape)
    return out


def euler_forward(
    coeffs: CoefficientSet,
    levy: LevyMeasure,
    grid: TimeGrid,
    noise: NoiseBatch,
    x0,
    control_policy: Callable | None = None,
    y_feedback: Callable | None = None,
    groups: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Euler scheme for the forward jump SDE.

    X_{k+1} = X_k + b dt + sigma dB_k + sum_{jumps in step} g(e) - dt sum_i w_i g(e_i)

    with coefficients frozen at (t_k, X_k). The noise batch of P paths is
    reused for each of ``groups`` blocks (common random numbers across
    initial states). ``y_feedback(step, x) -> (y, z, k)`` supplies the
    backward components; ``control_policy(step, x, y) -> u``.

    Returns (X [N, M+1, n], controls [N, M]) with N = groups * P.
    """
    if noise.grid.n_steps != grid.n_steps:
        raise ValueError("noise batch and grid disagree on the number of steps")
    p, n, d = noise.path_count, coeffs.n, coeffs.d
    if noise.brownian_increments.shape[2] != d:
        raise ValueError("noise Brownian dimension does not match the model")
    N = groups * p
    X = np.empty((N, grid.n_steps + 1, n))
    X[:, 0] = _as_states(x0, p, groups, n)
    U = np.empty((N, grid.n_steps))
    offsets = (np.arange(groups) * p)[:, None]
    for k in range(grid.n_steps):
        t, x = grid.time(k), X[:, k]
        if y_feedback is None:
            y, z, kk = np.zeros(N), np.zeros((N, d)), np.zeros(N)
        else:
            y, z, kk = y_feedback(k, x)
        u = 0.0 if control_policy is None else control_policy(k, x, y)
        U[:, k] = _broadcast(u, (N,))
        drift = _broadcast(coeffs.b(t, x, y, z, kk, u), (N, n))
        sig = _broadcast(coeffs.sigma(t, x, y, u), (N, n, d))
        dB = np.tile(noise.brownian_increments[:, k, :], (groups, 1))
        nxt = x + drift * grid.dt + np.einsum("nij,nj->ni", sig, dB)
        if levy.n_nodes:
            nxt -= grid.dt * compensator(coeffs, levy, t, x, y, u)
            jpaths, marks = noise.jumps_at(k)
            if jpaths.size:
                rows = (jpaths[None, :] + offsets).reshape(-1)
                marks = np.tile(marks, (groups, 1))
                ur = U[rows, k]
                jumps = _broadcast(coeffs.g(t, x[rows], y[rows], marks, ur), (rows.size, n))
                np.add.at(nxt, rows, jumps)
        if not np.all(np.isfinite(nxt)):
            raise SimulationError(f"non-finite state after step {k} (t={t:.6g})")
        X[:, k + 1] = nxt
    return X, U


def dump_paths_csv(path, X: np.ndarray, noise: NoiseBatch, grid: TimeGrid) -> None:
    """Write columns (path, step, time, x1..xn, jump_count) for every knot."""
    counts = np.zeros((X.shape[0], grid.n_steps + 1), dtype=np.int64)
    counts[:, 1:] = noise.step_counts()
    knots = grid.knots
    n = X.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "step", "time"] + [f"x{i + 1}" for i in range(n)] + ["jump_count"])
        for i in range(X.shape[0]):
            for k in range(grid.n_steps + 1):
                w.writerow([i, k, format(knots[k], ".17g")] + [format(v, ".17g") for v in X[i, k]] + [int(counts[i, k])])
