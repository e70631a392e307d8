"""Control problem definition and sampled assumption certificates.

Array conventions used by every coefficient callable (N = number of
evaluation points, n = state dim, d = Brownian dim, l = mark dim):

    b(t, x[N,n], y[N], z[N,d], k[N], u)   -> [N, n]
    sigma(t, x[N,n], y[N], u)             -> [N, n, d]
    g(t, x[N,n], y[N], e[N,l], u)         -> [N, n]
    f(t, x[N,n], y[N], z[N,d], k[N], u)   -> [N]
    phi(x[N,n])                           -> [N]

``u`` is either a float or an array of shape [N]. ``k`` is the aggregated
jump component, i.e. the integral of K(e) against the Levy measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.special import ndtr

COEFFICIENT_NAMES = ("b", "sigma", "g", "f", "phi")


@dataclass(frozen=True)
class CoefficientSet:
    """The model functions b, sigma, g, f, phi plus declared constants.

    ``coupled`` tells the solvers whether b, sigma or g read the backward
    components; decoupled models are solved with a single backward sweep.
    """

    b: Callable
    sigma: Callable
    g: Callable
    f: Callable
    phi: Callable
    n: int = 1
    d: int = 1
    lip_constants: Mapping[str, float] = field(default_factory=dict)
    comparison_K: float = 0.0
    coupled: bool = True
    name: str = "custom"

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("state and Brownian dimensions must be >= 1")
        if not self.comparison_K > -1.0:
            raise ValueError(f"comparison_K must exceed -1, got {self.comparison_K}")
        for key, value in self.lip_constants.items():
            if key not in COEFFICIENT_NAMES:
                raise ValueError(f"unknown coefficient {key!r} in lip_constants")
            if value is not None and value < 0:
                raise ValueError(f"Lipschitz constant for {key} must be nonnegative")


@dataclass(frozen=True)
class LevyMeasure:
    """Finite-activity jump law with a quadrature rule for integrals over marks.

    The quadrature weights sum to ``total_intensity``; the sampler draws
    marks from the normalised law. ``discarded_mass`` is the intensity removed
    by small-jump truncation.
    """

    total_intensity: float
    nodes: np.ndarray
    weights: np.ndarray
    mark_sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None
    discarded_mass: float = 0.0
    law: str = "none"

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.total_intensity == 0 and weights.size == 0:
            nodes = nodes.reshape(0, max(nodes.shape[-1], 1))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        if self.total_intensity < 0:
            raise ValueError("total intensity must be nonnegative")
        if nodes.shape[0] != weights.size:
            raise ValueError("nodes and weights disagree in length")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        mass = float(weights.sum())
        if abs(mass - self.total_intensity) > 1e-12 * max(1.0, self.total_intensity):
            raise ValueError(f"weights sum to {mass}, expected {self.total_intensity}")
        if weights.size and np.any(np.linalg.norm(nodes, axis=1) == 0):
            raise ValueError("quadrature nodes must be nonzero marks")
        if self.total_intensity > 0 and self.mark_sampler is None:
            raise ValueError("a positive intensity needs a mark sampler")

    @property
    def dim_marks(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.weights.size

    @property
    def quad_nodes(self) -> list[tuple[np.ndarray, float]]:
        return [(self.nodes[i], float(self.weights[i])) for i in range(self.n_nodes)]

    def second_moment(self) -> float:
        return float(np.sum(self.weights * np.sum(self.nodes**2, axis=1)))

    def jump_span(self) -> float:
        """Largest quadrature mark norm (0 without jumps)."""
        if self.n_nodes == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.nodes, axis=1)))

    @classmethod
    def none(cls, dim_marks: int = 1) -> "LevyMeasure":
        return cls(0.0, np.zeros((0, dim_marks)), np.zeros(0), None, 0.0, "none")


def make_levy(
    intensity: float,
    law: str = "point",
    params: Sequence[float] = (1.0,),
    n_nodes: int = 8,
    eps_trunc: float = 0.0,
) -> LevyMeasure:
    """Build a finite-activity Levy measure from a named mark law.

    Laws: ``point`` (params = mark vector), ``normal`` (mean, std) with
    Gauss-Hermite nodes, ``uniform`` (low, high) with Gauss-Legendre nodes.
    Marks with norm below ``eps_trunc`` are removed from both the sampler and
    the quadrature; the removed intensity is reported as ``discarded_mass``.
    """
    if intensity < 0:
        raise ValueError("intensity must be nonnegative")
    params = [float(p) for p in params]
    if intensity == 0:
        dim = len(params) if law == "point" else 1
        return LevyMeasure.none(dim)

    if law == "point":
        mark = np.asarray(params, dtype=float)
        if np.linalg.norm(mark) < max(eps_trunc, 0.0) or np.linalg.norm(mark) == 0:
            raise ValueError("point mark is zero or truncated away")

        def sampler(rng, size, mark=mark):
            return np.broadcast_to(mark, (size, mark.size)).copy()

        return LevyMeasure(intensity, mark[None, :], np.array([intensity]), sampler, 0.0, law)

    if law == "normal":
        mean, std = params
        if std <= 0:
            raise ValueError("normal mark law needs std > 0")
        xi, w = hermegauss(n_nodes)
        nodes, probs = mean + std * xi, w / math.sqrt(2 * math.pi)
        kept_prob = 1.0 - (ndtr((eps_trunc - mean) / std) - ndtr((-eps_trunc - mean) / std))

        def draw(rng, size):
            return mean + std * rng.standard_normal(size)

    elif law == "uniform":
        low, high = params
        if not high > low:
            raise ValueError("uniform mark law needs high > low")
        xi, w = leggauss(n_nodes)
        nodes = 0.5 * (high - low) * xi + 0.5 * (high + low)
        probs = 0.5 * w
        overlap = max(0.0, min(high, eps_trunc) - max(low, -eps_trunc))
        kept_prob = 1.0 - overlap / (high - low)

        def draw(rng, size):
            return rng.uniform(low, high, size)

    else:
        raise ValueError(f"unknown mark law {law!r}")

    keep = np.abs(nodes) >= eps_trunc
    keep &= nodes != 0.0
    if not np.any(keep) or kept_prob <= 0:
        raise ValueError("truncation removed every mark")
    kept_mass = intensity * kept_prob
    weights = probs[keep] * (kept_mass / probs[keep].sum())

    def sampler(rng, size):
        if eps_trunc <= 0:
            return draw(rng, size)[:, None]
        out = np.empty(0)
        while out.size < size:
            batch = draw(rng, max(2 * (size - out.size), 16))
            out = np.concatenate([out, batch[np.abs(batch) >= eps_trunc]])
        return out[:size, None]

    return LevyMeasure(
        kept_mass,
        nodes[keep][:, None],
        weights,
        sampler,
        intensity - kept_mass,
        law,
    )


@dataclass(frozen=True)
class ControlGrid:
    """Finite sample of the compact control set U."""

    points: tuple[float, ...]
    metric: Callable[[float, float], float] = lambda u, v: abs(u - v)

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        object.__setattr__(self, "points", pts)
        if not pts:
            raise ValueError("control grid must be nonempty")
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if not self.metric(pts[i], pts[j]) > 0:
                    raise ValueError(f"duplicate control points at indices {i}, {j}")

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def __getitem__(self, i):
        return self.points[i]


@dataclass(frozen=True)
class MonotonicityCertificate:
    """G, beta1, beta2, mu1 for the monotonicity condition with scalar Y.

    ``trivial=True`` allows beta1 = beta2 = mu1 = 0; it is only accepted by
    the checker for decoupled models, where the condition is not needed.
    """

    G: np.ndarray
    beta1: float
    beta2: float
    mu1: float
    trivial: bool = False

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        object.__setattr__(self, "G", G)
        if G.shape[0] != 1:
            raise ValueError("only scalar Y (m = 1) certificates are supported")
        if np.linalg.matrix_rank(G) != 1:
            raise ValueError("G must have full rank")
        if min(self.beta1, self.beta2, self.mu1) < 0:
            raise ValueError("certificate constants must be nonnegative")
        if self.trivial:
            if self.beta1 or self.beta2 or self.mu1:
                raise ValueError("trivial certificate has all constants zero")
            return
        if not self.beta1 + self.beta2 > 0:
            raise ValueError("need beta1 + beta2 > 0")
        if not self.beta2 + self.mu1 > 0:
            raise ValueError("need beta2 + mu1 > 0")
        if G.shape[1] > 1 and not self.beta2 > 0:
            raise ValueError("need beta2 > 0 when n > 1")

    @classmethod
    def zero(cls, n: int = 1) -> "MonotonicityCertificate":
        return cls(np.ones((1, n)), 0.0, 0.0, 0.0, trivial=True)


# ---------------------------------------------------------------- checkers


@dataclass
class LipschitzReport:
    ratios: dict[str, float]
    declared: dict[str, float | None]
    worst_inputs: dict[str, dict]
    coefficient_pass: dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.coefficient_pass.values())


@dataclass
class SlackReport:
    worst_slack: float
    passed: bool
    worst_input: dict
    note: str = ""


def _box(domain_box, key):
    if isinstance(domain_box, Mapping):
        lo, hi = domain_box.get(key, domain_box.get("default", (-1.0, 1.0)))
    else:
        lo, hi = domain_box
    if not hi > lo:
        raise ValueError(f"degenerate domain box for {key}: {(lo, hi)}")
    return float(lo), float(hi)


def _finite(name, out, inputs):
    out = np.asarray(out, dtype=float)
    if not np.all(np.isfinite(out)):
        bad = np.flatnonzero(~np.isfinite(out.reshape(out.shape[0], -1)).all(axis=1))[0]
        echo = {k: np.asarray(v)[bad].tolist() if np.ndim(v) else v for k, v in inputs.items()}
        raise ValueError(f"{name} returned a non-finite value at {echo}")
    return out


def _sample_args(coeffs, domain_box, size, rng, levy, controls):
    n, d = coeffs.n, coeffs.d
    args = {}
    for key, shape in (("x", (size, n)), ("y", (size,)), ("z", (size, d)), ("k", (size,))):
        lo, hi = _box(domain_box, key)
        args[key] = rng.uniform(lo, hi, shape)
    if levy is not None and levy.n_nodes:
        idx = rng.integers(0, levy.n_nodes, size)
        args["e"] = levy.nodes[idx]
    else:
        lo, hi = _box(domain_box, "e")
        args["e"] = rng.uniform(lo, hi, (size, 1))
    pts = np.asarray(controls.points if controls is not None else (0.0,))
    args["u"] = pts[rng.integers(0, pts.size, size)]
    args["t"] = float(rng.uniform(*_box(domain_box, "t"))) if isinstance(domain_box, Mapping) and "t" in domain_box else 0.0
    return args


def check_lipschitz(
    coeffs: CoefficientSet,
    domain_box,
    n_samples: int = 4096,
    seed: int = 0,
    levy: LevyMeasure | None = None,
    controls: ControlGrid | None = None,
) -> LipschitzReport:
    """Largest sampled difference quotient of each coefficient.

    ``domain_box`` is either a ``(lo, hi)`` pair used for every argument or a
    mapping from argument name (x, y, z, k, e, t) to bounds. Pairs share the
    time, mark and control; the other arguments are drawn independently.
    A coefficient without a declared constant is reported but not judged.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    rng = np.random.default_rng(seed)
    a = _sample_args(coeffs, domain_box, n_samples, rng, levy, controls)
    a2 = _sample_args(coeffs, domain_box, n_samples, rng, levy, controls)
    t, e, u = a["t"], a["e"], a["u"]

    def stack(p, keys):
        return np.concatenate([np.asarray(p[k]).reshape(n_samples, -1) for k in keys], axis=1)

    n, d = coeffs.n, coeffs.d
    calls = {
        "b": (("x", "y", "z", "k"), (n,), lambda p: coeffs.b(t, p["x"], p["y"], p["z"], p["k"], u)),
        "sigma": (("x", "y"), (n, d), lambda p: coeffs.sigma(t, p["x"], p["y"], u)),
        "g": (("x", "y"), (n,), lambda p: coeffs.g(t, p["x"], p["y"], e, u)),
        "f": (("x", "y", "z", "k"), (), lambda p: coeffs.f(t, p["x"], p["y"], p["z"], p["k"], u)),
        "phi": (("x",), (), lambda p: coeffs.phi(p["x"])),
    }
    ratios, worst, verdict, declared = {}, {}, {}, {}
    for name, (keys, shape, call) in calls.items():
        full = (n_samples,) + shape
        out1 = _finite(name, np.broadcast_to(call(a), full).reshape(n_samples, -1), a)
        out2 = _finite(name, np.broadcast_to(call(a2), full).reshape(n_samples, -1), a2)
        num = np.linalg.norm(out1 - out2, axis=1)
        den = np.linalg.norm(stack(a, keys) - stack(a2, keys), axis=1)
        ratio = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        i = int(np.argmax(ratio))
        ratios[name] = float(ratio[i])
        worst[name] = {
            "first": {k: np.asarray(a[k])[i].tolist() for k in keys},
            "second": {k: np.asarray(a2[k])[i].tolist() for k in keys},
        }
        declared[name] = coeffs.lip_constants.get(name)
        verdict[name] = True if declared[name] is None else ratios[name] <= declared[name] * (1 + 1e-9)
    return LipschitzReport(ratios, declared, worst, verdict)


def check_monotonicity(
    coeffs: CoefficientSet,
    cert: MonotonicityCertificate,
    levy: LevyMeasure,
    n_samples: int = 4096,
    seed: int = 0,
    domain_box=(-1.0, 1.0),
    controls: ControlGrid | None = None,
) -> SlackReport:
    """Sampled check of the monotonicity condition for scalar Y.

    With v = (x, y, z) and A = (-G^T f, G b, G sigma), evaluates

        <A(v,k) - A(v',k'), v - v'> + sum_i w_i <G g^, k^_i>
            <= -beta1 |G x^|^2 - beta2 (|G^T y^|^2 + |G^T z^|^2 + sum_i w_i |G^T k^_i|^2)

    together with <phi(x) - phi(x'), G x^> >= mu1 |G x^|^2. The jump
    component k is sampled only at the quadrature nodes (a finite-dimensional
    slice of L^2(lambda)); its aggregate sum_i w_i k_i feeds b and f.
    """
    G = cert.G
    if G.shape[1] != coeffs.n:
        raise ValueError(f"G has {G.shape[1]} columns, state dimension is {coeffs.n}")
    if cert.trivial and coeffs.coupled:
        raise ValueError("the trivial certificate only applies to decoupled models")
    rng = np.random.default_rng(seed)
    size, q = n_samples, levy.n_nodes
    a = _sample_args(coeffs, domain_box, size, rng, levy, controls)
    a2 = _sample_args(coeffs, domain_box, size, rng, levy, controls)
    t, u = a["t"], a["u"]
    lo, hi = _box(domain_box, "k")
    kn1, kn2 = rng.uniform(lo, hi, (size, q)), rng.uniform(lo, hi, (size, q))
    w = levy.weights
    kagg1, kagg2 = kn1 @ w, kn2 @ w

    b1 = _finite("b", coeffs.b(t, a["x"], a["y"], a["z"], kagg1, u), a)
    b2 = _finite("b", coeffs.b(t, a2["x"], a2["y"], a2["z"], kagg2, u), a2)
    s1 = _finite("sigma", coeffs.sigma(t, a["x"], a["y"], u), a)
    s2 = _finite("sigma", coeffs.sigma(t, a2["x"], a2["y"], u), a2)
    f1 = _finite("f", coeffs.f(t, a["x"], a["y"], a["z"], kagg1, u), a)
    f2 = _finite("f", coeffs.f(t, a2["x"], a2["y"], a2["z"], kagg2, u), a2)
    if b1.shape != (size, coeffs.n) or s1.shape != (size, coeffs.n, coeffs.d):
        raise ValueError("coefficient output shapes do not match the declared dimensions")

    xh, yh, zh = a["x"] - a2["x"], a["y"] - a2["y"], a["z"] - a2["z"]
    Gx = xh @ G[0]
    lhs = -(f1 - f2) * Gx + ((b1 - b2) @ G[0]) * yh
    lhs += np.einsum("j,njd,nd->n", G[0], s1 - s2, zh)
    for i in range(q):
        e = np.broadcast_to(levy.nodes[i], (size, levy.dim_marks))
        gh = coeffs.g(t, a["x"], a["y"], e, u) - coeffs.g(t, a2["x"], a2["y"], e, u)
        lhs += w[i] * (np.asarray(gh) @ G[0]) * (kn1[:, i] - kn2[:, i])
    gnorm2 = float(G[0] @ G[0])
    rhs = -cert.beta1 * Gx**2 - cert.beta2 * gnorm2 * (
        yh**2 + np.sum(zh**2, axis=1) + (kn1 - kn2) ** 2 @ w
    )
    slack1 = rhs - lhs
    p1 = _finite("phi", coeffs.phi(a["x"]), a)
    p2 = _finite("phi", coeffs.phi(a2["x"]), a2)
    slack2 = (p1 - p2) * Gx - cert.mu1 * Gx**2

    s = np.minimum(slack1, slack2)
    i = int(np.argmin(s))
    worst = {
        "x": a["x"][i].tolist(), "x_bar": a2["x"][i].tolist(),
        "y": float(a["y"][i]), "y_bar": float(a2["y"][i]),
        "part": "drift/driver" if slack1[i] <= slack2[i] else "terminal",
    }
    note = "jump component sampled at quadrature nodes only" if q else ""
    return SlackReport(float(s[i]), bool(s[i] >= -1e-9), worst, note)


def check_comparison_condition(
    coeffs: CoefficientSet,
    n_samples: int = 4096,
    seed: int = 0,
    domain_box=(-1.0, 1.0),
    controls: ControlGrid | None = None,
) -> SlackReport:
    """Sampled check of f(.., k1, u) - f(.., k2, u) >= K (k1 - k2) for k1 > k2."""
    rng = np.random.default_rng(seed)
    a = _sample_args(coeffs, domain_box, n_samples, rng, None, controls)
    lo, hi = _box(domain_box, "k")
    k1, k2 = rng.uniform(lo, hi, n_samples), rng.uniform(lo, hi, n_samples)
    k1, k2 = np.maximum(k1, k2), np.minimum(k1, k2)
    keep = k1 > k2
    t, u = a["t"], a["u"]
    f1 = _finite("f", coeffs.f(t, a["x"], a["y"], a["z"], k1, u), a)
    f2 = _finite("f", coeffs.f(t, a["x"], a["y"], a["z"], k2, u), a)
    margin = np.where(keep, f1 - f2 - coeffs.comparison_K * (k1 - k2), np.inf)
    i = int(np.argmin(margin))
    worst = {"x": a["x"][i].tolist(), "k1": float(k1[i]), "k2": float(k2[i])}
    return SlackReport(float(margin[i]), bool(margin[i] >= -1e-9), worst)
