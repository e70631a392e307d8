"""TOML run configuration with field-level diagnostics."""

from __future__ import annotations

import inspect
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fbsde import PicardConfig, RegressionBasis
from .model import ControlGrid, make_levy
from .presets import PRESETS, Preset, get_preset


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


_SECTIONS = {
    "model": {"id", "params"},
    "levy": {"intensity", "law", "params", "n_nodes", "eps_trunc"},
    "grid": {"t0", "T", "dt", "dpp_step", "n_sub", "box", "dx", "pide_dt"},
    "solver": {"basis", "degree", "cells", "picard_tol", "picard_iters", "delta_max", "halving_limit",
               "paths", "dpp_paths", "seed", "k_estimator", "fixed_point_sweeps"},
    "controls": {"points"},
    "tolerances": {"tol_dpp", "tol_visc", "cross"},
    "output": {"dir", "x0"},
    "verify": {"n_samples", "domain_box"},
}


@dataclass
class RunConfig:
    model_id: str
    model_params: dict
    seed: int
    levy_spec: dict | None = None
    t0: float = 0.0
    T: float = 1.0
    dt: float = 1 / 64
    dpp_step: float = 0.1
    n_sub: int = 8
    box: tuple = (-2.0, 2.0)
    dx: float = 0.1
    pide_dt: float | None = None
    basis: str = "polynomial"
    degree: int = 2
    cells: int = 4
    picard_tol: float = 1e-4
    picard_iters: int = 30
    delta_max: float | None = None
    halving_limit: int = 4
    paths: int = 10_000
    dpp_paths: int = 2000
    k_estimator: str = "representation"
    fixed_point_sweeps: int = 0
    controls: tuple | None = None
    tol_dpp: float | None = None
    tol_visc: float | None = None
    cross: float = 7e-2
    out_dir: str = "out"
    x0: tuple = (1.0,)
    verify_samples: int = 4096
    verify_box: tuple = (-1.0, 1.0)
    source: str = field(default="<memory>", repr=False)

    def preset(self) -> Preset:
        p = get_preset(self.model_id, T=self.T, **self.model_params)
        if self.levy_spec is not None:
            s = self.levy_spec
            levy = make_levy(s.get("intensity", 0.0), s.get("law", "point"), s.get("params", (1.0,)),
                             s.get("n_nodes", 8), s.get("eps_trunc", 0.0))
            p = Preset(p.name, p.coeffs, levy, p.controls, p.certificate, None, p.t0, p.T, p.params)
        if self.controls is not None:
            p = Preset(p.name, p.coeffs, p.levy, ControlGrid(self.controls), p.certificate, None, p.t0, p.T, p.params)
        return p

    def basis_obj(self) -> RegressionBasis:
        return RegressionBasis(self.basis, self.degree, self.cells)

    def picard_obj(self, horizon: float | None = None) -> PicardConfig:
        horizon = horizon if horizon is not None else self.T - self.t0
        dm = horizon if self.delta_max is None else min(self.delta_max, horizon)
        return PicardConfig(self.picard_iters, self.picard_tol, dm, self.halving_limit)

    @property
    def dpp_times(self):
        import numpy as np

        m = int(round((self.T - self.t0) / self.dpp_step))
        return self.t0 + (self.T - self.t0) * np.arange(m + 1) / m


def _line_of(text: str, section: str, key: str | None) -> int | None:
    header = f"[{section}]"
    in_sec = False
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("["):
            in_sec = s == header
            if in_sec and key is None:
                return i
            continue
        if in_sec and key is not None and s.split("=")[0].strip() == key:
            return i
    return None


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    text = raw.decode("utf-8", errors="replace")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, text, str(path))


def parse_config(data: dict, text: str = "", source: str = "<memory>") -> RunConfig:
    def fail(section, key, msg):
        line = _line_of(text, section, key) if text else None
        where = f"{source}" + (f":{line}" if line else "")
        name = f"{section}.{key}" if key else section
        raise ConfigError(f"{where}: field '{name}': {msg}")

    for sec, body in data.items():
        if sec not in _SECTIONS:
            fail(sec, None, f"unknown section (expected one of {sorted(_SECTIONS)})")
        if not isinstance(body, dict):
            fail(sec, None, "must be a table")
        for key in body:
            if key not in _SECTIONS[sec]:
                fail(sec, key, "unknown key")

    def get(sec, key, kind, default=None, required=False, check=None, msg=""):
        body = data.get(sec, {})
        if key not in body:
            if required:
                fail(sec, key, "is required")
            return default
        val = body[key]
        try:
            if kind is float and isinstance(val, bool):
                raise TypeError
            if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
                raise TypeError
            val = kind(val)
        except (TypeError, ValueError):
            fail(sec, key, f"expected {kind.__name__}, got {val!r}")
        if check is not None and not check(val):
            fail(sec, key, msg or f"invalid value {val!r}")
        return val

    def pair(sec, key, default):
        val = data.get(sec, {}).get(key, default)
        if not (isinstance(val, (list, tuple)) and len(val) == 2 and all(isinstance(v, (int, float)) for v in val)
                and val[1] > val[0]):
            fail(sec, key, f"expected [lo, hi] with hi > lo, got {val!r}")
        return (float(val[0]), float(val[1]))

    model_id = get("model", "id", str, required=True)
    if model_id not in PRESETS:
        fail("model", "id", f"unknown model id {model_id!r}; known: {sorted(PRESETS)}")
    params = data.get("model", {}).get("params", {})
    if not isinstance(params, dict):
        fail("model", "params", "must be a table")
    allowed = {k for k, v in inspect.signature(PRESETS[model_id]).parameters.items() if v.kind == v.POSITIONAL_OR_KEYWORD}
    for key in params:
        if key not in allowed or key == "T":
            fail("model", "params", f"{model_id!r} has no parameter {key!r} (allowed: {sorted(allowed - {'T'})})")
    seed = get("solver", "seed", int, required=True, check=lambda v: 0 <= v < 2**64, msg="seed must be a u64")
    pos = lambda v: v > 0
    cfg = RunConfig(model_id=model_id, model_params=dict(params), seed=seed, source=source)
    if "levy" in data:
        lv = data["levy"]
        spec = {
            "intensity": get("levy", "intensity", float, 0.0, check=lambda v: v >= 0, msg="must be >= 0"),
            "law": get("levy", "law", str, "point", check=lambda v: v in ("point", "normal", "uniform"),
                       msg="law must be point, normal or uniform"),
            "params": lv.get("params", [1.0]),
            "n_nodes": get("levy", "n_nodes", int, 8, check=pos, msg="must be positive"),
            "eps_trunc": get("levy", "eps_trunc", float, 0.0, check=lambda v: v >= 0, msg="must be >= 0"),
        }
        if not isinstance(spec["params"], list):
            fail("levy", "params", "must be a list of numbers")
        cfg.levy_spec = spec
    cfg.t0 = get("grid", "t0", float, 0.0)
    cfg.T = get("grid", "T", float, 1.0, check=lambda v: v > cfg.t0, msg="T must exceed t0")
    cfg.dt = get("grid", "dt", float, 1 / 64, check=pos, msg="must be positive")
    cfg.dpp_step = get("grid", "dpp_step", float, 0.1, check=pos, msg="must be positive")
    for key, val in (("dt", cfg.dt), ("dpp_step", cfg.dpp_step)):
        m = (cfg.T - cfg.t0) / val
        if abs(m - round(m)) > 1e-9:
            fail("grid", key, f"{val} does not divide the horizon {cfg.T - cfg.t0}")
    cfg.n_sub = get("grid", "n_sub", int, 8, check=pos, msg="must be positive")
    cfg.box = pair("grid", "box", [-2.0, 2.0])
    cfg.dx = get("grid", "dx", float, 0.1, check=pos, msg="must be positive")
    cfg.pide_dt = get("grid", "pide_dt", float, None, check=pos, msg="must be positive")
    cfg.basis = get("solver", "basis", str, "polynomial", check=lambda v: v in ("polynomial", "local-affine"),
                    msg="basis must be polynomial or local-affine")
    cfg.degree = get("solver", "degree", int, 2, check=lambda v: v >= 0, msg="must be >= 0")
    cfg.cells = get("solver", "cells", int, 4, check=pos, msg="must be positive")
    cfg.picard_tol = get("solver", "picard_tol", float, 1e-4, check=pos, msg="must be positive")
    cfg.picard_iters = get("solver", "picard_iters", int, 30, check=pos, msg="must be positive")
    cfg.delta_max = get("solver", "delta_max", float, None, check=pos, msg="must be positive")
    cfg.halving_limit = get("solver", "halving_limit", int, 4, check=lambda v: v >= 0, msg="must be >= 0")
    cfg.paths = get("solver", "paths", int, 10_000, check=lambda v: v >= 2, msg="must be >= 2")
    cfg.dpp_paths = get("solver", "dpp_paths", int, 2000, check=lambda v: v >= 2, msg="must be >= 2")
    cfg.k_estimator = get("solver", "k_estimator", str, "representation",
                          check=lambda v: v in ("representation", "increment"), msg="representation or increment")
    cfg.fixed_point_sweeps = get("solver", "fixed_point_sweeps", int, 0, check=lambda v: v >= 0, msg="must be >= 0")
    pts = data.get("controls", {}).get("points")
    if pts is not None:
        if not (isinstance(pts, list) and pts and all(isinstance(v, (int, float)) for v in pts)):
            fail("controls", "points", "expected a nonempty list of numbers")
        if len(set(pts)) != len(pts):
            fail("controls", "points", "duplicate control points")
        cfg.controls = tuple(float(v) for v in pts)
    cfg.tol_dpp = get("tolerances", "tol_dpp", float, None, check=pos, msg="tolerances must be positive")
    cfg.tol_visc = get("tolerances", "tol_visc", float, None, check=pos, msg="tolerances must be positive")
    cfg.cross = get("tolerances", "cross", float, 7e-2, check=pos, msg="tolerances must be positive")
    cfg.out_dir = get("output", "dir", str, "out")
    x0 = data.get("output", {}).get("x0", [1.0])
    if isinstance(x0, (int, float)):
        x0 = [x0]
    if not (isinstance(x0, list) and all(isinstance(v, (int, float)) for v in x0)):
        fail("output", "x0", "expected a number or list of numbers")
    cfg.x0 = tuple(float(v) for v in x0)
    cfg.verify_samples = get("verify", "n_samples", int, 4096, check=lambda v: v >= 2, msg="must be >= 2")
    cfg.verify_box = pair("verify", "domain_box", [-1.0, 1.0])
    try:
        p = cfg.preset()
    except (TypeError, ValueError) as exc:
        fail("model", "params", str(exc))
    if len(cfg.x0) != p.coeffs.n:
        fail("output", "x0", f"expected {p.coeffs.n} components")
    return cfg
