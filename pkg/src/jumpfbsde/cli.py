"""Command-line entry point: simulate, solve-fbsde, value-dpp, solve-pide, verify, compare."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .dpp import ValueField, compute_value_function, padded_axes
from .fbsde import SolverError, solve_fbsde_coupled, write_bundle_csv
from .paths import SimulationError, TimeGrid, dump_paths_csv, euler_forward, sample_noise
from .pide import CFLError, PideGrid, solve_pide
from .verification import certificate_checks, property_checks

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4


def _config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this subcommand")
    cfg = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be a u64")
        cfg.seed = args.seed
    if args.paths is not None:
        if args.paths < 2:
            raise ConfigError("--paths must be >= 2")
        cfg.paths = cfg.dpp_paths = args.paths
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _out(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")


def cmd_simulate(cfg: RunConfig) -> int:
    p = cfg.preset()
    grid = TimeGrid.from_dt(cfg.t0, cfg.T, cfg.dt)
    noise = sample_noise(grid, p.levy, cfg.paths, cfg.seed, p.coeffs.d)
    x0 = np.array(cfg.x0)
    if p.coeffs.coupled:
        X = solve_fbsde_coupled(p.coeffs, p.levy, grid, x0, basis=cfg.basis_obj(), picard=cfg.picard_obj(),
                                noise=noise, keep_K=False).X
    else:
        X, _ = euler_forward(p.coeffs, p.levy, grid, noise, x0)
    path = _out(cfg, "paths.csv")
    dump_paths_csv(path, X, noise, grid)
    print(f"wrote {path} ({cfg.paths} paths, {grid.n_steps} steps)")
    return EXIT_OK


def cmd_solve_fbsde(cfg: RunConfig) -> int:
    p = cfg.preset()
    grid = TimeGrid.from_dt(cfg.t0, cfg.T, cfg.dt)
    bundle = solve_fbsde_coupled(
        p.coeffs, p.levy, grid, np.array(cfg.x0), basis=cfg.basis_obj(), picard=cfg.picard_obj(),
        paths=cfg.paths, seed=cfg.seed, k_estimator=cfg.k_estimator, keep_K=False,
    )
    path = _out(cfg, "fbsde.csv")
    write_bundle_csv(path, bundle, cfg.x0)
    print(f"Y0 = {bundle.y0[0]:.6g} +/- {bundle.y0_stderr[0]:.2g}; wrote {path}")
    return EXIT_OK


def _axes(cfg: RunConfig, p):
    return padded_axes(cfg.box, cfg.dx, p.coeffs, p.levy, cfg.T - cfg.t0, p.controls)


def cmd_value_dpp(cfg: RunConfig) -> int:
    p = cfg.preset()
    field_ = compute_value_function(
        p.coeffs, p.levy, p.controls, cfg.dpp_times, _axes(cfg, p), n_sub=cfg.n_sub, basis=cfg.basis_obj(),
        picard=cfg.picard_obj(cfg.dpp_step), paths=cfg.dpp_paths, seed=cfg.seed,
    )
    path = _out(cfg, "dpp_field.csv")
    field_.to_csv(path, p.controls)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_solve_pide(cfg: RunConfig) -> int:
    p = cfg.preset()
    align = int(round((cfg.T - cfg.t0) / cfg.dpp_step))
    grid = PideGrid.build(cfg.t0, cfg.T, _axes(cfg, p), p.coeffs, p.levy, p.controls, dt=cfg.pide_dt, align=align)
    field_ = solve_pide(p.coeffs, p.levy, p.controls, grid, fixed_point_sweeps=cfg.fixed_point_sweeps)
    path = _out(cfg, "pide_field.csv")
    field_.to_csv(path, p.controls)
    print(f"wrote {path} ({grid.times.size - 1} steps of {grid.dt:.4g})")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    p = cfg.preset()
    results = certificate_checks(p, cfg.verify_samples, cfg.seed, cfg.verify_box)
    results += property_checks(p, cfg.seed, cfg.x0, cfg.box)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    _write_json(_out(cfg, "verify.json"), {
        "model": cfg.model_id, "seed": cfg.seed, "passed": ok,
        "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results],
    })
    print("verification " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_VERIFY


def compare_fields(a: ValueField, b: ValueField, box=None) -> dict:
    """Sup and L2 (root-mean-square) differences over the common time x state nodes."""
    def common(u, v):
        keep_u = np.array([np.any(np.abs(v - s) <= 1e-9 * max(1.0, abs(s))) for s in u])
        keep_v = np.array([np.any(np.abs(u - s) <= 1e-9 * max(1.0, abs(s))) for s in v])
        return keep_u, keep_v

    ku, kv = common(a.times, b.times)
    sel_a, sel_b = [ku], [kv]
    for ax_a, ax_b in zip(a.axes, b.axes):
        ka, kb = common(ax_a, ax_b)
        if box is not None:
            ka &= (ax_a >= box[0] - 1e-9) & (ax_a <= box[1] + 1e-9)
            kb &= (ax_b >= box[0] - 1e-9) & (ax_b <= box[1] + 1e-9)
        sel_a.append(ka)
        sel_b.append(kb)
    if len(a.axes) != len(b.axes):
        raise ConfigError("fields have different state dimensions")
    va = a.values[np.ix_(*sel_a)]
    vb = b.values[np.ix_(*sel_b)]
    if va.size == 0 or va.shape != vb.shape:
        raise ConfigError("fields share no common grid nodes")
    d = np.abs(va - vb)
    return {"nodes": int(d.size), "sup": float(d.max()), "l2": float(np.sqrt(np.mean(d**2)))}


def cmd_compare(args) -> int:
    box, tol = None, args.tol
    if args.config:
        cfg = load_config(args.config)
        box = cfg.box
        tol = tol if tol is not None else cfg.cross
    if args.box is not None:
        box = tuple(args.box)
    try:
        a, b = ValueField.from_csv(args.first), ValueField.from_csv(args.second)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    res = compare_fields(a, b, box)
    print(f"common nodes {res['nodes']}: sup {res['sup']:.6g}, L2 {res['l2']:.6g}")
    if tol is not None:
        res["tol"] = tol
        res["passed"] = res["sup"] <= tol
        print(f"sup difference {'within' if res['passed'] else 'EXCEEDS'} tolerance {tol:g}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "compare.json", res)
    return EXIT_OK if res.get("passed", True) else EXIT_VERIFY


COMMANDS = {
    "simulate": cmd_simulate,
    "solve-fbsde": cmd_solve_fbsde,
    "value-dpp": cmd_value_dpp,
    "solve-pide": cmd_solve_pide,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jumpfbsde", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--paths", type=int)
    sp = sub.add_parser("compare", help="sup and L2 differences of two value-field CSVs")
    sp.add_argument("first")
    sp.add_argument("second")
    sp.add_argument("--config")
    sp.add_argument("--box", type=float, nargs=2, metavar=("LO", "HI"))
    sp.add_argument("--tol", type=float)
    sp.add_argument("--out")
    return ap


def run_subcommand(argv) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "compare":
            return cmd_compare(args)
        return COMMANDS[args.command](_config(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, SimulationError, CFLError, FloatingPointError, RuntimeError) as exc:
        payload = {"error": type(exc).__name__, "message": str(exc), **getattr(exc, "diagnostics", {})}
        print("solver aborted: " + json.dumps(payload, default=float), file=sys.stderr)
        return EXIT_SOLVER


def main(argv=None) -> None:
    sys.exit(run_subcommand(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
