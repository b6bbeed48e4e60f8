"""Command-line runner: configuration in, reproducible run directory out."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import bmo_estimate, solve_backward
from .config import ScenarioConfig, load_config
from .errors import (ConfigInvalid, EvaluatorFailure, MfgError, MissingArtifacts, NoConvergence,
                     NonConvergence, NonFinite, RegressionSingular, SingularFlow)
from .forward import simulate_forward, tangent_flow
from .master import (check_malliavin_representations, check_z_representation, density_diagnostic,
                     estimate_master_field, master_equation_residual)
from .measure import LawFlow
from .mfg import solve_equilibrium
from .model import SampleSpec, verify_assumptions

EXIT_OK, EXIT_CONFIG, EXIT_NOCONV, EXIT_NUMERIC = 0, 1, 2, 3
MEMORY_ENV = "MFGWEAK_MAX_MEMORY_MB"
COMMANDS = ("simulate", "solve-bsde", "solve-mfg", "diagnose", "verify-assumptions")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _check_memory(cfg: ScenarioConfig, vfs) -> None:
    cap = os.environ.get(MEMORY_ENV)
    if not cap:
        return
    n_p = cfg["simulation"]["particles"]
    N = cfg["grid"]["steps"]
    # paths, increments, Y, Z, controls and weights, with headroom for temporaries
    need = 8 * n_p * (N + 1) * (2 * vfs.d + 3 * vfs.m + 3) * 2 / 2**20
    if need > float(cap):
        raise ConfigInvalid(0, f"run needs about {need:.0f} MB, above {MEMORY_ENV}={cap}")


class Run:
    """Collects artifacts and stage status, then writes the manifest."""

    def __init__(self, cfg: ScenarioConfig, out: Path, command: str):
        self.cfg, self.out, self.command = cfg, out, command
        self.stages = {}
        self.summary = {}
        self.started = time.time()
        out.mkdir(parents=True, exist_ok=True)

    def stage(self, name, status):
        self.stages[name] = status

    def write_manifest(self):
        files = sorted(p for p in self.out.rglob("*") if p.is_file() and p.name != "manifest.json")
        manifest = {
            "command": self.command,
            "config": self.cfg.echo(),
            "seed": self.cfg.seed,
            "version": __version__,
            "wall_clock_seconds": round(time.time() - self.started, 3),
            "stages": self.stages,
            "converged": self.summary.get("converged"),
            "summary": self.summary,
            "files": {str(p.relative_to(self.out)): _sha256(p) for p in files},
        }
        tmp = self.out / "manifest.json.tmp"
        _dump(tmp, manifest)
        os.replace(tmp, self.out / "manifest.json")


def _pipeline(cfg: ScenarioConfig, out: Path, command: str, threads: int) -> int:
    run = Run(cfg, out, command)
    code = EXIT_OK
    try:
        code = _stages(cfg, run, command, threads)
    except NoConvergence as exc:
        run.stage("equilibrium", "no-convergence")
        run.summary["error"] = str(exc)
        code = EXIT_NOCONV
    except (NonFinite, SingularFlow, RegressionSingular, NonConvergence, EvaluatorFailure) as exc:
        run.stage("failed", type(exc).__name__)
        run.summary["error"] = str(exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    run.write_manifest()
    return code


def _write_equilibrium(run, res):
    out = run.out
    res.flow.save(out / "flow")
    res.solution.to_csv(out / "solution.csv")
    res.weights.to_csv(out / "weights.csv")
    _dump(out / "equilibrium.json", {
        "iterations": res.iterations,
        "residual_history": res.residual_history,
        "converged": res.converged,
        "measure_mode": res.measure_mode,
        "novikov_stat": res.weights.novikov_stat,
        "diagnostics": res.diagnostics,
        "bsde": res.solution.diagnostics(),
    })
    run.summary.update({"converged": res.converged, "iterations": res.iterations,
                        "final_residual": res.residual_history[-1] if res.residual_history else None})


def _stages(cfg, run, command, threads):
    out = run.out
    vfs = cfg.vector_fields()
    model = cfg.model()
    g = cfg.terminal()
    grid = cfg.grid()
    _check_memory(cfg, vfs)
    if model is not None and (model.dim_state != vfs.d or model.dim_control != vfs.m):
        raise ConfigInvalid(0, f"model dimensions ({model.dim_state}, {model.dim_control}) do not match "
                               f"vector fields ({vfs.d}, {vfs.m})")
    if command == "verify-assumptions":
        if model is None:
            raise ConfigInvalid(0, "verify-assumptions needs a [model] kind")
        rep = verify_assumptions(model, SampleSpec(seed=cfg.seed))
        _dump(out / "assumptions.json", rep.to_dict())
        run.stage("assumptions", "passed" if rep.passed else "violations")
        run.summary["assumption_violations"] = len(rep.violations)
        return EXIT_OK

    s, solver = cfg["simulation"], cfg["solver"]
    initial = cfg.initial(vfs.d)
    paths = simulate_forward(vfs, initial, grid, cfg.seed, s["particles"], threads=threads)
    paths.to_csv(out / "paths.csv")
    paths.save(out / "paths.npz")
    run.stage("simulate", "ok")
    if command == "simulate":
        return EXIT_OK

    basis = cfg.basis()
    trunc = solver["truncation"] or None
    if command == "solve-bsde":
        flow = LawFlow.from_states(paths.X)
        sol = solve_backward(paths, model, flow, g, basis, vfs, solver["control_variate"], trunc)
        sol.to_csv(out / "solution.csv")
        sol.diagnostics_json(out / "bsde.json", {"bmo_estimate": bmo_estimate(sol, paths, basis)})
        run.stage("bsde", "ok")
        return EXIT_OK

    try:
        res = solve_equilibrium(model, vfs, initial, grid, g, s["particles"], cfg.seed,
                                damping=solver["damping"], tol=solver["tol"], max_iter=solver["max_iter"],
                                measure_mode=solver["measure_mode"], basis=basis,
                                control_variate=solver["control_variate"], threads=threads, paths=paths)
    except NoConvergence as exc:
        _write_equilibrium(run, exc.result)
        raise
    _write_equilibrium(run, res)
    run.stage("equilibrium", "converged")
    if command == "solve-mfg":
        return EXIT_OK

    diag = cfg["diagnostics"]
    report = {}
    sol, flow = res.solution, res.flow
    mf = estimate_master_field(sol, paths, basis)
    lo, hi = np.quantile(paths.X[:, -1, 0], [0.05, 0.95])
    xs = np.linspace(lo, hi, diag["slice_points"])
    if vfs.d == 1:
        table = mf.slices_table(xs)
        with open(out / "u_slices.csv", "w") as fh:
            fh.write("t,x,u\n")
            for t, x, u in table:
                fh.write(f"{float(t)!r},{float(x)!r},{float(u)!r}\n")
    if diag["z_representation"]:
        report["z_representation"] = check_z_representation(sol, mf, vfs, paths)
    if diag["bmo"]:
        report["bmo_estimate"] = bmo_estimate(sol, paths, basis)
    if diag["malliavin"]:
        tf = tangent_flow(vfs, paths)
        N = grid.N
        probes = [(u, t) for u, t in [(N // 4, N // 2), (N // 2, 3 * N // 4), (N // 2, N // 2)]]
        report["malliavin"] = check_malliavin_representations(sol, tf, vfs, paths, probes, mf)
    if diag["master_residual"] and model is not None:
        report["master_residual"] = master_equation_residual(mf, model, vfs, flow, g=g).to_dict()
    if diag["density"]:
        node = diag["density_node"] if diag["density_node"] > 0 else grid.N
        kde = density_diagnostic(paths, node, component=diag["density_component"])
        with open(out / "kde.csv", "w") as fh:
            fh.write("x,density\n")
            for x, v in zip(kde["grid"], kde["density"]):
                fh.write(f"{x!r},{v!r}\n")
        report["density"] = {k: v for k, v in kde.items() if k not in ("grid", "density")}
    if diag["assumptions"] and model is not None:
        report["assumptions"] = verify_assumptions(model, SampleSpec(seed=cfg.seed)).to_dict()
    _dump(out / "diagnostics.json", report)
    run.stage("diagnostics", "ok")
    return EXIT_OK


def run_scenario(config_path, out=None, seed=None, threads: int = 1, command: str = "diagnose"):
    """Run one subcommand; returns ``(exit_code, run_directory)``."""
    try:
        cfg = load_config(config_path, seed)
    except ConfigInvalid as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None
    target = Path(out or cfg["scenario"]["out"] or f"runs/{cfg.name}")
    try:
        return _pipeline(cfg, target, command, threads), target
    except ConfigInvalid as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, target


# --------------------------------------------------------------------------
# plot data
# --------------------------------------------------------------------------


def emit_plots(run_dir) -> list[str]:
    """Write whitespace-separated column files for plotting from a finished run."""
    run_dir = Path(run_dir)
    manifest = run_dir / "manifest.json"
    if not manifest.exists():
        raise MissingArtifacts(f"{run_dir} has no manifest.json")
    written = []
    eq = run_dir / "equilibrium.json"
    if eq.exists():
        hist = json.loads(eq.read_text())["residual_history"]
        with open(run_dir / "residual.dat", "w") as fh:
            fh.write("# iteration sup_w2_residual\n")
            for k, r in enumerate(hist, start=1):
                fh.write(f"{k} {float(r)!r}\n")
        written.append("residual.dat")
    sl = run_dir / "u_slices.csv"
    if sl.exists():
        rows = np.loadtxt(sl, delimiter=",", skiprows=1, ndmin=2)
        with open(run_dir / "u_slices.dat", "w") as fh:
            fh.write("# t x u\n")
            for t, x, u in rows:
                fh.write(f"{float(t)!r} {float(x)!r} {float(u)!r}\n")
        written.append("u_slices.dat")
    kde = run_dir / "kde.csv"
    if kde.exists():
        rows = np.loadtxt(kde, delimiter=",", skiprows=1, ndmin=2)
        with open(run_dir / "kde.dat", "w") as fh:
            fh.write("# x density\n")
            for x, v in rows:
                fh.write(f"{float(x)!r} {float(v)!r}\n")
        written.append("kde.dat")
    solf = run_dir / "solution.csv"
    if solf.exists():
        with open(solf) as src, open(run_dir / "yz_scatter.dat", "w") as fh:
            header = src.readline().strip().split(",")
            fh.write("# particle step " + " ".join(header[2:]) + "\n")
            for line in src:
                parts = line.strip().split(",")
                if int(parts[0]) < 200:
                    fh.write(" ".join(parts) + "\n")
        written.append("yz_scatter.dat")
    if not written:
        raise MissingArtifacts(f"{run_dir} holds no plottable artifacts")
    return written


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfgweak", description="Particle solver for weak-formulation mean-field games.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="scenario configuration (INI)")
        sp.add_argument("--out", help="run directory (default: [scenario] out or runs/<name>)")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for simulation")
    ep = sub.add_parser("emit-plots")
    ep.add_argument("run_dir", nargs="?", help="completed run directory")
    ep.add_argument("--out", dest="run_dir_opt", help="completed run directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "emit-plots":
        target = args.run_dir or args.run_dir_opt
        if not target:
            print("emit-plots needs a run directory", file=sys.stderr)
            return EXIT_CONFIG
        try:
            for name in emit_plots(target):
                print(name)
        except MissingArtifacts as exc:
            print(f"missing artifacts: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    if args.threads < 1:
        print("configuration error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code, out = run_scenario(args.config, args.out, args.seed, args.threads, args.command)
    except MfgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if out is not None:
        print(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
