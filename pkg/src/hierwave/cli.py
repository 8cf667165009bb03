"""Batch-experiment command line.

Subcommands
-----------
simulate    forward solve with a prescribed boundary control
nash        equilibrium pair for a given leader control
leader      optimal leader via the dual minimization
verify      oracle suites (fast / full)
threshold   table of the controllability time threshold over k
sweep       cartesian parameter sweep of leader runs

One JSON config document drives everything; analytic profiles are limited
to the families sine, gaussian, polynomial, constant (plus CSV sample
paths), so that runs are reproducible without an expression parser.  Exit
codes are frozen for scripting: 0 ok, 2 invalid configuration, 3 solver
failure, 4 uncertified optimum, 5 verification failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ConvergenceError, InstabilityError
from .geometry import DomainSpec, SigmaPartition, check_admissible
from .grid import (
    Field,
    GridSpec,
    Mesh,
    SpatialProfile,
    Trace,
    load_field_csv,
    load_profile_csv,
    load_trace_csv,
    save_field_csv,
    save_profile_csv,
    save_trace_csv,
    l2_norm_physical,
    hminus1_norm_physical,
)
from .wave_core import (
    WaveProblem,
    final_value_profile,
    final_velocity_profile,
    solve_forward,
    trace_normal_derivative,
)
from .coupled import (
    FollowerConfig,
    PicardOptions,
    cost_J,
    cost_J2,
    euler_lagrange_residual,
    solve_nash_system,
)
from .leader_dual import DualOptions, TargetSpec, minimize_dual
from .verify import run_verification, write_verification_report
from .geometry import min_control_time

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_UNCERTIFIED = 4
EXIT_VERIFY = 5


# ---------------------------------------------------------------------------
# config ingestion
# ---------------------------------------------------------------------------

def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigurationError(f"cannot read config {path}: {err}") from err
    if not isinstance(config, dict):
        raise ConfigurationError("config root must be a JSON object")
    return config


def eval_profile(spec: dict, xi: np.ndarray) -> np.ndarray:
    """Evaluate an analytic profile on the normalized coordinate xi in [0, 1]."""
    if not isinstance(spec, dict) or "family" not in spec:
        raise ConfigurationError(f"profile spec must name a family: {spec!r}")
    fam = spec["family"]
    if fam == "sine":
        a = float(spec.get("amplitude", 1.0))
        freq = float(spec.get("frequency", 1.0))
        phase = float(spec.get("phase", 0.0))
        return a * np.sin(np.pi * freq * xi + phase)
    if fam == "gaussian":
        a = float(spec.get("amplitude", 1.0))
        c = float(spec.get("center", 0.5))
        w = float(spec.get("width", 0.1))
        if w <= 0:
            raise ConfigurationError("gaussian width must be positive")
        return a * np.exp(-0.5 * ((xi - c) / w) ** 2)
    if fam == "polynomial":
        coeffs = spec.get("coefficients")
        if not coeffs:
            raise ConfigurationError("polynomial profile needs coefficients")
        return np.polynomial.polynomial.polyval(xi, np.asarray(coeffs, dtype=float))
    if fam == "constant":
        return np.full_like(xi, float(spec.get("value", 0.0)))
    raise ConfigurationError(f"unknown profile family {fam!r}")


class RunSetup:
    """Validated objects built from one config document."""

    def __init__(self, config: dict):
        self.config = config
        dom_conf = config.get("domain")
        if not isinstance(dom_conf, dict):
            raise ConfigurationError("config needs a 'domain' object with k and T")
        k = float(dom_conf.get("k", 0.0))
        T = float(dom_conf.get("T", 0.0))
        allow0 = bool(dom_conf.get("allow_k_zero", False))
        report = check_admissible(k, T, allow_k_zero=allow0)
        if report.hard_error:
            raise ConfigurationError(report.hard_error)
        self.adm_report = report
        self.domain = DomainSpec(k=k, T=T, allow_k_zero=allow0)

        grid_conf = config.get("grid", {})
        Ny = int(grid_conf.get("Ny", 41))
        cfl = float(grid_conf.get("cfl_safety", 0.8))
        Nt = grid_conf.get("Nt")
        if Nt is None:
            self.mesh = Mesh.auto(self.domain, Ny, cfl)
        else:
            self.mesh = Mesh(self.domain, GridSpec(Ny=Ny, Nt=int(Nt), cfl_safety=cfl))
            self.mesh.require_cfl()

        part_conf = config.get("partition", {"mode": "overlap"})
        mode = part_conf.get("mode", "overlap")
        n_nodes = self.mesh.Nt + 1
        if mode == "overlap":
            self.partition = SigmaPartition.overlap(n_nodes)
        elif mode == "time-split":
            self.partition = SigmaPartition.time_split(
                n_nodes, float(part_conf.get("split_fraction", 0.5))
            )
        else:
            raise ConfigurationError(f"unknown partition mode {mode!r}")

        self.seed = int(config.get("seed", 0))
        self.delta = float(config.get("delta", 0.0))
        self.warnings = list(report.warnings)
        if mode == "time-split":
            self.warnings.append("time_split_experimental")

        fol = config.get("follower", {})
        pic = fol.get("picard", {})
        picard = PicardOptions(
            max_iters=int(pic.get("max_iters", 600)),
            tol=float(pic.get("tol", 1e-11)),
            relaxation=float(pic.get("relaxation", 1.0)),
            min_relaxation=float(pic.get("min_relaxation", 0.125)),
            allow_fallback=bool(pic.get("allow_fallback", True)),
        )
        self.follower = FollowerConfig(
            sigma=float(fol.get("sigma", 1.0)),
            partition=self.partition,
            u_tilde2=self._build_field(fol.get("u_tilde2")),
            picard=picard,
        )

    # -- builders ------------------------------------------------------------

    def _build_field(self, spec) -> Field | None:
        if spec is None:
            return None
        if "csv" in spec:
            return load_field_csv(spec["csv"], self.mesh)
        space = eval_profile(spec.get("space", {"family": "constant", "value": 1.0}), self.mesh.y)
        time = eval_profile(
            spec.get("time", {"family": "constant", "value": 1.0}),
            self.mesh.times / self.domain.T,
        )
        return Field(np.outer(space, time), self.mesh)

    def build_time_trace(self, spec, mask) -> Trace:
        if spec is None:
            raise ConfigurationError("missing control profile")
        if "csv" in spec:
            return load_trace_csv(spec["csv"], self.mesh, mask)
        vals = eval_profile(spec, self.mesh.times / self.domain.T)
        return Trace(vals, mask, self.mesh)

    def build_space_profile(self, spec, time: float) -> SpatialProfile:
        if "csv" in spec:
            return load_profile_csv(spec["csv"], self.mesh, time)
        vals = eval_profile(spec, self.mesh.y)
        return SpatialProfile(vals, time, self.mesh)

    def build_targets(self) -> TargetSpec:
        tg = self.config.get("targets")
        if not isinstance(tg, dict):
            raise ConfigurationError("config needs a 'targets' object for leader runs")
        T = self.domain.T
        u0 = self.build_space_profile(tg["u0"], T)
        u1 = self.build_space_profile(tg["u1"], T)
        return TargetSpec(u0, u1, float(tg["rho0"]), float(tg["rho1"]))

    def dual_options(self, seed: int | None = None) -> DualOptions:
        opt = self.config.get("optimizer", {})
        return DualOptions(
            max_iters=int(opt.get("max_iters", 20000)),
            tol_vi=float(opt.get("tol_vi", 1e-6)),
            grad_tol=float(opt.get("grad_tol", 1e-10)),
            vi_samples=int(opt.get("vi_samples", 100)),
            seed=self.seed if seed is None else seed,
            polish=bool(opt.get("polish", True)),
        )

    def header(self) -> dict:
        return {
            "config_hash": _config_hash(self.config),
            "seed": self.seed,
            "grid": f"Ny={self.mesh.Ny} Nt={self.mesh.Nt} k={self.domain.k} T={self.domain.T}",
            "warnings": ";".join(self.warnings) or "none",
        }


def _write_summary(out_dir: Path, name: str, header: dict, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"header": header, **payload}
    (out_dir / name).write_text(json.dumps(doc, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(config: dict, out_dir: Path) -> int:
    setup = RunSetup(config)
    header = setup.header()
    control = setup.build_time_trace(
        config.get("control"), np.ones(setup.mesh.Nt + 1, dtype=bool)
    )
    problem = WaveProblem(direction="forward", bc0=control)
    field = solve_forward(problem)
    observation = trace_normal_derivative(field, side="y=0")
    save_field_csv(out_dir / "field.csv", field, header)
    save_trace_csv(out_dir / "trace.csv", observation, header)
    _write_summary(
        out_dir,
        "summary.json",
        header,
        {
            "command": "simulate",
            "field_max_abs": float(np.max(np.abs(field.values))),
        },
    )
    return EXIT_OK


def cmd_nash(config: dict, out_dir: Path) -> int:
    setup = RunSetup(config)
    header = setup.header()
    w1 = setup.build_time_trace(config.get("leader"), setup.partition.mask1)
    sol = solve_nash_system(w1, setup.follower)
    rng = np.random.default_rng(setup.seed)
    el_samples = []
    for _ in range(8):
        direction = Trace(
            rng.standard_normal(setup.mesh.Nt + 1), setup.partition.mask2, setup.mesh
        )
        el_samples.append(euler_lagrange_residual(sol, w1, setup.follower, direction))
    save_field_csv(out_dir / "u.csv", sol.u, header)
    save_field_csv(out_dir / "p.csv", sol.p, header)
    save_trace_csv(out_dir / "w2.csv", sol.w2, header)
    save_profile_csv(out_dir / "u_T.csv", final_value_profile(sol.u), header)
    save_profile_csv(out_dir / "ut_T.csv", final_velocity_profile(sol.u), header)
    _write_summary(
        out_dir,
        "summary.json",
        header,
        {
            "command": "nash",
            "J2": cost_J2(sol.u, sol.w2, setup.follower),
            "J": cost_J(w1),
            "el_residual_max_abs": float(np.max(np.abs(el_samples))),
            "iterations": sol.iterations,
            "method": sol.method,
            "residual_tail": sol.residual_history[-5:],
        },
    )
    return EXIT_OK


def cmd_leader(config: dict, out_dir: Path) -> int:
    setup = RunSetup(config)
    header = setup.header()
    targets = setup.build_targets()
    f_star, w1_star, report = minimize_dual(
        targets, setup.follower, setup.delta, setup.dual_options()
    )
    save_trace_csv(out_dir / "w1_star.csv", w1_star, header)
    save_profile_csv(out_dir / "f0.csv", f_star.f0, header)
    save_profile_csv(out_dir / "f1.csv", f_star.f1, header)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps({"header": header, **json.loads(report.to_json())}, indent=2, sort_keys=True)
    )
    with open(out_dir / "history.csv", "w") as fh:
        for key, val in header.items():
            fh.write(f"# {key}: {val}\n")
        fh.write("iter,dual_value,vi_residual,dist_L2,dist_Hm1\n")
        for row in report.history:
            fh.write(
                f"{row['iter']},{row['dual_value']:.17g},{row['vi_residual']:.17g},"
                f"{row['dist_L2']:.17g},{row['dist_Hm1']:.17g}\n"
            )
    return EXIT_OK if report.certified else EXIT_UNCERTIFIED


def cmd_verify(level: str, out_dir: Path, seed: int = 0) -> int:
    report = run_verification(level, seed=seed)
    write_verification_report(report, out_dir / "verification_report.json")
    for check in report["checks"]:
        status = "pass" if check["passed"] else "FAIL"
        print(f"[{status}] {check['name']}: metric={check['metric']:.3e}")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_threshold(k_values: list[float], out_dir: Path | None) -> int:
    rows = []
    for k in k_values:
        t_min = min_control_time(float(k))
        rows.append((float(k), t_min))
        print(f"k={k:g}  T_min={t_min:.6g}")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "threshold.csv", "w") as fh:
            fh.write("k,T_min\n")
            for k, t_min in rows:
                fh.write(f"{k:.17g},{t_min:.17g}\n")
    return EXIT_OK


def _sweep_cells(config: dict) -> list[dict]:
    sw = config.get("sweep")
    if not isinstance(sw, dict):
        raise ConfigurationError("config needs a 'sweep' object")
    ks = [float(v) for v in sw.get("k", [config.get("domain", {}).get("k", 0.1)])]
    Ts = [float(v) for v in sw.get("T", [config.get("domain", {}).get("T", 4.0)])]
    sigmas = [float(v) for v in sw.get("sigma", [config.get("follower", {}).get("sigma", 1.0)])]
    rhos = [float(v) for v in sw.get("rho_rel", [0.05])]
    cells = []
    for k in ks:
        for T in Ts:
            for sig in sigmas:
                for rho in rhos:
                    cells.append({"k": k, "T": T, "sigma": sig, "rho_rel": rho})
    return cells


def _run_sweep_cell(args: tuple) -> tuple[int, dict]:
    """One leader run on manufactured targets; executed possibly in a worker."""
    index, config, cell = args
    cell_config = json.loads(json.dumps(config))
    cell_config.setdefault("domain", {})
    cell_config["domain"]["k"] = cell["k"]
    cell_config["domain"]["T"] = cell["T"]
    cell_config.setdefault("follower", {})["sigma"] = cell["sigma"]
    cell_config["seed"] = int(config.get("seed", 0)) + index
    setup = RunSetup(cell_config)
    ref_spec = config["sweep"].get(
        "reference_control",
        {"family": "gaussian", "amplitude": 1.0, "center": 0.4, "width": 0.15},
    )
    w1_ref = setup.build_time_trace(ref_spec, setup.partition.mask1)
    sol_ref = solve_nash_system(w1_ref, setup.follower)
    u_T = final_value_profile(sol_ref.u)
    ut_T = final_velocity_profile(sol_ref.u)
    rho0 = cell["rho_rel"] * max(l2_norm_physical(u_T), 1e-12)
    rho1 = cell["rho_rel"] * max(hminus1_norm_physical(ut_T), 1e-12)
    targets = TargetSpec(u_T, ut_T, rho0, rho1)
    _, w1_star, report = minimize_dual(
        targets, setup.follower, setup.delta, setup.dual_options(seed=cell_config["seed"])
    )
    result = {
        **cell,
        "J": report.primal_J,
        "reached0": int(report.reached[0]),
        "reached1": int(report.reached[1]),
        "gap": report.gap,
        "iterations": report.iterations,
        "certified": int(report.certified),
    }
    return index, result


def cmd_sweep(config: dict, out_dir: Path, workers: int = 1) -> int:
    cells = _sweep_cells(config)
    jobs = [(i, config, cell) for i, cell in enumerate(cells)]
    results: dict[int, dict] = {}
    if workers <= 1:
        for job in jobs:
            idx, res = _run_sweep_cell(job)
            results[idx] = res
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            for idx, res in pool.map(_run_sweep_cell, jobs):
                results[idx] = res
    header = {
        "config_hash": _config_hash(config),
        "seed": int(config.get("seed", 0)),
        "cells": len(cells),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ["k", "T", "sigma", "rho_rel", "J", "reached0", "reached1", "gap", "iterations", "certified"]
    with open(out_dir / "sweep.csv", "w") as fh:
        for key, val in header.items():
            fh.write(f"# {key}: {val}\n")
        fh.write(",".join(columns) + "\n")
        for i in range(len(cells)):
            row = results[i]
            fh.write(",".join(f"{row[c]:.17g}" if isinstance(row[c], float) else str(row[c]) for c in columns) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierwave", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("simulate", "nash", "leader", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default="runs/" + name, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        if name == "sweep":
            p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("verify")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.add_argument("--out", default="runs/verify")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("threshold")
    p.add_argument("--k", type=float, nargs="+", required=True)
    p.add_argument("--out", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.level, Path(args.out), seed=args.seed)
        if args.command == "threshold":
            out = Path(args.out) if args.out else None
            return cmd_threshold(args.k, out)
        config = load_config(args.config)
        if args.seed is not None:
            config["seed"] = args.seed
        out_dir = Path(args.out)
        if args.command == "simulate":
            return cmd_simulate(config, out_dir)
        if args.command == "nash":
            return cmd_nash(config, out_dir)
        if args.command == "leader":
            return cmd_leader(config, out_dir)
        if args.command == "sweep":
            return cmd_sweep(config, out_dir, workers=args.workers)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (InstabilityError, ConvergenceError) as err:
        print(f"solver error: {err}", file=sys.stderr)
        if isinstance(err, ConvergenceError) and err.residual_history:
            tail = ", ".join(f"{r:.3e}" for r in err.residual_history[-5:])
            print(f"residual history (tail): {tail}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    raise SystemExit(main())
