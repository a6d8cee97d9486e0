"""Reproduction harness: experiment definitions, error norms, convergence
sweeps, long-time conservation runs, and CSV/JSON emission.

The five benchmark experiments, their exact solutions and per-experiment
time-step rules are encoded here; every exact solution passes its
finite-difference PDE probe (see exact.py) before being used as a
convergence reference.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .coredg import DofVector, basis_table, build_mesh, gauss_rule, l2_project
from . import exact
from .gkdv import (GkdvProblem, GkdvState, init_aux, invariants_gkdv,
                   step_irk4, step_midpoint)
from .hskdv import (HskdvProblem, HskdvState, init_aux_hs, invariants_hs,
                    step_hs)
from .newton import NewtonConfig, NewtonError

__all__ = [
    "ExperimentSpec",
    "ConvergenceTable",
    "TimeSeries",
    "exact_solution",
    "manufactured_source",
    "l2_error",
    "default_dt",
    "residual_probe",
    "run_trajectory",
    "run_convergence",
    "run_conservation",
    "SCALAR_FIELDS",
    "SYSTEM_FIELDS",
]

SCALAR_FIELDS = ("u", "q", "p")
SYSTEM_FIELDS = ("u", "q", "p", "v", "w", "r")

PROBE_TOL = 1e-6
# FD probe spacings tuned per experiment (round-off vs truncation balance)
_PROBE_STEPS = {"exp1": 5e-3, "exp2": 1e-3, "exp3": 2e-4, "exp4": 1e-3, "exp5": 5e-3}


@dataclass
class ExperimentSpec:
    """One experiment configuration; defaults follow the benchmark setups."""

    id: str
    k: tuple[int, ...] = (2,)
    N_list: tuple[int, ...] = (8, 16, 32, 64)
    dt: Optional[float] = None          # explicit override of the dt rule
    dt_rule: str = "paper"
    T: float = 0.1
    scheme: str = "irk4"
    epsilon: Optional[float] = None     # exp2 parameter (exp1/exp3 are fixed)
    a: Optional[float] = None
    b: Optional[float] = None
    m: float = 0.9
    lam: float = 0.5
    x0: float = 0.0
    out_prefix: str = "out"
    snap_every: int = 0                 # run: snapshot stride; conserve: sample stride
    tau_mode: str = "per_stage"
    xi_phase: str = "inv_2log"

    def __post_init__(self):
        if self.id not in exact.EXPERIMENT_IDS:
            raise ValueError(f"unknown experiment id {self.id!r}")
        if self.scheme not in ("irk4", "midpoint"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if isinstance(self.k, int):
            self.k = (self.k,)
        self.k = tuple(int(kk) for kk in self.k)
        self.N_list = tuple(int(n) for n in self.N_list)
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.T <= 0:
            raise ValueError("T must be positive")

    @property
    def is_system(self) -> bool:
        return self.id in ("exp4", "exp5")

    @property
    def fields(self) -> tuple[str, ...]:
        return SYSTEM_FIELDS if self.is_system else SCALAR_FIELDS

    def canonical_text(self) -> str:
        items = sorted(self.__dict__.items())
        return "\n".join(f"{k} = {v}" for k, v in items)

    def spec_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# experiment wiring
# --------------------------------------------------------------------------

def _exp_params(spec: ExperimentSpec) -> dict:
    p = {}
    if spec.id == "exp1":
        p["epsilon"] = 1.0
        p["domain"] = (0.0, 4.0 * math.pi)
    elif spec.id == "exp2":
        p["epsilon"] = 1.0 if spec.epsilon is None else float(spec.epsilon)
        p["domain"] = (0.0, 1.0)
    elif spec.id == "exp3":
        p["epsilon"] = 1.0 / 576.0 if spec.epsilon is None else float(spec.epsilon)
        p["domain"] = (0.0, 1.0)
        p["m"] = spec.m
        p["x0"] = spec.x0
    elif spec.id == "exp4":
        p["a"] = 1.0 if spec.a is None else float(spec.a)
        p["b"] = 1.0 if spec.b is None else float(spec.b)
        p["domain"] = (0.0, 1.0)
    else:  # exp5
        p["a"] = -0.125 if spec.a is None else float(spec.a)
        p["b"] = -3.0 if spec.b is None else float(spec.b)
        p["lam"] = spec.lam
        p["xi_phase"] = spec.xi_phase
        p["domain"] = (-50.0, 50.0)
    return p


def exact_solution(spec: ExperimentSpec, x, t):
    """Exact field values at (x, t): u for scalar experiments, (u, v) for
    the coupled ones."""
    p = _exp_params(spec)
    if spec.id == "exp1":
        return exact.exp1_exact(x, t)
    if spec.id == "exp2":
        return exact.exp2_exact(x, t)
    if spec.id == "exp3":
        return exact.exp3_exact(x, t, p["epsilon"], p["m"], p["x0"])
    if spec.id == "exp4":
        return exact.exp4_exact(x, t)
    return exact.exp5_exact(x, t, p["a"], p["b"], p["lam"], p["xi_phase"])


def manufactured_source(spec: ExperimentSpec, x, t):
    """Source values at (x, t) for the forced experiments (exp2, exp4)."""
    p = _exp_params(spec)
    if spec.id == "exp2":
        return exact.exp2_source(p["epsilon"])(x, t)
    if spec.id == "exp4":
        g1, g2 = exact.exp4_sources(p["a"], p["b"])
        return g1(x, t), g2(x, t)
    raise ValueError(f"experiment {spec.id} has no manufactured source")


def build_problem(spec: ExperimentSpec):
    """GkdvProblem or HskdvProblem for the experiment."""
    p = _exp_params(spec)
    if spec.id == "exp1":
        return GkdvProblem(epsilon=1.0, flux="linear", domain=p["domain"],
                           initial=lambda x: exact.exp1_exact(x, 0.0))
    if spec.id == "exp2":
        eps = p["epsilon"]
        return GkdvProblem(epsilon=eps, flux="burgers", domain=p["domain"],
                           initial=lambda x: exact.exp2_exact(x, 0.0),
                           source=exact.exp2_source(eps))
    if spec.id == "exp3":
        eps, m, x0 = p["epsilon"], p["m"], p["x0"]
        return GkdvProblem(epsilon=eps, flux="burgers", domain=p["domain"],
                           initial=lambda x: exact.exp3_exact(x, 0.0, eps, m, x0))
    if spec.id == "exp4":
        a, b = p["a"], p["b"]
        return HskdvProblem(a=a, b=b, domain=p["domain"],
                            initial=(lambda x: exact.exp4_exact(x, 0.0)[0],
                                     lambda x: exact.exp4_exact(x, 0.0)[1]),
                            sources=exact.exp4_sources(a, b))
    a, b, lam, xp = p["a"], p["b"], p["lam"], p["xi_phase"]
    return HskdvProblem(a=a, b=b, domain=p["domain"],
                        initial=(lambda x: exact.exp5_exact(x, 0.0, a, b, lam, xp)[0],
                                 lambda x: exact.exp5_exact(x, 0.0, a, b, lam, xp)[1]))


def residual_probe(spec: ExperimentSpec) -> float:
    """Finite-difference PDE residual of the experiment's closed form."""
    p = _exp_params(spec)
    h = _PROBE_STEPS[spec.id]
    if spec.id in ("exp1", "exp2", "exp3"):
        prob = build_problem(spec)
        u = lambda x, t: exact_solution(spec, x, t)
        return exact.gkdv_residual_probe(u, prob.epsilon, prob.flux.f, prob.source,
                                         p["domain"], hx=h, ht=h)
    u = lambda x, t: exact_solution(spec, x, t)[0]
    v = lambda x, t: exact_solution(spec, x, t)[1]
    sources = exact.exp4_sources(p["a"], p["b"]) if spec.id == "exp4" else None
    return exact.hskdv_residual_probe(u, v, p["a"], p["b"], sources, p["domain"],
                                      hx=h, ht=h)


def default_dt(spec: ExperimentSpec, k: int, h: float) -> float:
    """Per-experiment time-step rules (overridden by an explicit dt)."""
    if spec.dt is not None:
        return float(spec.dt)
    if spec.id in ("exp1", "exp2"):
        return 0.2 * h if k <= 2 else 4.0 * h * h
    if spec.id == "exp3":
        if k in (0, 2):
            return 0.2 * h
        if k == 1:
            return 0.04 * h
        return 0.01
    if spec.id == "exp4":
        if k == 0:
            return 0.2 * h
        if k == 1:
            return 0.04
        return 0.01
    return 0.01  # exp5


# --------------------------------------------------------------------------
# error norms
# --------------------------------------------------------------------------

def l2_error(u_h: DofVector, exact_fn: Callable, t: float) -> float:
    """Broken L2 error against a callable exact(x, t), integrated with a rule
    over-resolved by 4 points beyond the assembly rule (avoids flattering
    aliasing in reported errors)."""
    mesh, k = u_h.mesh, u_h.k
    rule = gauss_rule(2 * (k + 1) + 4)
    table = basis_table(k, rule)
    xq = mesh.centers[:, None] + 0.5 * mesh.h[:, None] * rule.points[None, :]
    vals = u_h.coeffs @ table.values.T
    diff = vals - exact_fn(xq, t)
    err2 = np.sum(0.5 * mesh.h[:, None] * diff * diff * rule.weights[None, :])
    return float(np.sqrt(err2))


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

@dataclass
class TrajectoryResult:
    spec_id: str
    k: int
    N: int
    t_final: float
    errors: dict           # field -> L2 error at t_final
    state: object          # final GkdvState / HskdvState
    steps: int


def _march(spec: ExperimentSpec, k: int, N: int,
           callback: Optional[Callable] = None,
           newton_cfg: Optional[NewtonConfig] = None):
    problem = build_problem(spec)
    mesh = build_mesh(problem.domain[0], problem.domain[1], N)
    h = (problem.domain[1] - problem.domain[0]) / N
    dt = default_dt(spec, k, h)
    if spec.is_system:
        state = init_aux_hs(l2_project(problem.initial[0], mesh, k),
                            l2_project(problem.initial[1], mesh, k), problem)
        stepper = lambda s, d: step_hs(s, problem, d, scheme=spec.scheme,
                                       newton_cfg=newton_cfg, tau_mode=spec.tau_mode)
    else:
        state = init_aux(l2_project(problem.initial, mesh, k), problem)
        if spec.scheme == "irk4":
            stepper = lambda s, d: step_irk4(s, problem, d, newton_cfg=newton_cfg,
                                             tau_mode=spec.tau_mode)
        else:
            stepper = lambda s, d: step_midpoint(s, problem, d, newton_cfg=newton_cfg)
    if callback is not None:
        callback(state, 0, problem)
    steps = 0
    while state.t < spec.T - 1e-12:
        state = stepper(state, min(dt, spec.T - state.t))
        steps += 1
        if callback is not None:
            callback(state, steps, problem)
    return state, problem, steps


def exact_fields(spec: ExperimentSpec) -> dict:
    """Closed-form references for every solved field of the experiment."""
    p = _exp_params(spec)
    if spec.id == "exp1":
        return exact.exp1_fields()
    if spec.id == "exp2":
        return exact.exp2_fields(p["epsilon"])
    if spec.id == "exp3":
        return exact.exp3_fields(p["epsilon"], p["m"], p["x0"])
    if spec.id == "exp4":
        return exact.exp4_fields()
    return exact.exp5_fields(p["a"], p["b"], p["lam"], p["xi_phase"])


def run_trajectory(spec: ExperimentSpec, k: int, N: int,
                   newton_cfg: Optional[NewtonConfig] = None) -> TrajectoryResult:
    """Run one (k, N) member to T and measure per-field L2 errors."""
    state, problem, steps = _march(spec, k, N, newton_cfg=newton_cfg)
    refs = exact_fields(spec)
    errors = {name: l2_error(getattr(state, name), refs[name], state.t)
              for name in spec.fields}
    return TrajectoryResult(spec_id=spec.id, k=k, N=N, t_final=state.t,
                            errors=errors, state=state, steps=steps)


# --------------------------------------------------------------------------
# convergence tables
# --------------------------------------------------------------------------

@dataclass
class ConvergenceTable:
    spec: ExperimentSpec
    fields: tuple[str, ...]
    rows: list = field(default_factory=list)    # dicts: k, N, err_<f>, ord_<f>
    wall_time: float = 0.0
    partial: bool = False

    def header(self) -> list[str]:
        cols = ["k", "N"]
        for f in self.fields:
            cols += [f"err_{f}", f"ord_{f}"]
        return cols

    def to_csv(self, path) -> None:
        lines = [",".join(self.header())]
        for row in self.rows:
            cells = [str(row["k"]), str(row["N"])]
            for f in self.fields:
                cells.append("%.6e" % row[f"err_{f}"])
                o = row[f"ord_{f}"]
                cells.append("" if o is None else "%.6e" % o)
            lines.append(",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n", newline="\n")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.rows, indent=1) + "\n", newline="\n")

    def formatted(self) -> str:
        out = ["k    N    " + "".join(f"{'err_' + f:>13}{'ord_' + f:>8}"
                                      for f in self.fields)]
        for row in self.rows:
            cells = f"{row['k']:<4} {row['N']:<5}"
            for f in self.fields:
                o = row[f"ord_{f}"]
                cells += f"{row['err_' + f]:>13.3e}" + (f"{o:>8.2f}" if o is not None else "      --")
            out.append(cells)
        return "\n".join(out)


def _member(args):
    spec, k, N = args
    res = run_trajectory(spec, k, N)
    return k, N, res.errors


def run_convergence(spec: ExperimentSpec, workers: int = 1) -> ConvergenceTable:
    """Run the (k, N) sweep and fill L2 errors and observed orders
    (order = log2 of the error ratio under mesh doubling)."""
    import time as _time
    t0 = _time.perf_counter()
    table = ConvergenceTable(spec=spec, fields=spec.fields)
    jobs = [(spec, k, N) for k in spec.k for N in spec.N_list]
    results = {}
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for k, N, errs in pool.map(_member, jobs):
                    results[(k, N)] = errs
        else:
            for job in jobs:
                k, N, errs = _member(job)
                results[(k, N)] = errs
    except NewtonError:
        table.partial = True
    for k in spec.k:
        prev = None
        for N in spec.N_list:
            if (k, N) not in results:
                continue
            errs = results[(k, N)]
            row = {"k": k, "N": N}
            for f in spec.fields:
                row[f"err_{f}"] = errs[f]
                row[f"ord_{f}"] = (None if prev is None
                                   else math.log2(prev[f] / errs[f]))
            table.rows.append(row)
            prev = errs
    table.wall_time = _time.perf_counter() - t0
    if table.partial and not table.rows:
        raise NewtonError(f"no convergence member of {spec.id} completed")
    return table


# --------------------------------------------------------------------------
# conservation runs
# --------------------------------------------------------------------------

@dataclass
class TimeSeries:
    spec: ExperimentSpec
    times: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    hamiltonian: list = field(default_factory=list)
    failed: bool = False

    def deviations(self):
        m0, e0, h0 = self.mass[0], self.energy[0], self.hamiltonian[0]
        return ([m - m0 for m in self.mass],
                [e - e0 for e in self.energy],
                [h - h0 for h in self.hamiltonian])

    def to_csv(self, path) -> None:
        dm, de, dh = self.deviations()
        lines = ["t,mass,energy,hamiltonian,dmass,denergy,dhamiltonian"]
        for i, t in enumerate(self.times):
            lines.append(",".join("%.6e" % v for v in
                                  (t, self.mass[i], self.energy[i],
                                   self.hamiltonian[i], dm[i], de[i], dh[i])))
        Path(path).write_text("\n".join(lines) + "\n", newline="\n")

    def to_json(self, path) -> None:
        dm, de, dh = self.deviations()
        rows = [dict(t=self.times[i], mass=self.mass[i], energy=self.energy[i],
                     hamiltonian=self.hamiltonian[i], dmass=dm[i], denergy=de[i],
                     dhamiltonian=dh[i]) for i in range(len(self.times))]
        Path(path).write_text(json.dumps(rows, indent=1) + "\n", newline="\n")


def run_conservation(spec: ExperimentSpec, k: Optional[int] = None,
                     N: Optional[int] = None,
                     newton_cfg: Optional[NewtonConfig] = None) -> TimeSeries:
    """Evolve one trajectory to T recording (mass, energy, hamiltonian) every
    `snap_every` steps (default every step); on a solver failure the series
    collected so far is returned with failed=True."""
    k = spec.k[0] if k is None else k
    N = spec.N_list[0] if N is None else N
    stride = max(1, spec.snap_every)
    series = TimeSeries(spec=spec)

    def cb(state, step, problem):
        if step % stride and step != 0:
            return
        if spec.is_system:
            m, e, h = invariants_hs(state, problem)
        else:
            m, e, h = invariants_gkdv(state, problem)
        series.times.append(state.t)
        series.mass.append(m)
        series.energy.append(e)
        series.hamiltonian.append(h)

    try:
        _march(spec, k, N, callback=cb, newton_cfg=newton_cfg)
    except NewtonError:
        series.failed = True
    return series


# --------------------------------------------------------------------------
# single run with snapshots
# --------------------------------------------------------------------------

def run_single(spec: ExperimentSpec, out_dir, k: Optional[int] = None,
               N: Optional[int] = None) -> TrajectoryResult:
    """One trajectory writing field snapshots (x, u[, v]) every snap_every
    steps, sampled at 4(k+1) points per element."""
    k = spec.k[0] if k is None else k
    N = spec.N_list[0] if N is None else N
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stride = spec.snap_every
    snap_idx = [0]

    xi = np.linspace(-1.0, 1.0, 4 * (k + 1))

    def write_snap(state):
        mesh = state.u.mesh
        xs = (mesh.centers[:, None] + 0.5 * mesh.h[:, None] * xi[None, :]).ravel()
        cols = [xs, state.u.evaluate(xs)]
        header = "x,u"
        if spec.is_system:
            cols.append(state.v.evaluate(xs))
            header += ",v"
        lines = [header]
        for vals in zip(*cols):
            lines.append(",".join("%.6e" % v for v in vals))
        path = out_dir / f"{spec.out_prefix}_snap{snap_idx[0]:05d}.csv"
        path.write_text("\n".join(lines) + "\n", newline="\n")
        snap_idx[0] += 1

    def cb(state, step, problem):
        if stride and step % stride == 0:
            write_snap(state)

    result = run_trajectory_with_callback(spec, k, N, cb)
    return result


def run_trajectory_with_callback(spec: ExperimentSpec, k: int, N: int,
                                 callback) -> TrajectoryResult:
    state, problem, steps = _march(spec, k, N, callback=callback)
    return TrajectoryResult(spec_id=spec.id, k=k, N=N, t_final=state.t,
                            errors={}, state=state, steps=steps)
