"""Fast property suite behind `kdvconserve selftest`: one PASS/FAIL line per
invariant of the core modules, exit 0 iff everything holds."""

from __future__ import annotations

import math

import numpy as np

from .coredg import (DofVector, build_mesh, gauss_rule, get_discretization,
                     interface_identity_check, l2_project, trace_values)
from .elliptic import elliptic_K, jacobi_sn_cn_dn
from .exact import exp3_exact, gkdv_residual_probe
from .gkdv import (GkdvProblem, constraint_residuals, energy_condition_defect,
                   init_aux, invariants_gkdv, semidiscrete_residual, step_irk4)
from .hskdv import (HskdvProblem, constraint_residuals_hs,
                    hamiltonian_condition_defect_hs, energy_condition_defect_hs,
                    init_aux_hs, lemma_S_check, projection_remainder, theta)
from .newton import NewtonConfig, fd_jacobian, newton_solve


def _checks():
    rng = np.random.default_rng(2024)

    # quadrature exactness to degree 4k+3
    k = 3
    rule = gauss_rule(2 * (k + 1))
    worst = max(abs(float(np.sum(rule.weights * rule.points**d))
                    - (2.0 / (d + 1) if d % 2 == 0 else 0.0))
                for d in range(4 * k + 4))
    yield "quadrature exact to degree 4k+3", worst, 1e-13

    # projection idempotence
    mesh = build_mesh(0.0, 1.0, 12)
    disc = get_discretization(mesh, 3)
    f = disc.dof(rng.standard_normal((12, 4)))
    again = disc.project_values(disc.eval_quad(f.flat))
    yield "projection idempotence", float(np.abs(again.ravel() - f.flat).max()), 1e-13

    # interface identity, 100 random pairs
    worst = 0.0
    for _ in range(100):
        rho = disc.dof(rng.standard_normal((12, 4)))
        v = disc.dof(rng.standard_normal((12, 4)))
        worst = max(worst, interface_identity_check(rho, v))
    yield "interface identity (100 pairs)", worst, 1e-12

    # mass matrix symmetric positive definite
    M = disc.ops.M.toarray()
    np.linalg.cholesky(M)
    yield "mass matrix SPD + symmetric", float(np.abs(M - M.T).max()), 0.0

    # operator antisymmetry with central traces
    x, y = rng.standard_normal(disc.ndof), rng.standard_normal(disc.ndof)
    G = disc.G
    yield "operator duality", abs(float(y @ (G @ x) + x @ (G @ y))), 1e-12

    # Newton quadratic convergence on x^2 - 4
    sol, rep = newton_solve(lambda z: np.array([z[0] ** 2 - 4.0]), np.array([3.0]),
                            NewtonConfig(), jacobian=lambda z: np.array([[2.0 * z[0]]]))
    yield "newton quadratic root", abs(sol[0] - 2.0), 1e-12

    # elliptic identities
    yield "K(0) = pi/2", abs(elliptic_K(0.0) - math.pi / 2.0), 1e-15
    K9 = elliptic_K(0.9)
    z = np.linspace(-4 * K9, 4 * K9, 257)
    sn, cn, _ = jacobi_sn_cn_dn(z, 0.9)
    yield "cn^2 + sn^2 = 1 (m=0.9)", float(np.abs(cn**2 + sn**2 - 1).max()), 1e-11
    yield "cn periodicity 4K", float(np.abs(jacobi_sn_cn_dn(z + 4 * K9, 0.9)[1] - cn).max()), 1e-10

    # cnoidal closed form satisfies the KdV equation
    probe = gkdv_residual_probe(lambda x_, t_: exp3_exact(x_, t_), 1.0 / 576.0,
                                lambda u: 0.5 * u * u, None, (0.0, 1.0),
                                hx=2e-4, ht=2e-4)
    yield "cnoidal PDE residual probe", probe, 1e-6

    # gkdv: constants steady, constraints after init, condition consistency
    prob = GkdvProblem(epsilon=0.7, flux="burgers", domain=(0.0, 1.0),
                       initial=lambda x_: 1.5 + 0.0 * x_)
    st = init_aux(l2_project(prob.initial, build_mesh(0.0, 1.0, 6), 2), prob)
    yield "gkdv constants steady", float(np.abs(semidiscrete_residual(st, prob)).max()), 1e-9

    prob1 = GkdvProblem(epsilon=1.0, flux="linear", domain=(0.0, 4 * math.pi),
                        initial=lambda x_: np.sin(0.5 * x_))
    st1 = init_aux(l2_project(prob1.initial, build_mesh(0.0, 4 * math.pi, 16), 2), prob1)
    rE, rH = constraint_residuals(st1, prob1)
    yield "gkdv init constraints", max(abs(rE), abs(rH)), 1e-11
    yield "gkdv energy-condition consistency", energy_condition_defect(st1, prob1), 1e-12

    # gkdv stage jacobian vs finite differences (small system)
    from .gkdv import _stage_system, _work as _gwork, GAUSS2
    dsm = get_discretization(build_mesh(0.0, 1.0, 3), 1)
    prob_s = GkdvProblem(epsilon=0.3, flux="burgers", domain=(0.0, 1.0),
                         initial=np.sin, source=lambda x_, t_: np.cos(x_ + t_))
    res, jac, *_4 = _stage_system(_gwork(dsm, prob_s), rng.standard_normal(dsm.ndof),
                                  0.1, 0.05, GAUSS2[0], GAUSS2[1], "per_stage")
    zz = 0.5 * rng.standard_normal(3 * 2 * dsm.ndof)
    J_an = jac(zz).toarray()
    J_fd = fd_jacobian(res, zz, 1e-6)
    yield "gkdv jacobian vs FD", float(np.abs(J_an - J_fd).max() / np.abs(J_fd).max()), 1e-5

    # one IRK4 step conserves all three invariants
    dt = 0.2 * (4 * math.pi / 16)
    st2 = step_irk4(st1, prob1, dt)
    m0, e0, h0 = invariants_gkdv(st1, prob1)
    m1, e1, h1 = invariants_gkdv(st2, prob1)
    drift = max(abs(m1 - m0) / (1 + abs(m0)), abs(e1 - e0) / (1 + abs(e0)),
                abs(h1 - h0) / (1 + abs(h0)))
    yield "gkdv one-step conservation", drift, 1e-12

    # hskdv: theta symmetry/trilinearity, R_Pi at k=0, lemma identity
    d2 = get_discretization(build_mesh(0.0, 1.0, 5), 2)
    mk = lambda: d2.dof(rng.standard_normal((5, 3)))
    xf, yf, zf = mk(), mk(), mk()
    yield "theta symmetric in (y, z)", float(np.abs(theta(xf, yf, zf) - theta(xf, zf, yf)).max()), 0.0
    yield "theta trilinear", float(np.abs(theta(3.0 * xf, yf, zf) - 3.0 * theta(xf, yf, zf)).max()), 1e-12

    d0 = get_discretization(build_mesh(0.0, 1.0, 5), 0)
    yield "R_Pi vanishes for k=0", abs(projection_remainder(
        d0, rng.standard_normal(5), rng.standard_normal(5), rng.standard_normal(5), -3.0)), 1e-13

    prob5 = HskdvProblem(a=-0.125, b=-3.0, domain=(-50.0, 50.0),
                         initial=(lambda x_: 0.5 / np.cosh(0.5 * x_) ** 2,
                                  lambda x_: 0.2 / np.cosh(0.5 * x_)))
    mesh5 = build_mesh(-50.0, 50.0, 16)
    st5 = init_aux_hs(l2_project(prob5.initial[0], mesh5, 2),
                      l2_project(prob5.initial[1], mesh5, 2), prob5)
    yield "hskdv init constraints", max(abs(c) for c in constraint_residuals_hs(st5, prob5)), 1e-11
    yield "hskdv lemma-S equivalence", lemma_S_check(st5, prob5), 1e-9
    yield "hskdv energy-condition consistency", energy_condition_defect_hs(st5, prob5), 1e-12
    yield "hskdv hamiltonian-condition consistency", hamiltonian_condition_defect_hs(st5, prob5), 1e-12


def run_selftest() -> int:
    failures = 0
    for name, value, tol in _checks():
        ok = value <= tol
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'}  {name:<42} {value:.3e} (tol {tol:.0e})")
    print(f"{'OK' if failures == 0 else 'FAILED'}: "
          f"{failures} failure(s)" if failures else "OK: all properties hold")
    return 0 if failures == 0 else 1
