"""Scalar conservative scheme: residuals, constraints, initialization,
stepping and invariants, with independent quadrature oracles."""

import numpy as np
import pytest
import scipy.linalg
from numpy.polynomial.legendre import Legendre
from scipy.special import roots_legendre

from kdvconserve.coredg import (DofVector, build_mesh, get_discretization,
                                l2_project, trace_values)
from kdvconserve.gkdv import (FLUXES, GkdvProblem, GkdvState,
                              constraint_residuals, energy_condition_defect,
                              init_aux, invariants_gkdv, semidiscrete_residual,
                              step_irk4, step_midpoint)
from kdvconserve.newton import NewtonConfig, NewtonError

rng = np.random.default_rng(31)


def project(f, mesh, k):
    return l2_project(f, mesh, k)


def random_state(prob, mesh, k, seed=0):
    r = np.random.default_rng(seed)
    disc = get_discretization(mesh, k)
    mk = lambda: disc.dof(r.standard_normal((mesh.N, k + 1)))
    return GkdvState(t=0.3, u=mk(), q=mk(), p=mk(),
                     tau_pu=r.standard_normal(), tau_pq=r.standard_normal())


# ---------------------------------------------------------------- fluxes

def test_builtin_fluxes_antiderivative_consistency():
    # V' = f for each builtin, checked symbolically
    import sympy
    u = sympy.Symbol("u")
    forms = {
        "linear": (u, u**2 / 2),
        "burgers": (u**2 / 2, u**3 / 6),
        "kdv_classical": (3 * u**2, u**3),
    }
    for name, (f_sym, V_sym) in forms.items():
        assert sympy.simplify(sympy.diff(V_sym, u) - f_sym) == 0
        flux = FLUXES[name]
        xs = np.linspace(-2, 2, 7)
        assert np.allclose(flux.f(xs), [float(f_sym.subs(u, x)) for x in xs])
        assert np.allclose(flux.V(xs), [float(V_sym.subs(u, x)) for x in xs])


def test_unknown_flux_rejected():
    with pytest.raises(ValueError):
        GkdvProblem(epsilon=1.0, flux="cubic", domain=(0, 1), initial=np.sin)


# ---------------------------------------------------------------- semidiscrete residual

def _residual_oracle(state, problem):
    """Direct per-element quadrature assembly of the three weak forms,
    independent of the Discretization kernels."""
    mesh, k = state.u.mesh, state.u.k
    N = mesh.N
    eps = problem.epsilon
    flux = problem.flux
    pts, wts = roots_legendre(2 * (k + 1))
    tu, tq, tp = (trace_values(f) for f in (state.u, state.q, state.p))
    u_hat = tu.avg
    q_hat = tq.avg
    p_hat = tp.avg + state.tau_pu * tu.jump + state.tau_pq * tq.jump
    Rq = np.zeros((N, k + 1))
    Rp = np.zeros((N, k + 1))
    Ru = np.zeros((N, k + 1))
    for e in range(N):
        h = mesh.h[e]
        xe = mesh.centers[e] + 0.5 * h * pts
        cu, cq, cp = (f.coeffs[e] for f in (state.u, state.q, state.p))
        uq = Legendre(cu)(pts)
        qq = Legendre(cq)(pts)
        pq = Legendre(cp)(pts)
        right, left = e, (e - 1) % N
        for l in range(k + 1):
            Pl = Legendre.basis(l)(pts)
            dPl = Legendre.basis(l).deriv()(pts)
            sgn = (-1.0) ** l
            Rq[e, l] = (0.5 * h * np.sum(wts * qq * Pl) + np.sum(wts * uq * dPl)
                        - (u_hat[right] - sgn * u_hat[left]))
            Rp[e, l] = (0.5 * h * np.sum(wts * pq * Pl)
                        + eps * np.sum(wts * qq * dPl)
                        - eps * (q_hat[right] - sgn * q_hat[left])
                        - 0.5 * h * np.sum(wts * flux.f(uq) * Pl))
            g = (problem.source(xe, state.t) if problem.source is not None
                 else np.zeros_like(xe))
            Ru[e, l] = -(np.sum(wts * pq * dPl)
                         - (p_hat[right] - sgn * p_hat[left])
                         + 0.5 * h * np.sum(wts * g * Pl))
    return np.concatenate([Rq.ravel(), Rp.ravel(), Ru.ravel()])


def test_residual_matches_independent_oracle():
    prob = GkdvProblem(epsilon=0.7, flux="burgers", domain=(0.0, 2.0),
                       initial=np.sin, source=lambda x, t: np.cos(x + t))
    mesh = build_mesh(0.0, 2.0, 5)
    state = random_state(prob, mesh, 2, seed=5)
    mine = semidiscrete_residual(state, prob)
    oracle = _residual_oracle(state, prob)
    scale = max(1.0, np.abs(oracle).max())
    assert np.abs(mine - oracle).max() < 1e-12 * scale


def test_constants_are_steady():
    prob = GkdvProblem(epsilon=1.0, flux="burgers", domain=(0.0, 1.0),
                       initial=lambda x: 2.0 + 0.0 * x)
    mesh = build_mesh(0.0, 1.0, 4)
    st = init_aux(project(prob.initial, mesh, 2), prob)
    st = GkdvState(t=st.t, u=st.u, q=st.q, p=st.p, tau_pu=0.37, tau_pq=-1.2)
    assert np.abs(semidiscrete_residual(st, prob)).max() < 1e-9


def test_residual_refinement_rate():
    # projected exact data with the exact time derivative: O(h^k) residual
    prob = GkdvProblem(epsilon=1.0, flux="linear", domain=(0.0, 4 * np.pi),
                       initial=lambda x: np.sin(0.5 * x))
    k = 2
    norms = []
    for N in (16, 32, 64):
        mesh = build_mesh(0.0, 4 * np.pi, N)
        st = init_aux(project(prob.initial, mesh, k), prob)
        ut = l2_project(lambda x: -0.375 * np.cos(0.5 * x), mesh, k)
        r = semidiscrete_residual(st, prob, ut=ut)
        norms.append(np.abs(r).max())
    rates = [np.log2(norms[i] / norms[i + 1]) for i in range(2)]
    assert min(rates) > k - 0.5


# ---------------------------------------------------------------- constraints

def test_constraints_zero_for_continuous_fields():
    prob = GkdvProblem(epsilon=1.0, flux="kdv_classical", domain=(0.0, 1.0),
                       initial=np.sin)
    mesh = build_mesh(0.0, 1.0, 6)
    disc = get_discretization(mesh, 2)
    const = disc.project(lambda x: 1.3 + 0.0 * x)
    st = GkdvState(t=0.0, u=const, q=const, p=const, tau_pu=4.2, tau_pq=-7.7)
    rE, rH = constraint_residuals(st, prob)
    assert abs(rE) < 1e-12 and abs(rH) < 1e-12


def test_constraint_hand_arithmetic_k0():
    # k=0, N=2, u=(1,2), f=3u^2, V=u^3: sum [[V]] = (1-8)+(8-1) = 0 and
    # sum {Pi f}[[u]] = 7.5*(-1) + 7.5*(+1) = 0, so rE = 2 tau_pu + S_uq tau_pq
    prob = GkdvProblem(epsilon=1.0, flux="kdv_classical", domain=(0.0, 1.0),
                       initial=np.sin)
    mesh = build_mesh(0.0, 1.0, 2)
    u = DofVector(mesh=mesh, k=0, coeffs=np.array([[1.0], [2.0]]))
    q = DofVector(mesh=mesh, k=0, coeffs=np.array([[0.5], [-0.25]]))
    p = DofVector(mesh=mesh, k=0, coeffs=np.array([[0.0], [0.0]]))
    st = GkdvState(t=0.0, u=u, q=q, p=p, tau_pu=2.0, tau_pq=3.0)
    rE, rH = constraint_residuals(st, prob)
    # S_uu = (-1)^2 + 1^2 = 2; S_uq = (-1)(0.75) + (1)(-0.75) = -1.5
    assert rE == pytest.approx(2.0 * 2.0 + 3.0 * (-1.5) - 0.0, abs=1e-13)
    assert rH == pytest.approx(0.0, abs=1e-13)


def test_init_aux_satisfies_constraints():
    prob = GkdvProblem(epsilon=0.1, flux="burgers", domain=(0.0, 1.0),
                       initial=lambda x: np.sin(2 * np.pi * x),
                       source=lambda x, t: np.cos(x))
    for N, k in ((8, 1), (16, 2), (12, 3)):
        st = init_aux(project(prob.initial, build_mesh(0.0, 1.0, N), k), prob)
        rE, rH = constraint_residuals(st, prob)
        assert max(abs(rE), abs(rH)) < 1e-11


def test_energy_condition_consistency_random_states():
    # the general lemma condition, evaluated with these traces, equals -rE
    prob = GkdvProblem(epsilon=0.5, flux="burgers", domain=(0.0, 1.0),
                       initial=np.sin)
    mesh = build_mesh(0.0, 1.0, 6)
    for seed in range(5):
        st = random_state(prob, mesh, 2, seed=seed)
        scale = max(1.0, abs(constraint_residuals(st, prob)[0]))
        assert energy_condition_defect(st, prob) < 1e-12 * scale


# ---------------------------------------------------------------- init_aux

def test_init_aux_constant_data():
    prob = GkdvProblem(epsilon=1.0, flux="burgers", domain=(0.0, 1.0),
                       initial=lambda x: 3.0 + 0.0 * x)
    st = init_aux(project(prob.initial, build_mesh(0.0, 1.0, 4), 2), prob)
    assert np.abs(st.q.coeffs).max() < 1e-10
    assert np.allclose(st.p.coeffs[:, 0], prob.flux.f(3.0), atol=1e-9)
    assert st.tau_pu == 0.0 and st.tau_pq == 0.0


def test_init_aux_q_accuracy():
    # exp1 data: q approximates (1/2) cos(x/2) at O(h^{k+1})
    prob = GkdvProblem(epsilon=1.0, flux="linear", domain=(0.0, 4 * np.pi),
                       initial=lambda x: np.sin(0.5 * x))
    errs = []
    for N in (16, 32, 64):
        mesh = build_mesh(0.0, 4 * np.pi, N)
        disc = get_discretization(mesh, 2)
        st = init_aux(project(prob.initial, mesh, 2), prob)
        diff = st.q.flat - disc.project(lambda x: 0.5 * np.cos(0.5 * x)).flat
        errs.append(np.sqrt(float(diff @ (disc.M_diag * diff))))
    rates = [np.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(rates) > 2.5  # O(h^3) for k=2


# ---------------------------------------------------------------- stepping

def test_manufactured_constant_is_fixed_point():
    # g built so u = 2 is the exact solution (here g = 0 works for periodic)
    prob = GkdvProblem(epsilon=1.0, flux="burgers", domain=(0.0, 1.0),
                       initial=lambda x: 2.0 + 0.0 * x)
    mesh = build_mesh(0.0, 1.0, 4)
    st = init_aux(project(prob.initial, mesh, 2), prob)
    st1 = step_midpoint(st, prob, 0.05)
    assert np.abs(st1.u.flat - st.u.flat).max() < 1e-10
    st2 = step_irk4(st, prob, 0.05)
    assert np.abs(st2.u.flat - st.u.flat).max() < 1e-10


def test_midpoint_single_step_mass_conservation():
    prob = GkdvProblem(epsilon=1.0, flux="linear", domain=(0.0, 4 * np.pi),
                       initial=lambda x: np.sin(0.5 * x))
    mesh = build_mesh(0.0, 4 * np.pi, 32)
    st = init_aux(project(prob.initial, mesh, 2), prob)
    h = 4 * np.pi / 32
    st1 = step_midpoint(st, prob, 0.2 * h)
    m0 = invariants_gkdv(st, prob)[0]
    m1 = invariants_gkdv(st1, prob)[0]
    assert abs(m1 - m0) <= 1e-13 * (1 + abs(m0))


def test_irk4_per_step_energy_change_within_solver_tolerance():
    prob = GkdvProblem(epsilon=1.0, flux="burgers", domain=(0.0, 1.0),
                       initial=lambda x: np.sin(2 * np.pi * x))
    mesh = build_mesh(0.0, 1.0, 16)
    st = init_aux(project(prob.initial, mesh, 2), prob)
    cfg = NewtonConfig(abs_tol=1e-12)
    e0 = invariants_gkdv(st, prob)[1]
    for _ in range(3):
        st = step_irk4(st, prob, 0.2 / 16, newton_cfg=cfg)
        e1 = invariants_gkdv(st, prob)[1]
        assert abs(e1 - e0) <= 10 * cfg.abs_tol * 16
        e0 = e1


def test_constraints_hold_after_each_accepted_step():
    prob = GkdvProblem(epsilon=1.0 / 576.0, flux="burgers", domain=(0.0, 1.0),
                       initial=lambda x: np.sin(2 * np.pi * x) + 0.5)
    mesh = build_mesh(0.0, 1.0, 16)
    st = init_aux(project(prob.initial, mesh, 2), prob)
    for _ in range(5):
        st = step_irk4(st, prob, 0.2 / 16)
        rE, rH = constraint_residuals(st, prob)
        assert max(abs(rE), abs(rH)) < 1e-12


def test_irk4_local_order_on_discrete_fourier_mode():
    # linear flux: the semi-discrete system is linear (tau = 0), so a pure
    # discrete Fourier mode (eigenvector of the operator) evolves as an exact
    # phase rotation; one IRK4 step must reproduce it to O(dt^5)
    prob = GkdvProblem(epsilon=1.0, flux="linear", domain=(0.0, 4 * np.pi),
                       initial=lambda x: np.sin(0.5 * x))
    mesh = build_mesh(0.0, 4 * np.pi, 6)
    k = 1
    disc = get_discretization(mesh, k)
    Minv = np.diag(disc.Minv_diag)
    G = disc.G.toarray()
    MG = Minv @ G
    A = MG + MG @ MG @ MG    # u' = M^{-1}G (u + eps (M^{-1}G)^2 u), eps=1
    lam, vecs = np.linalg.eig(A)
    # dispersion relation of sin(x/2 - 3t/8): pick the mode with omega ~ 3/8
    idx = np.argmin(np.abs(lam - 1j * 0.375))
    mu, v = lam[idx], vecs[:, idx]
    for _ in range(3):          # refine the eigenpair to round-off residual
        v = np.linalg.solve(A - (mu + 1e-8j) * np.eye(A.shape[0]), v)
        v /= np.linalg.norm(v)
        mu = (np.conj(v) @ (A @ v)) / (np.conj(v) @ v)
    assert np.linalg.norm(A @ v - mu * v) < 1e-12
    v = 0.1 * v                 # modest amplitude keeps p = O(1)
    u0 = disc.dof(np.real(v).reshape(mesh.N, k + 1))
    st = init_aux(u0, prob)
    errs = []
    for dt in (1.0, 0.5):
        exact = np.real(np.exp(mu * dt) * v)
        approx = step_irk4(st, prob, dt).u.flat
        errs.append(np.abs(approx - exact).max())
    order = np.log2(errs[0] / errs[1])
    assert abs(mu.real) < 1e-10                # purely dispersive mode
    assert errs[0] < 1e-5                      # already tiny at dt = 1
    assert order > 4.3                         # local order 5


def test_midpoint_vs_irk4_error_within_factor_two():
    # Exp 1 over t in [0, 1] at k=2, N=32: midpoint L2(u) error within 2x of IRK4
    from kdvconserve.experiments import ExperimentSpec, run_trajectory
    spec_mid = ExperimentSpec(id="exp1", k=(2,), N_list=(32,), T=1.0,
                              scheme="midpoint")
    spec_irk = ExperimentSpec(id="exp1", k=(2,), N_list=(32,), T=1.0,
                              scheme="irk4")
    err_mid = run_trajectory(spec_mid, 2, 32).errors["u"]
    err_irk = run_trajectory(spec_irk, 2, 32).errors["u"]
    assert err_mid <= 2.0 * err_irk


def test_failed_solve_reports_context():
    # an absurd time step cannot converge even after the halved-dt retry
    prob = GkdvProblem(epsilon=1.0 / 576.0, flux="burgers", domain=(0.0, 1.0),
                       initial=lambda x: 2.0 * np.sin(2 * np.pi * x))
    mesh = build_mesh(0.0, 1.0, 16)
    st = init_aux(project(prob.initial, mesh, 2), prob)
    with pytest.raises(NewtonError):
        step_irk4(st, prob, 5.0e3, newton_cfg=NewtonConfig(max_iter=4))


# ---------------------------------------------------------------- invariants

def test_invariants_zero_state():
    prob = GkdvProblem(epsilon=1.0, flux="burgers", domain=(0.0, 1.0),
                       initial=lambda x: 0.0 * x)
    mesh = build_mesh(0.0, 1.0, 4)
    st = init_aux(project(prob.initial, mesh, 2), prob)
    assert invariants_gkdv(st, prob) == pytest.approx((0.0, 0.0, 0.0), abs=1e-14)


def test_energy_of_sine_on_two_periods():
    prob = GkdvProblem(epsilon=1.0, flux="linear", domain=(0.0, 4 * np.pi),
                       initial=lambda x: np.sin(0.5 * x))
    vals = []
    for N in (16, 64):
        st = init_aux(project(prob.initial, build_mesh(0.0, 4 * np.pi, N), 2), prob)
        vals.append(invariants_gkdv(st, prob)[1])
    assert vals[1] == pytest.approx(2 * np.pi, abs=1e-8)
    assert abs(vals[1] - 2 * np.pi) < abs(vals[0] - 2 * np.pi)


def test_exp3_invariants_against_composite_quadrature_oracle():
    # 10^4-point composite midpoint rule on the exact cnoidal formulas
    from kdvconserve.exact import exp3_exact, exp3_fields
    eps = 1.0 / 576.0
    prob = GkdvProblem(epsilon=eps, flux="burgers", domain=(0.0, 1.0),
                       initial=lambda x: exp3_exact(x, 0.0))
    mesh = build_mesh(0.0, 1.0, 64)
    st = init_aux(project(prob.initial, mesh, 4), prob)
    m, e, h = invariants_gkdv(st, prob)
    xs = (np.arange(10**4) + 0.5) / 10**4
    u = exp3_exact(xs, 0.0)
    q = exp3_fields(eps)["q"](xs, 0.0)
    assert m == pytest.approx(float(np.mean(u)), abs=1e-8)
    assert e == pytest.approx(float(np.mean(u * u)), abs=1e-8)
    ham_oracle = float(np.mean(0.5 * eps * q * q - u**3 / 6.0))
    assert h == pytest.approx(ham_oracle, abs=1e-8)


def test_tau_degenerate_case_by_construction():
    # all jumps below 1e-14: the step with tau = (0, 0) satisfies both
    # constraints by construction
    prob = GkdvProblem(epsilon=1.0, flux="burgers", domain=(0.0, 1.0),
                       initial=lambda x: 1.0 + 0.0 * x)
    mesh = build_mesh(0.0, 1.0, 4)
    st = init_aux(project(prob.initial, mesh, 2), prob)
    assert np.abs(trace_values(st.u).jump).max() < 1e-14
    assert (st.tau_pu, st.tau_pq) == (0.0, 0.0)
    rE, rH = constraint_residuals(st, prob)
    assert max(abs(rE), abs(rH)) < 1e-13
