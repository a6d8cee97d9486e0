"""Newton iteration for the coupled stage systems and the underlying
linear solver for block-sparse periodic matrices.

The stage residuals are polynomial in the unknowns, so the default
Jacobian is analytic (supplied by the solver modules); a central
finite-difference Jacobian is kept as oracle and fallback.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "NewtonConfig",
    "NewtonReport",
    "NewtonError",
    "SingularMatrixError",
    "BorderedMatrix",
    "LowRankUpdatedMatrix",
    "newton_solve",
    "linear_solve",
    "fd_jacobian",
    "solve_2x2",
    "pinv_2x2",
]


def pinv_2x2(A: np.ndarray, rcond: float = 1e-8) -> np.ndarray:
    """Truncated pseudoinverse matching the policy of solve_2x2."""
    return np.linalg.pinv(np.asarray(A, dtype=float), rcond=rcond)

Matrix = Union[np.ndarray, sp.spmatrix, "BorderedMatrix", "LowRankUpdatedMatrix"]


class LowRankUpdatedMatrix:
    """F + U V with sparse F and a thin dense update (U: n x r, V: r x n),
    solved by the Woodbury identity so the sparse factorization sees only F.

    This is the Jacobian shape of the stage systems after the penalty
    parameters are eliminated through their constraint solve: U carries the
    penalty columns of the field equations, V the sensitivity of the
    eliminated parameters to the fields.
    """

    def __init__(self, F: sp.spmatrix, U: np.ndarray, V: np.ndarray):
        self.F = F.tocsc()
        self.U = np.asarray(U, dtype=float)
        self.V = np.asarray(V, dtype=float)
        self.n = self.F.shape[0]
        self.r = self.U.shape[1]
        self.shape = (self.n, self.n)

    def toarray(self) -> np.ndarray:
        return self.F.toarray() + self.U @ self.V

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.F @ x + self.U @ (self.V @ x)

    def _factor(self):
        if not hasattr(self, "_lu"):
            self._lu = spla.splu(self.F)
            Y = self._lu.solve(self.U) if self.r else np.zeros((self.n, 0))
            self._Y = Y
            self._core = np.eye(self.r) + self.V @ Y
        return self._lu

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        lu = self._factor()
        x0 = lu.solve(rhs)
        if self.r == 0:
            return x0
        try:
            y = scipy.linalg.solve(self._core, self.V @ x0)
        except scipy.linalg.LinAlgError:
            y, *_ = np.linalg.lstsq(self._core, self.V @ x0, rcond=1e-10)
        return x0 - self._Y @ y


class BorderedMatrix:
    """Arrowhead system [[F, B], [C, E]] with sparse F and a thin dense
    border (the penalty columns/constraint rows of the stage systems).

    Solved by a Schur complement on the border so the sparse factorization
    never sees dense rows: F X = [b_f | B], then
    (E - C X_B) y = b_c - C x_f, x = x_f - X_B y.
    """

    def __init__(self, F: sp.spmatrix, B: np.ndarray, C: np.ndarray, E: np.ndarray):
        self.F = F.tocsc()
        self.B = np.asarray(B, dtype=float)
        self.C = np.asarray(C, dtype=float)
        self.E = np.asarray(E, dtype=float)
        self.n = self.F.shape[0]
        self.m = self.E.shape[0]
        self.shape = (self.n + self.m, self.n + self.m)

    def toarray(self) -> np.ndarray:
        top = np.hstack([self.F.toarray(), self.B])
        bottom = np.hstack([self.C, self.E])
        return np.vstack([top, bottom])

    def matvec(self, x: np.ndarray) -> np.ndarray:
        xf, xc = x[: self.n], x[self.n:]
        return np.concatenate([self.F @ xf + self.B @ xc,
                               self.C @ xf + self.E @ xc])

    def _factor(self):
        if not hasattr(self, "_lu"):
            self._lu = spla.splu(self.F)
            XB = self._lu.solve(self.B) if self.m else np.zeros((self.n, 0))
            self._XB = XB
            self._schur = self.E - self.C @ XB
            # Border directions the constraint block itself cannot see (its
            # singular value is relatively tiny, e.g. a jump family whose
            # constraint coefficients cancel to round-off) are excluded from
            # the update: the remaining sensitivity comes only from noisy
            # field feedback and following it sends the penalties on wild
            # excursions. Along excluded directions the parameters simply
            # keep their current values, which the constraints cannot
            # distinguish anyway.
            if self.m:
                _, sv, vt = np.linalg.svd(self.E)
                rank = int(np.sum(sv >= 1e-8 * sv[0])) if sv[0] > 0 else 0
                self._span = vt[:rank].T if rank < self.m else None
            else:
                self._span = None
        return self._lu

    def _solve_schur(self, rhs: np.ndarray) -> np.ndarray:
        s = self._schur
        if s.size == 0:
            return rhs
        if self._span is None:
            y, *_ = np.linalg.lstsq(s, rhs, rcond=1e-8)
            return y
        if self._span.shape[1] == 0:
            return np.zeros(self.m)
        yr, *_ = np.linalg.lstsq(s @ self._span, rhs, rcond=1e-8)
        return self._span @ yr

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        lu = self._factor()
        bf, bc = rhs[: self.n], rhs[self.n:]
        xf = lu.solve(bf)
        y = self._solve_schur(bc - self.C @ xf)
        return np.concatenate([xf - self._XB @ y, y])


class NewtonError(RuntimeError):
    """Raised on non-recoverable solver failures (NaN residual, singular Jacobian)."""

    def __init__(self, message: str, iteration: int = -1):
        super().__init__(message)
        self.iteration = iteration


class SingularMatrixError(RuntimeError):
    """Raised when a linear system is (numerically) rank deficient."""

    def __init__(self, message: str, cond_estimate: float = np.inf):
        super().__init__(f"{message} (condition estimate {cond_estimate:.3e})")
        self.cond_estimate = cond_estimate


@dataclass
class NewtonConfig:
    abs_tol: float = 1e-12
    rel_tol: float = 0.0
    max_iter: int = 30
    jacobian_mode: str = "analytic"   # "analytic" | "finite-difference"
    fd_step: float = 1e-6
    # 0: adaptive chord iteration (reuse the factorization while it contracts
    # fast); 1: classic Newton with a fresh Jacobian every iteration
    refresh_every: int = 0

    def __post_init__(self):
        if self.abs_tol <= 0:
            raise ValueError("abs_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 1e-9 <= self.fd_step <= 1e-5:
            raise ValueError("fd_step must lie in [1e-9, 1e-5]")
        if self.jacobian_mode not in ("analytic", "finite-difference"):
            raise ValueError(f"unknown jacobian_mode {self.jacobian_mode!r}")
        if self.refresh_every < 0:
            raise ValueError("refresh_every must be >= 0")


@dataclass
class NewtonReport:
    iterations: int
    final_residual: float
    converged: bool


def _cond_estimate(matrix: Matrix) -> float:
    try:
        if isinstance(matrix, (BorderedMatrix, LowRankUpdatedMatrix)):
            matrix = matrix.toarray() if matrix.shape[0] <= 2000 else sp.csr_matrix(matrix.shape)
        if sp.issparse(matrix):
            dense = matrix.toarray() if matrix.shape[0] <= 2000 else None
            if dense is None:
                return np.inf
            return float(np.linalg.cond(dense))
        return float(np.linalg.cond(np.asarray(matrix)))
    except Exception:
        return np.inf


def _lu_solve(matrix: Matrix, rhs: np.ndarray) -> tuple[np.ndarray, float]:
    """LU solve (sparse: SuperLU with equilibration, dense: LAPACK) with one
    step of iterative refinement; returns (x, ||Kx - b||_inf)."""
    rhs = np.asarray(rhs, dtype=float)
    try:
        if isinstance(matrix, (BorderedMatrix, LowRankUpdatedMatrix)):
            x = matrix.solve(rhs)
            x += matrix.solve(rhs - matrix.matvec(x))
            resid = rhs - matrix.matvec(x)
        elif sp.issparse(matrix):
            K = matrix.tocsc()
            lu = spla.splu(K)
            x = lu.solve(rhs)
            x += lu.solve(rhs - K @ x)
            resid = rhs - K @ x
        else:
            K = np.asarray(matrix, dtype=float)
            lu, piv = scipy.linalg.lu_factor(K)
            x = scipy.linalg.lu_solve((lu, piv), rhs)
            x += scipy.linalg.lu_solve((lu, piv), rhs - K @ x)
            resid = rhs - K @ x
    except (RuntimeError, scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularMatrixError(f"linear solve failed: {exc}", _cond_estimate(matrix))
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("linear solve produced non-finite values",
                                  _cond_estimate(matrix))
    return x, float(np.linalg.norm(resid, ord=np.inf))


def linear_solve(matrix: Matrix, rhs: np.ndarray) -> np.ndarray:
    """Direct solve K x = b for dense or sparse K.

    Equilibration inside SuperLU handles the ill-scaled constraint rows the
    penalty formulation appends. Rank deficiency (residual above
    1e-11 * ||b||_inf after refinement) raises SingularMatrixError carrying a
    condition estimate.
    """
    rhs = np.asarray(rhs, dtype=float)
    x, resid_norm = _lu_solve(matrix, rhs)
    b_norm = float(np.linalg.norm(rhs, ord=np.inf))
    if b_norm > 0 and resid_norm > 1e-11 * b_norm:
        raise SingularMatrixError(
            f"linear solve residual {resid_norm:.3e} exceeds "
            f"1e-11 * ||b||_inf = {1e-11 * b_norm:.3e}",
            _cond_estimate(matrix),
        )
    return x


def fd_jacobian(residual: Callable[[np.ndarray], np.ndarray],
                x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, column by column."""
    x = np.asarray(x, dtype=float)
    r0 = np.asarray(residual(x))
    jac = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        jac[:, i] = (np.asarray(residual(xp)) - np.asarray(residual(xm))) / (2.0 * h)
    return jac


def newton_solve(
    residual: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    cfg: Optional[NewtonConfig] = None,
    jacobian: Optional[Callable[[np.ndarray], Matrix]] = None,
    jac0: Optional[Matrix] = None,
    jac_sink: Optional[dict] = None,
) -> tuple[np.ndarray, NewtonReport]:
    """Solve residual(x) = 0 by Newton iteration with Jacobian reuse.

    Convergence: ||r||_inf <= max(abs_tol, rel_tol * ||r(x0)||_inf). After the
    tolerance is met, up to two extra iterations are taken while each still
    shrinks the residual by >= 100x, so accepted states sit at solver
    stagnation level rather than just under the tolerance (this keeps the
    conservation drift of long runs solver-limited).

    A factored Jacobian is reused across iterations (chord steps) while each
    step still cuts the residual by 4x; weaker contraction triggers a rebuild
    at the current iterate. ``jac0`` seeds the first iterations with an
    already-factored matrix (e.g. from the previous time step); ``jac_sink``,
    if given, receives the last Jacobian under key "jac" for such reuse.

    Returns (x, report); a non-converged run returns converged=False and the
    caller decides whether to retry. NaN/Inf residuals and singular Jacobians
    raise NewtonError.
    """
    cfg = cfg or NewtonConfig()
    if cfg.jacobian_mode == "analytic" and jacobian is None:
        raise ValueError("analytic jacobian_mode requires a jacobian callable")

    def build(at):
        if cfg.jacobian_mode == "analytic":
            return jacobian(at)
        return fd_jacobian(residual, at, cfg.fd_step)

    x = np.array(x0, dtype=float)
    r = np.asarray(residual(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise NewtonError("residual not finite at initial guess", iteration=0)
    r0_norm = float(np.linalg.norm(r, ord=np.inf))
    tol = max(cfg.abs_tol, cfg.rel_tol * r0_norm)

    r_norm = r0_norm
    best_x, best_norm = x.copy(), r_norm
    converged = r_norm <= tol
    extra_steps = 0
    iterations = 0
    jac = jac0
    fresh = False
    chord_steps = 0
    while iterations < cfg.max_iter:
        if converged and extra_steps >= 2:
            break
        stale_limit = (cfg.refresh_every if cfg.refresh_every > 0 else 8)
        if jac is None or (not converged and chord_steps >= stale_limit):
            jac = build(x)
            fresh = True
            chord_steps = 0
        try:
            dx, _ = _lu_solve(jac, r)
        except SingularMatrixError as exc:
            if converged:
                break   # already under tolerance; stop polishing
            if not fresh:
                jac = None   # stale factorization may be at fault; rebuild
                continue
            raise NewtonError(f"singular Jacobian: {exc}", iteration=iterations) from exc
        # backtracking: full steps can overshoot the narrow basin of the
        # eliminated penalty map; halve until the residual actually drops
        alpha = 1.0
        x_t = x - dx
        r_t = np.asarray(residual(x_t), dtype=float)
        new_norm = (float(np.linalg.norm(r_t, ord=np.inf))
                    if np.all(np.isfinite(r_t)) else np.inf)
        if not converged:
            while new_norm > r_norm and alpha > 1.0 / 64.0:
                alpha *= 0.5
                x_t = x - alpha * dx
                r_t = np.asarray(residual(x_t), dtype=float)
                new_norm = (float(np.linalg.norm(r_t, ord=np.inf))
                            if np.all(np.isfinite(r_t)) else np.inf)
        if not np.isfinite(new_norm):
            raise NewtonError("residual became non-finite", iteration=iterations + 1)
        iterations += 1
        if not (converged or fresh or new_norm <= max(0.25 * r_norm, tol)):
            # chord step made poor progress: rebuild at the current iterate
            jac = None
            continue
        fresh = False
        chord_steps += 1
        x, r = x_t, r_t
        if new_norm < best_norm:
            best_x, best_norm = x.copy(), new_norm
        if converged:
            extra_steps += 1
            if new_norm >= 0.01 * r_norm:
                break   # gains have flattened out; we are at stagnation level
        r_norm = new_norm
        if r_norm <= tol:
            converged = True

    if jac_sink is not None:
        jac_sink["jac"] = jac
    return best_x, NewtonReport(iterations=iterations, final_residual=best_norm,
                                converged=converged)


def solve_2x2(A: np.ndarray, b: np.ndarray,
              jump_scale: float) -> tuple[float, float]:
    """Solve the 2x2 penalty-parameter system with a total degenerate fallback.

    If the squared-jump scale is at round-off level the constraints hold for
    any parameters and (0, 0) is returned. Otherwise the system is solved by
    SVD-truncated least squares (rcond 1e-10): a relatively rank-deficient
    Gram matrix -- e.g. one jump family proportional to the other, or a jump
    column that is pure round-off -- yields the minimal-norm parameters, which
    satisfy the same constraints without noise amplification; well-conditioned
    systems are solved exactly.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if jump_scale < 1e-28 or np.abs(A).max() == 0.0:
        return 0.0, 0.0
    sol = pinv_2x2(A) @ b
    return float(sol[0]), float(sol[1])
