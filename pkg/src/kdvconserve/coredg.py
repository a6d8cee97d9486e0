"""Core discontinuous Galerkin machinery on periodic 1D meshes.

Modal Legendre basis on the reference element [-1, 1], Gauss quadrature,
L2 projection, global operator assembly (mass / volume-derivative /
boundary average / boundary jump with periodic wrap) and the interface
trace algebra shared by the scalar and coupled solvers.

Sign conventions
----------------
With ``jump = left - right`` and ``avg = (left + right)/2`` at every mesh
node (node i sits at the right end of element i, node N-1 is the periodic
node), the assembled operators realize, for coefficient vectors x and
test vectors y::

    y^T M x = (x, y)                    broken L2 inner product
    y^T D x = (x, y_x)                  broken volume derivative term
    y^T A x = -sum_i {x} [[y]] (x_i)    boundary average term
    y^T J x =  sum_i [[x]] [[y]] (x_i)  boundary jump (penalty) term

so that ``D + A`` is exactly the combined operator appearing as
``(x, y_x) - <{x}, y n>`` in the weak forms, and x -> (D+A)x is
antisymmetric in the sense ``y^T(D+A)x + x^T(D+A)y = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.legendre import Legendre, leggauss

__all__ = [
    "Mesh",
    "QuadratureRule",
    "BasisTable",
    "DofVector",
    "NodeTraces",
    "OperatorSet",
    "Discretization",
    "build_mesh",
    "gauss_rule",
    "basis_table",
    "get_discretization",
    "l2_project",
    "assemble_operators",
    "trace_values",
    "jump_sum",
    "jump_avg_sum",
    "interface_identity_check",
]

MAX_DEGREE = 6


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Mesh:
    """Periodic partition of [a, b] into N elements.

    Node index N aliases node index 0 in every interface functional.
    """

    a: float
    b: float
    N: int
    nodes: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes))
        object.__setattr__(self, "h", _frozen(self.h))

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.nodes[:-1] + self.nodes[1:])

    def same_as(self, other: "Mesh") -> bool:
        return (
            self.N == other.N
            and self.a == other.a
            and self.b == other.b
            and np.array_equal(self.nodes, other.nodes)
        )


def build_mesh(a: float, b: float, N: int) -> Mesh:
    """Uniform periodic mesh with N elements on [a, b]."""
    if N < 2:
        raise ValueError(f"need at least 2 elements, got N={N}")
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    nodes = np.linspace(a, b, N + 1)
    return Mesh(a=float(a), b=float(b), N=int(N), nodes=nodes, h=np.diff(nodes))


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre points/weights on [-1, 1]; exact to degree 2*n-1."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(self.points))
        object.__setattr__(self, "weights", _frozen(self.weights))

    @property
    def n(self) -> int:
        return self.points.size


def gauss_rule(n_q: int) -> QuadratureRule:
    """n_q-point Gauss-Legendre rule on the reference element."""
    if n_q < 1:
        raise ValueError(f"need n_q >= 1, got {n_q}")
    x, w = leggauss(n_q)
    return QuadratureRule(points=x, weights=w)


@dataclass(frozen=True)
class BasisTable:
    """Legendre modes P_0..P_k evaluated on a quadrature rule.

    values[q, j] = P_j(xi_q), derivs[q, j] = P_j'(xi_q) (reference
    derivative; the 2/h chain-rule factor is applied by callers).
    """

    k: int
    values: np.ndarray
    derivs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "derivs", _frozen(self.derivs))


def basis_table(k: int, rule: QuadratureRule) -> BasisTable:
    if not 0 <= k <= MAX_DEGREE:
        raise ValueError(f"polynomial degree must be in [0, {MAX_DEGREE}], got {k}")
    xi = rule.points
    vals = np.empty((xi.size, k + 1))
    ders = np.empty((xi.size, k + 1))
    for j in range(k + 1):
        pj = Legendre.basis(j)
        vals[:, j] = pj(xi)
        ders[:, j] = pj.deriv()(xi) if j > 0 else 0.0
    return BasisTable(k=k, values=vals, derivs=ders)


@dataclass(frozen=True)
class DofVector:
    """Coefficients of one piecewise-polynomial field: N x (k+1) Legendre modes."""

    mesh: Mesh
    k: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.mesh.N, self.k + 1):
            raise ValueError(
                f"coefficient shape {c.shape} does not match (N, k+1)="
                f"({self.mesh.N}, {self.k + 1})"
            )
        object.__setattr__(self, "coeffs", _frozen(c))

    @property
    def flat(self) -> np.ndarray:
        return self.coeffs.ravel()

    def with_coeffs(self, coeffs: np.ndarray) -> "DofVector":
        return DofVector(mesh=self.mesh, k=self.k, coeffs=np.reshape(coeffs, self.coeffs.shape))

    def _check_compatible(self, other: "DofVector"):
        if self.k != other.k or not self.mesh.same_as(other.mesh):
            raise ValueError("DofVectors live on different (mesh, k) spaces")

    def __add__(self, other: "DofVector") -> "DofVector":
        self._check_compatible(other)
        return self.with_coeffs(self.coeffs + other.coeffs)

    def __sub__(self, other: "DofVector") -> "DofVector":
        self._check_compatible(other)
        return self.with_coeffs(self.coeffs - other.coeffs)

    def __mul__(self, s: float) -> "DofVector":
        return self.with_coeffs(self.coeffs * float(s))

    __rmul__ = __mul__

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Pointwise evaluation; points on element boundaries use the left limit
        (the periodic wrap maps x == b to the last element's right end)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        mesh = self.mesh
        idx = np.searchsorted(mesh.nodes, x, side="left") - 1
        idx = np.clip(idx, 0, mesh.N - 1)
        xi = 2.0 * (x - mesh.centers[idx]) / mesh.h[idx]
        xi = np.clip(xi, -1.0, 1.0)
        out = np.zeros_like(x)
        powers = np.empty((self.k + 1, xi.size))
        for j in range(self.k + 1):
            powers[j] = Legendre.basis(j)(xi)
        out = np.einsum("nj,jn->n", self.coeffs[idx], powers)
        return out


@dataclass(frozen=True)
class NodeTraces:
    """One-sided limits at the N mesh nodes x_1..x_N (x_N is the periodic node).

    left[i] comes from x_i^-, right[i] from x_i^+ (element i+1, wrapping).
    """

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "left", _frozen(self.left))
        object.__setattr__(self, "right", _frozen(self.right))
        if self.left.shape != self.right.shape:
            raise ValueError("left/right trace arrays must have equal length")

    @property
    def jump(self) -> np.ndarray:
        return self.left - self.right

    @property
    def avg(self) -> np.ndarray:
        return 0.5 * (self.left + self.right)


def trace_values(x: DofVector) -> NodeTraces:
    """Left/right limits of a field at every node, periodic wrap at the boundary."""
    c = x.coeffs
    signs = (-1.0) ** np.arange(x.k + 1)
    left = c.sum(axis=1)                       # P_j(+1) = 1
    right_own = c @ signs                      # P_j(-1) = (-1)^j, element's left end
    right = np.roll(right_own, -1)             # node i is element i+1's left end
    return NodeTraces(left=left, right=right)


def _check_same_nodes(x: NodeTraces, y: NodeTraces):
    if x.left.shape != y.left.shape:
        raise ValueError("NodeTraces come from different meshes")


def jump_sum(x: NodeTraces, y: NodeTraces) -> float:
    """sum_i [[x]] [[y]] (x_i), periodic node counted once."""
    _check_same_nodes(x, y)
    return float(np.dot(x.jump, y.jump))


def jump_avg_sum(x: NodeTraces, y: NodeTraces) -> float:
    """sum_i [[x]] {y} (x_i), periodic node counted once."""
    _check_same_nodes(x, y)
    return float(np.dot(x.jump, y.avg))


@dataclass(frozen=True)
class OperatorSet:
    """Global sparse DG operators with periodic coupling (see module docstring)."""

    M: sp.csr_matrix
    D: sp.csr_matrix
    A: sp.csr_matrix
    J: sp.csr_matrix
    M_diag: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "M_diag", _frozen(self.M_diag))


class Discretization:
    """Everything that depends only on (mesh, k): quadrature, basis tables,
    operators, trace-extraction matrices and load/projection kernels.

    The assembly rule uses 2*(k+1) Gauss points (exact to degree 4k+3), which
    integrates every nonlinear volume term appearing in the schemes exactly.
    """

    def __init__(self, mesh: Mesh, k: int):
        if not 0 <= k <= MAX_DEGREE:
            raise ValueError(f"polynomial degree must be in [0, {MAX_DEGREE}], got {k}")
        self.mesh = mesh
        self.k = int(k)
        self.nmodes = k + 1
        self.ndof = mesh.N * self.nmodes

        self.rule = gauss_rule(2 * (k + 1))
        self.basis = basis_table(k, self.rule)
        # physical quadrature points, one row per element
        self.quad_x = mesh.centers[:, None] + 0.5 * mesh.h[:, None] * self.rule.points[None, :]
        self._wB = self.rule.weights[:, None] * self.basis.values        # (n_q, k+1)

        j = np.arange(self.nmodes)
        self._signs = (-1.0) ** j
        self._next = (np.arange(mesh.N) + 1) % mesh.N
        self._prev = (np.arange(mesh.N) - 1) % mesh.N
        self.M_diag = (mesh.h[:, None] / (2.0 * j + 1.0)[None, :]).ravel()
        self.Minv_diag = 1.0 / self.M_diag

        # reference volume-derivative block, identical on every element;
        # Dref[l, j] = int P_j P_l' (row l = test, column j = trial), which is
        # exactly 2 when l > j with l - j odd and 0 otherwise
        ll, jj = np.meshgrid(j, j, indexing="ij")
        Dref = np.where((ll > jj) & ((ll - jj) % 2 == 1), 2.0, 0.0)
        # trace extraction: row m picks the two one-sided limits at node m
        N, nm = mesh.N, self.nmodes
        cols_left = (np.repeat(np.arange(N), nm) * nm + np.tile(j, N))
        rows = np.repeat(np.arange(N), nm)
        vals_left = np.ones(N * nm)
        self.E_left = sp.csr_matrix((vals_left, (rows, cols_left)), shape=(N, self.ndof))
        cols_right = (np.repeat((np.arange(N) + 1) % N, nm) * nm + np.tile(j, N))
        vals_right = np.tile((-1.0) ** j, N)
        self.E_right = sp.csr_matrix((vals_right, (rows, cols_right)), shape=(N, self.ndof))
        self.Jmp = (self.E_left - self.E_right).tocsr()
        self.Av = (0.5 * (self.E_left + self.E_right)).tocsr()

        M = sp.diags(self.M_diag, format="csr")
        D = sp.kron(sp.identity(N, format="csr"), sp.csr_matrix(Dref), format="csr")
        A = (-(self.Jmp.T @ self.Av)).tocsr()
        J = (self.Jmp.T @ self.Jmp).tocsr()
        self.ops = OperatorSet(M=M, D=D, A=A, J=J, M_diag=self.M_diag.copy())
        self.G = (D + A).tocsr()

    # -- pointwise kernels -------------------------------------------------

    def eval_quad(self, coeffs: np.ndarray) -> np.ndarray:
        """Field values at the assembly quadrature points, shape (N, n_q)."""
        return coeffs.reshape(self.mesh.N, self.nmodes) @ self.basis.values.T

    def load(self, values: np.ndarray) -> np.ndarray:
        """Load vector (f, phi_j) per element from values at quadrature points."""
        return 0.5 * self.mesh.h[:, None] * (values @ self._wB)

    def project_values(self, values: np.ndarray) -> np.ndarray:
        """L2-projection coefficients from values at the quadrature points."""
        L = self.load(values)
        return L * self.Minv_diag.reshape(self.mesh.N, self.nmodes)

    def project(self, f: Callable[[np.ndarray], np.ndarray]) -> DofVector:
        vals = np.asarray(f(self.quad_x), dtype=float)
        return DofVector(mesh=self.mesh, k=self.k, coeffs=self.project_values(vals))

    def dof(self, coeffs: np.ndarray) -> DofVector:
        return DofVector(mesh=self.mesh, k=self.k, coeffs=coeffs.reshape(self.mesh.N, self.nmodes))

    # -- weighted-mass kernels (Jacobian building blocks) -------------------

    def w_blocks(self, weight_q: np.ndarray) -> np.ndarray:
        """Per-element blocks W[i] of the weighted mass matrix
        (z * x, phi) -> W(z) x, with weight values z at quadrature points."""
        wq = weight_q * self.rule.weights[None, :]
        blocks = np.einsum("nq,qj,ql->njl", wq, self.basis.values, self.basis.values)
        return 0.5 * self.mesh.h[:, None, None] * blocks

    def w_matrix(self, weight_q: np.ndarray) -> sp.csr_matrix:
        """Sparse block-diagonal weighted mass matrix from w_blocks."""
        N = self.mesh.N
        bsr = sp.bsr_matrix(
            (self.w_blocks(weight_q), np.arange(N), np.arange(N + 1)),
            shape=(self.ndof, self.ndof),
        )
        return bsr.tocsr()

    def w_apply(self, weight_q: np.ndarray, x: np.ndarray) -> np.ndarray:
        """W(z) @ x without forming the matrix."""
        return self.load(weight_q * self.eval_quad(x)).ravel()

    # -- traces --------------------------------------------------------------
    # The trace-extraction matrices are so structured that plain reshapes beat
    # sparse matvecs by an order of magnitude; these kernels are the hot path
    # of the constraint assembly.

    def node_traces(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(left, right) one-sided limits of a flat coefficient vector."""
        c = x.reshape(self.mesh.N, self.nmodes)
        return c.sum(axis=1), (c @ self._signs)[self._next]

    def elT(self, z: np.ndarray) -> np.ndarray:
        """E_left^T @ z for a node vector z."""
        return np.repeat(z, self.nmodes)

    def erT(self, z: np.ndarray) -> np.ndarray:
        """E_right^T @ z for a node vector z."""
        return (z[self._prev][:, None] * self._signs[None, :]).ravel()

    def jmpT(self, z: np.ndarray) -> np.ndarray:
        """Jmp^T @ z (adjoint of the node-jump extraction)."""
        return self.elT(z) - self.erT(z)

    def avT(self, z: np.ndarray) -> np.ndarray:
        """Av^T @ z (adjoint of the node-average extraction)."""
        return 0.5 * (self.elT(z) + self.erT(z))

    def jump(self, x: np.ndarray) -> np.ndarray:
        L, R = self.node_traces(x)
        return L - R

    def avg(self, x: np.ndarray) -> np.ndarray:
        L, R = self.node_traces(x)
        return 0.5 * (L + R)


_DISCRETIZATIONS: dict[tuple, Discretization] = {}


def get_discretization(mesh: Mesh, k: int) -> Discretization:
    """Cached Discretization lookup (assembly is pure in (mesh, k))."""
    key = (mesh.a, mesh.b, mesh.N, k, mesh.nodes.tobytes())
    disc = _DISCRETIZATIONS.get(key)
    if disc is None or not disc.mesh.same_as(mesh):
        disc = Discretization(mesh, k)
        _DISCRETIZATIONS[key] = disc
    return disc


def l2_project(f: Callable[[np.ndarray], np.ndarray], mesh: Mesh, k: int) -> DofVector:
    """L2-orthogonal projection of f onto the degree-k broken polynomial space."""
    return get_discretization(mesh, k).project(f)


def assemble_operators(mesh: Mesh, k: int) -> OperatorSet:
    """Global mass / volume-derivative / boundary-average / jump operators."""
    return get_discretization(mesh, k).ops


def interface_identity_check(rho: DofVector, v: DofVector) -> float:
    """Defect of <rho, v n> = sum_i([[rho]]{v} + [[v]]{rho})(x_i).

    The bracket is evaluated element by element from one-sided limits, the
    node-sum side from jumps and averages; the identity is exact algebra,
    so the defect is round-off only.
    """
    rho._check_compatible(v)
    tr, tv = trace_values(rho), trace_values(v)
    # <rho, v n> = sum_elem [ (rho v)(right end) - (rho v)(left end) ]
    rv_left = tr.left * tv.left                 # products at x_i^-
    rv_right = tr.right * tv.right              # products at x_i^+
    bracket = float(np.sum(rv_left - rv_right))
    node_sum = float(np.sum(tr.jump * tv.avg + tv.jump * tr.avg))
    return abs(bracket - node_sum)
