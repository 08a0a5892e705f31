"""Parameter-separable full-order problem.

The high-dimensional problem is a stationary diffusion-advection equation on
the unit square with homogeneous Dirichlet boundary, discretized with a
5-point finite-difference stencil:

    A(mu) u(mu) = f(mu)

Operator and right-hand side are kept in affine (parameter-separable) form

    A(mu) = mu_diff * A_lap + mu_advx * A_dx + mu_advy * A_dy + 1 * A_bc
    f(mu) = 1 * f_src

so everything expensive can be projected once per component and evaluated for
new parameters in reduced dimensions only.  Grid points are indexed row-major
with ``k = iy * D + ix`` for a grid of D points per axis (boundary included),
mesh width ``h = 1 / (D - 1)``, total dimension ``d = D**2``.

Boundary convention: boundary rows are identity (contributed solely by A_bc),
and interior stencil couplings into boundary columns are dropped.  Dropping
them is exact for homogeneous Dirichlet data and keeps A((1,0,0)) symmetric
positive definite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import gmres, splu

log = logging.getLogger(__name__)

#: Tolerance on the relative residual of a full-order solve.
SOLVER_TOL = 1e-10

#: Largest per-axis grid size solved with a direct factorization by default.
DIRECT_LIMIT = 256


class SolveError(RuntimeError):
    """Full-order solve did not reach the requested residual tolerance."""


@dataclass(frozen=True)
class Parameter:
    """Simulation parameter: diffusion coefficient and advection components."""

    diff: float
    advx: float
    advy: float

    def __post_init__(self):
        object.__setattr__(self, "diff", float(self.diff))
        object.__setattr__(self, "advx", float(self.advx))
        object.__setattr__(self, "advy", float(self.advy))
        for name in ("diff", "advx", "advy"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"parameter component {name!r} must be finite")
        if self.diff <= 0.0:
            raise ValueError("diffusion coefficient must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.diff, self.advx, self.advy], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Parameter":
        diff, advx, advy = (float(v) for v in values)
        return cls(diff, advx, advy)


@dataclass(frozen=True)
class QualitySpec:
    """Requested simulation quality: grid resolution and residual bound.

    ``discretization`` is the number of grid points per axis including the
    boundary; ``max_res`` is the residual-norm bound an answer must satisfy
    to count as good enough.
    """

    discretization: int
    max_res: float

    def __post_init__(self):
        object.__setattr__(self, "discretization", int(self.discretization))
        object.__setattr__(self, "max_res", float(self.max_res))
        if self.discretization < 2:
            raise ValueError("discretization needs at least 2 points per axis")
        if not math.isfinite(self.max_res) or self.max_res <= 0.0:
            raise ValueError("max_res must be a positive finite number")

    @property
    def dimension(self) -> int:
        return self.discretization ** 2

    @property
    def mesh_width(self) -> float:
        return 1.0 / (self.discretization - 1)


# Catalog of scalar coefficient functions theta_i(mu).  Components reference
# them by id so a basis file can be interpreted without pickled callables.
THETAS = {
    "diff": lambda mu: mu.diff,
    "advx": lambda mu: mu.advx,
    "advy": lambda mu: mu.advy,
    "one": lambda mu: 1.0,
}


def theta_values(ids, mu: Parameter) -> np.ndarray:
    """Evaluate the coefficient functions named by ``ids`` at ``mu``."""
    return np.array([THETAS[i](mu) for i in ids], dtype=np.float64)


def theta_matrix(ids, params) -> np.ndarray:
    """Coefficient values for many parameters, shape (len(params), len(ids))."""
    out = np.empty((len(params), len(ids)), dtype=np.float64)
    for q, mu in enumerate(params):
        for i, tid in enumerate(ids):
            out[q, i] = THETAS[tid](mu)
    return out


@dataclass(frozen=True)
class SeparableOperator:
    """Affine operator sum(theta_i(mu) * A_i) with sparse components."""

    theta_ids: tuple
    matrices: tuple  # csr matrices, identical square shapes

    def __post_init__(self):
        if len(self.theta_ids) != len(self.matrices):
            raise ValueError("one theta id per matrix component required")
        shapes = {m.shape for m in self.matrices}
        if len(shapes) != 1:
            raise ValueError("operator components must share a shape")
        (shape,) = shapes
        if shape[0] != shape[1]:
            raise ValueError("operator components must be square")
        for tid in self.theta_ids:
            if tid not in THETAS:
                raise ValueError(f"unknown theta id {tid!r}")

    @property
    def n_terms(self) -> int:
        return len(self.matrices)

    @property
    def dimension(self) -> int:
        return self.matrices[0].shape[0]


@dataclass(frozen=True)
class SeparableVector:
    """Affine vector sum(theta_j(mu) * f_j)."""

    theta_ids: tuple
    vectors: tuple  # 1-d float arrays, identical lengths

    def __post_init__(self):
        if len(self.theta_ids) != len(self.vectors):
            raise ValueError("one theta id per vector component required")
        lengths = {v.shape for v in self.vectors}
        if len(lengths) != 1:
            raise ValueError("vector components must share a length")
        for tid in self.theta_ids:
            if tid not in THETAS:
                raise ValueError(f"unknown theta id {tid!r}")

    @property
    def n_terms(self) -> int:
        return len(self.vectors)

    @property
    def dimension(self) -> int:
        return self.vectors[0].shape[0]


@dataclass(frozen=True)
class FullSolution:
    """Full-order solution with its solve certificate."""

    parameter: Parameter
    values: np.ndarray
    discretization: int
    rel_residual: float


def assemble_problem(quality: QualitySpec):
    """Assemble the separable operator and right-hand side for a grid size.

    Returns ``(SeparableOperator, SeparableVector)`` with components
    (diff: A_lap, advx: A_dx, advy: A_dy, one: A_bc) and (one: f_src).
    """
    D = quality.discretization
    d = D * D
    h = quality.mesh_width

    iy, ix = np.meshgrid(np.arange(1, D - 1), np.arange(1, D - 1), indexing="ij")
    iy = iy.ravel()
    ix = ix.ravel()
    rows = iy * D + ix  # interior node ids

    def neighbor_entries(dx, dy, coeff):
        # couplings into boundary columns are dropped (homogeneous Dirichlet)
        nx = ix + dx
        ny = iy + dy
        keep = (nx >= 1) & (nx <= D - 2) & (ny >= 1) & (ny <= D - 2)
        r = rows[keep]
        c = ny[keep] * D + nx[keep]
        return r, c, np.full(r.shape, coeff, dtype=np.float64)

    def build(parts):
        r = np.concatenate([p[0] for p in parts])
        c = np.concatenate([p[1] for p in parts])
        v = np.concatenate([p[2] for p in parts])
        m = sp.csr_matrix((v, (r, c)), shape=(d, d))
        m.sort_indices()
        return m

    center = 4.0 / h**2
    side = -1.0 / h**2
    a_lap = build([
        (rows, rows, np.full(rows.shape, center)),
        neighbor_entries(-1, 0, side),
        neighbor_entries(+1, 0, side),
        neighbor_entries(0, -1, side),
        neighbor_entries(0, +1, side),
    ])

    cd = 1.0 / (2.0 * h)  # central differences for the advection terms
    a_dx = build([neighbor_entries(+1, 0, +cd), neighbor_entries(-1, 0, -cd)])
    a_dy = build([neighbor_entries(0, +1, +cd), neighbor_entries(0, -1, -cd)])

    boundary = np.setdiff1d(np.arange(d), rows)
    a_bc = build([(boundary, boundary, np.ones(boundary.shape))])

    f_src = np.zeros(d)
    f_src[rows] = 1.0

    op = SeparableOperator(("diff", "advx", "advy", "one"), (a_lap, a_dx, a_dy, a_bc))
    rhs = SeparableVector(("one",), (f_src,))
    return op, rhs


def evaluate_operator(op: SeparableOperator, mu: Parameter):
    """Assemble the sparse matrix A(mu) from the affine components."""
    thetas = theta_values(op.theta_ids, mu)
    acc = thetas[0] * op.matrices[0]
    for t, m in zip(thetas[1:], op.matrices[1:]):
        acc = acc + t * m
    return acc.tocsr()


def evaluate_rhs(rhs: SeparableVector, mu: Parameter) -> np.ndarray:
    """Assemble the vector f(mu) from the affine components."""
    thetas = theta_values(rhs.theta_ids, mu)
    acc = np.zeros(rhs.dimension)
    for t, v in zip(thetas, rhs.vectors):
        acc += t * v
    return acc


def solve_full(op, rhs, mu: Parameter, *, solver_tol=SOLVER_TOL, method=None, maxiter=2000):
    """Solve A(mu) u = f(mu) and certify the relative residual.

    ``method`` is "direct", "iterative" or None (auto: direct up to
    DIRECT_LIMIT points per axis, iterative above).  Raises SolveError when
    the certificate fails.
    """
    A = evaluate_operator(op, mu)
    f = evaluate_rhs(rhs, mu)
    fnorm = float(np.linalg.norm(f))
    if fnorm == 0.0:
        return np.zeros(op.dimension), 0.0

    if method is None:
        method = "direct" if math.isqrt(op.dimension) <= DIRECT_LIMIT else "iterative"
    if method == "direct":
        u = splu(A.tocsc()).solve(f)
    elif method == "iterative":
        u, info = gmres(A, f, rtol=solver_tol * 0.1, atol=0.0, restart=200, maxiter=maxiter)
        if info != 0:
            raise SolveError(f"iterative solver stopped with code {info} at mu={mu}")
    else:
        raise ValueError(f"unknown solve method {method!r}")

    rel = float(np.linalg.norm(A @ u - f)) / fnorm
    if not math.isfinite(rel) or rel > solver_tol:
        raise SolveError(f"solve at mu={mu} ended with relative residual {rel:.3e}")
    return u, rel


def snapshot(mu: Parameter, quality: QualitySpec, *, op=None, rhs=None,
             solver_tol=SOLVER_TOL, method=None) -> FullSolution:
    """Compute a certified full-order solution for one parameter.

    Pass preassembled ``op``/``rhs`` to skip reassembly in tight loops.
    """
    if op is None or rhs is None:
        op, rhs = assemble_problem(quality)
    if op.dimension != quality.dimension:
        raise ValueError("preassembled problem does not match the quality spec")
    u, rel = solve_full(op, rhs, mu, solver_tol=solver_tol, method=method)
    return FullSolution(mu, u, quality.discretization, rel)
