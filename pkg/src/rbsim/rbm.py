"""Reduced-basis core: Galerkin projection, fast residual norm, extension.

A reduced basis holds the snapshot matrix V (d x n, unit-norm columns) plus
every block that online work needs, all independent of the high dimension d:

    reduced operators   V^T A_i V                 (S_A blocks, n x n)
    reduced rhs         V^T f_j                   (S_f blocks, n)
    residual blocks     r1[i,j] = (A_i V)^T A_j V (S_A^2 blocks, n x n)
                        r2[i,j] = (A_i V)^T f_j   (S_A*S_f blocks, n)
                        r4[i,j] = f_i^T f_j       (S_f^2 scalars)

For coefficients u solving the reduced problem at mu, the exact residual norm
of the reconstructed solution follows from expanding || A(mu) V u - f(mu) ||^2:

    q = u^T [sum th_i th_j r1_ij] u - 2 u^T [sum th_i th_j r2_ij] + sum th_i th_j r4_ij

evaluated with the scalar coefficient values at mu, no d-dimensional work.
The transposed-family counterpart of r2 contains the same floats and is kept
only in the serialized form, not in memory.

Access to V is instrumented: every read bumps ``v_reads`` so tests can prove
that online code paths never touch high-dimensional data.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from rbsim.full_problem import (
    FullSolution,
    Parameter,
    QualitySpec,
    theta_matrix,
    theta_values,
)

log = logging.getLogger(__name__)

MODE_ORTHONORMAL = "orthonormal"
MODE_NORMALIZED = "normalized"
MODES = (MODE_ORTHONORMAL, MODE_NORMALIZED)
_MODE_CODES = {MODE_ORTHONORMAL: 0, MODE_NORMALIZED: 1}

#: Relative cutoff below which a new snapshot counts as dependent on the basis.
DEP_TOL = 1e-10

#: Singular-value cutoff (relative to the largest) for least-squares solves.
PINV_RCOND = 1e-12


class RBMError(Exception):
    """Base class for reduced-basis failures."""


class DegenerateBasisError(RBMError):
    """The reduced system is singular or the basis is malformed."""


class DependentSnapshotError(RBMError):
    """A new snapshot is (numerically) contained in the current basis."""


class SnapshotsNotLoadedError(RBMError):
    """High-dimensional snapshot data was requested from a metadata-only basis."""


@dataclass(eq=False)
class ReducedBasis:
    """Reduced basis with all precomputed online blocks.

    ``snapshots`` may be None for a metadata-only instance (loaded without the
    high-dimensional columns); everything except reconstruction still works.
    Instances are treated as immutable; extension returns a new one.
    """

    snapshot_params: tuple
    mode: str
    quality: QualitySpec
    theta_a_ids: tuple
    theta_f_ids: tuple
    red_A: np.ndarray = field(repr=False)  # (S_A, n, n)
    red_f: np.ndarray = field(repr=False)  # (S_f, n)
    r1: np.ndarray = field(repr=False)     # (S_A, S_A, n, n)
    r2: np.ndarray = field(repr=False)     # (S_A, S_f, n)
    r4: np.ndarray = field(repr=False)     # (S_f, S_f)
    snapshots: np.ndarray | None = field(repr=False, default=None)  # (d, n)
    v_reads: int = field(init=False, default=0, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown basis mode {self.mode!r}")
        n = len(self.snapshot_params)
        sa, sf = len(self.theta_a_ids), len(self.theta_f_ids)
        expected = {
            "red_A": (sa, n, n),
            "red_f": (sf, n),
            "r1": (sa, sa, n, n),
            "r2": (sa, sf, n),
            "r4": (sf, sf),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        if self.snapshots is not None and self.snapshots.shape != (self.quality.dimension, n):
            raise ValueError("snapshot matrix shape does not match d x n")

    @property
    def n(self) -> int:
        return len(self.snapshot_params)

    @property
    def s_a(self) -> int:
        return len(self.theta_a_ids)

    @property
    def s_f(self) -> int:
        return len(self.theta_f_ids)

    @property
    def dimension(self) -> int:
        return self.quality.dimension

    @property
    def has_snapshots(self) -> bool:
        return self.snapshots is not None

    @property
    def V(self) -> np.ndarray:
        """The snapshot matrix; reads are counted."""
        if self.snapshots is None:
            raise SnapshotsNotLoadedError(
                "basis holds reduced blocks only; snapshot columns were not loaded"
            )
        self.v_reads += 1
        return self.snapshots


def basis_identifier(basis: ReducedBasis) -> str:
    """Deterministic identity of a basis: grid size, mode, ordered snapshots.

    An empty basis gets a parseable sentinel so a server can answer a
    first-snapshot update without any shared state.
    """
    if basis.n == 0:
        return f"empty-{basis.quality.discretization}-{basis.mode}"
    h = hashlib.sha256()
    h.update(b"rbsim-basis-v1")
    h.update(struct.pack("<IIB", basis.quality.discretization, basis.n, _MODE_CODES[basis.mode]))
    for p in basis.snapshot_params:
        h.update(struct.pack("<3d", p.diff, p.advx, p.advy))
    return h.hexdigest()


def _check_unit_columns(V: np.ndarray):
    if V.shape[1] == 0:
        return
    norms = np.linalg.norm(V, axis=0)
    if np.any(norms == 0.0):
        raise DegenerateBasisError("basis contains a zero column")
    if np.abs(norms - 1.0).max() > 1e-12:
        raise DegenerateBasisError("basis columns must have unit norm")


def project(V: np.ndarray, op, rhs, *, params, mode: str, quality: QualitySpec) -> ReducedBasis:
    """Project the full problem onto span(V), precomputing all online blocks.

    ``params`` are the snapshot parameters the columns of V came from, in
    column order.  Cost is offline (one pass of sparse matrix times V per
    component); the result supports d-free solves and residuals.
    """
    V = np.ascontiguousarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != quality.dimension:
        raise ValueError("V must be a d x n matrix matching the quality spec")
    if V.shape[1] != len(params):
        raise ValueError("one snapshot parameter per column required")
    _check_unit_columns(V)

    sa, sf, n = op.n_terms, rhs.n_terms, V.shape[1]
    av = [m @ V for m in op.matrices]  # d x n per component
    red_a = np.stack([V.T @ av[i] for i in range(sa)]) if n else np.zeros((sa, 0, 0))
    red_f = np.stack([V.T @ f for f in rhs.vectors]) if n else np.zeros((sf, 0))

    r1 = np.zeros((sa, sa, n, n))
    r2 = np.zeros((sa, sf, n))
    for i in range(sa):
        for j in range(sa):
            r1[i, j] = av[i].T @ av[j]
        for j in range(sf):
            r2[i, j] = av[i].T @ rhs.vectors[j]
    r4 = np.array([[fi @ fj for fj in rhs.vectors] for fi in rhs.vectors])

    return ReducedBasis(
        snapshot_params=tuple(params),
        mode=mode,
        quality=quality,
        theta_a_ids=tuple(op.theta_ids),
        theta_f_ids=tuple(rhs.theta_ids),
        red_A=red_a,
        red_f=red_f,
        r1=r1,
        r2=r2,
        r4=r4,
        snapshots=V,
    )


def empty_basis(op, rhs, quality: QualitySpec, mode: str) -> ReducedBasis:
    """A basis with zero snapshots (answers are zero, residual is ||f||)."""
    V = np.zeros((quality.dimension, 0))
    return project(V, op, rhs, params=(), mode=mode, quality=quality)


@dataclass(frozen=True)
class ReducedSolution:
    """Reduced coefficients for one parameter plus the certified residual."""

    parameter: Parameter
    coefficients: np.ndarray
    residual_norm: float

    @property
    def n(self) -> int:
        return self.coefficients.shape[0]


def _reduced_system(blocks, mu: Parameter):
    ta = theta_values(blocks.theta_a_ids, mu)
    tf = theta_values(blocks.theta_f_ids, mu)
    mat = np.einsum("i,ijk->jk", ta, blocks.red_A)
    vec = np.einsum("j,jn->n", tf, blocks.red_f)
    return mat, vec


def solve_reduced(blocks, mu: Parameter, *, method: str = "direct") -> ReducedSolution:
    """Solve the n-dimensional Galerkin system at ``mu``.

    ``blocks`` is any object carrying the reduced block family (a basis or a
    trimmed view).  ``method`` "direct" uses an LU solve and raises
    DegenerateBasisError on singularity; "lstsq" takes the least-squares
    route with singular values below PINV_RCOND * sigma_max cut off, for
    near-dependent (normalized-only) bases.
    """
    n = blocks.red_f.shape[1]
    if n == 0:
        coeffs = np.zeros(0)
        return ReducedSolution(mu, coeffs, residual_norm_fast(blocks, mu, coeffs))
    mat, vec = _reduced_system(blocks, mu)
    if method == "direct":
        try:
            coeffs = np.linalg.solve(mat, vec)
        except np.linalg.LinAlgError as exc:
            raise DegenerateBasisError(f"reduced system singular at mu={mu}") from exc
    elif method == "lstsq":
        coeffs = np.linalg.lstsq(mat, vec, rcond=PINV_RCOND)[0]
    else:
        raise ValueError(f"unknown solve method {method!r}")
    if not np.all(np.isfinite(coeffs)):
        raise DegenerateBasisError(f"reduced solve produced non-finite values at mu={mu}")
    return ReducedSolution(mu, coeffs, residual_norm_fast(blocks, mu, coeffs))


def residual_norm_fast(blocks, mu: Parameter, coeffs: np.ndarray) -> float:
    """|| A(mu) V u - f(mu) || from precomputed blocks, no d-dimensional work.

    Round-off can push the squared norm a hair below zero near exactness; it
    is clamped to zero and the clamp magnitude logged.
    """
    ta = theta_values(blocks.theta_a_ids, mu)
    tf = theta_values(blocks.theta_f_ids, mu)
    m = np.einsum("i,j,ijkl->kl", ta, ta, blocks.r1)
    v = np.einsum("i,j,ijk->k", ta, tf, blocks.r2)
    c = float(np.einsum("i,j,ij->", tf, tf, blocks.r4))
    q = float(coeffs @ m @ coeffs) - 2.0 * float(v @ coeffs) + c
    if q < 0.0:
        log.debug("residual square clamped to 0 (was %.3e)", q)
        q = 0.0
    return float(np.sqrt(q))


def solve_many(blocks, params, *, method: str = "direct") -> np.ndarray:
    """Batched reduced solves, one row of coefficients per parameter."""
    n = blocks.red_f.shape[1]
    qn = len(params)
    if n == 0 or qn == 0:
        return np.zeros((qn, n))
    ta = theta_matrix(blocks.theta_a_ids, params)
    tf = theta_matrix(blocks.theta_f_ids, params)
    mats = np.einsum("qi,ijk->qjk", ta, blocks.red_A)
    vecs = np.einsum("qj,jn->qn", tf, blocks.red_f)
    if method == "direct":
        try:
            coeffs = np.linalg.solve(mats, vecs[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            log.warning("batched direct solve hit a singular system; using least squares")
            coeffs = _lstsq_batch(mats, vecs)
    elif method == "lstsq":
        coeffs = _lstsq_batch(mats, vecs)
    else:
        raise ValueError(f"unknown solve method {method!r}")
    if not np.all(np.isfinite(coeffs)):
        raise DegenerateBasisError("batched reduced solve produced non-finite values")
    return coeffs


def _lstsq_batch(mats, vecs):
    pinv = np.linalg.pinv(mats, rcond=PINV_RCOND)
    return np.einsum("qnk,qk->qn", pinv, vecs)


def residual_many(blocks, params, coeffs: np.ndarray) -> np.ndarray:
    """Batched fast residual norms for rows of ``coeffs`` at ``params``."""
    ta = theta_matrix(blocks.theta_a_ids, params)
    tf = theta_matrix(blocks.theta_f_ids, params)
    m = np.einsum("qi,qj,ijkl->qkl", ta, ta, blocks.r1, optimize=True)
    q1 = np.einsum("qk,qkl,ql->q", coeffs, m, coeffs, optimize=True)
    v = np.einsum("qi,qj,ijk->qk", ta, tf, blocks.r2, optimize=True)
    q2 = np.einsum("qk,qk->q", v, coeffs)
    q3 = np.einsum("qi,qj,ij->q", tf, tf, blocks.r4, optimize=True)
    q = q1 - 2.0 * q2 + q3
    neg = q < 0.0
    if np.any(neg):
        log.debug("residual squares clamped to 0 at %d parameters (worst %.3e)",
                  int(neg.sum()), float(q[neg].min()))
        q = np.where(neg, 0.0, q)
    return np.sqrt(q)


def reconstruct(V: np.ndarray, solution: ReducedSolution) -> np.ndarray:
    """Lift reduced coefficients back to the full grid: V @ u."""
    return V @ solution.coefficients


# -- extension ---------------------------------------------------------------

def prepare_column(basis: ReducedBasis, values: np.ndarray, *, dep_tol: float = DEP_TOL) -> np.ndarray:
    """Turn a raw snapshot into the next basis column for the basis mode.

    Orthonormal mode runs Gram-Schmidt against V twice and rejects snapshots
    whose orthogonal remainder falls under ``dep_tol`` relative to the input.
    Normalized-only mode just scales to unit norm.
    """
    values = np.asarray(values, dtype=np.float64)
    norm0 = float(np.linalg.norm(values))
    if norm0 == 0.0:
        raise DependentSnapshotError("zero snapshot cannot extend a basis")
    if basis.mode == MODE_NORMALIZED:
        return values / norm0
    V = basis.V
    w = values - V @ (V.T @ values)
    w = w - V @ (V.T @ w)  # second pass for orthogonality to machine precision
    nrm = float(np.linalg.norm(w))
    if nrm <= dep_tol * norm0:
        raise DependentSnapshotError(
            f"snapshot is contained in the basis (remainder {nrm:.3e} of {norm0:.3e})"
        )
    return w / nrm


@dataclass(frozen=True)
class ExtensionBorder:
    """Border rows/columns that adding one column v appends to each block.

    Existing entries are untouched by an extension, so these arrays plus the
    column itself fully describe a basis of size n+1 given one of size n.
    """

    a_col: np.ndarray     # (S_A, n)   V^T A_i v
    a_row: np.ndarray     # (S_A, n)   v^T A_i V
    a_corner: np.ndarray  # (S_A,)     v^T A_i v
    r1_col: np.ndarray    # (S_A, S_A, n)  (A_i V)^T (A_j v)
    r1_row: np.ndarray    # (S_A, S_A, n)  (A_i v)^T (A_j V)
    r1_corner: np.ndarray  # (S_A, S_A)    (A_i v)^T (A_j v)
    f_new: np.ndarray     # (S_f,)     v^T f_j
    r2_new: np.ndarray    # (S_A, S_f) (A_i v)^T f_j


def extension_border(basis: ReducedBasis, v: np.ndarray, op, rhs) -> ExtensionBorder:
    """Compute the border blocks for appending unit column ``v``."""
    V = basis.V if basis.n else np.zeros((basis.dimension, 0))
    sa, sf, n = basis.s_a, basis.s_f, basis.n
    av = [m @ V for m in op.matrices]
    avv = [m @ v for m in op.matrices]

    a_col = np.stack([V.T @ avv[i] for i in range(sa)]) if n else np.zeros((sa, 0))
    a_row = np.stack([v @ av[i] for i in range(sa)]) if n else np.zeros((sa, 0))
    a_corner = np.array([v @ avv[i] for i in range(sa)])

    r1_col = np.zeros((sa, sa, n))
    r1_row = np.zeros((sa, sa, n))
    r1_corner = np.empty((sa, sa))
    for i in range(sa):
        for j in range(sa):
            if n:
                r1_col[i, j] = av[i].T @ avv[j]
                r1_row[i, j] = avv[i] @ av[j]
            r1_corner[i, j] = avv[i] @ avv[j]

    f_new = np.array([v @ f for f in rhs.vectors])
    r2_new = np.array([[avv[i] @ f for f in rhs.vectors] for i in range(sa)])
    return ExtensionBorder(a_col, a_row, a_corner, r1_col, r1_row, r1_corner, f_new, r2_new)


def apply_border(basis: ReducedBasis, border: ExtensionBorder, new_param: Parameter,
                 v: np.ndarray | None) -> ReducedBasis:
    """Splice border blocks (and optionally the new column) into a new basis.

    Existing block entries are copied bitwise unchanged; only the border is
    new.  When the basis is metadata-only, pass v=None and the result stays
    metadata-only.
    """
    sa, sf, n = basis.s_a, basis.s_f, basis.n

    red_a = np.zeros((sa, n + 1, n + 1))
    red_a[:, :n, :n] = basis.red_A
    red_a[:, :n, n] = border.a_col
    red_a[:, n, :n] = border.a_row
    red_a[:, n, n] = border.a_corner

    red_f = np.zeros((sf, n + 1))
    red_f[:, :n] = basis.red_f
    red_f[:, n] = border.f_new

    r1 = np.zeros((sa, sa, n + 1, n + 1))
    r1[:, :, :n, :n] = basis.r1
    r1[:, :, :n, n] = border.r1_col
    r1[:, :, n, :n] = border.r1_row
    r1[:, :, n, n] = border.r1_corner

    r2 = np.zeros((sa, sf, n + 1))
    r2[:, :, :n] = basis.r2
    r2[:, :, n] = border.r2_new

    snapshots = None
    if v is not None and basis.has_snapshots:
        snapshots = np.concatenate([basis.V, v[:, None]], axis=1)

    return ReducedBasis(
        snapshot_params=basis.snapshot_params + (new_param,),
        mode=basis.mode,
        quality=basis.quality,
        theta_a_ids=basis.theta_a_ids,
        theta_f_ids=basis.theta_f_ids,
        red_A=red_a,
        red_f=red_f,
        r1=r1,
        r2=r2,
        r4=basis.r4.copy(),
        snapshots=snapshots,
    )


def extend_basis(basis: ReducedBasis, snap: FullSolution, op, rhs, *,
                 dep_tol: float = DEP_TOL) -> ReducedBasis:
    """Extend a basis by one snapshot, reusing all existing block entries."""
    if snap.discretization != basis.quality.discretization:
        raise ValueError("snapshot grid does not match the basis grid")
    v = prepare_column(basis, snap.values, dep_tol=dep_tol)
    border = extension_border(basis, v, op, rhs)
    return apply_border(basis, border, snap.parameter, v)


def prefix_basis(basis: ReducedBasis, m: int) -> ReducedBasis:
    """The basis made of the first m snapshots, as standalone copies.

    Extensions only append borders, so the leading m x m sub-blocks are
    bit-identical to what building from the first m snapshots produces.
    """
    if not 0 <= m <= basis.n:
        raise ValueError(f"cannot take {m}-snapshot prefix of {basis.n}")
    return ReducedBasis(
        snapshot_params=basis.snapshot_params[:m],
        mode=basis.mode,
        quality=basis.quality,
        theta_a_ids=basis.theta_a_ids,
        theta_f_ids=basis.theta_f_ids,
        red_A=basis.red_A[:, :m, :m].copy(),
        red_f=basis.red_f[:, :m].copy(),
        r1=basis.r1[:, :, :m, :m].copy(),
        r2=basis.r2[:, :, :m].copy(),
        r4=basis.r4.copy(),
        snapshots=basis.snapshots[:, :m].copy() if basis.has_snapshots else None,
    )
