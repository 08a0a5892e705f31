"""Online answering strategies over a reduced basis.

All strategies answer a query from precomputed blocks; only the final
reconstruction touches high-dimensional data, and then only as many snapshot
columns as the strategy actually needs:

  basic     solve on all n snapshots, report the certified residual
  subspace  descending search for the smallest leading block that still
            meets the residual bound; only m snapshot columns are used
  reorder   first permute snapshots by coefficient magnitude for the query,
            then run the subspace search on the permuted blocks

Trimming and reordering are pure index remappings of the block families,
zero work in the high dimension.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from rbsim.full_problem import Parameter
from rbsim.rbm import (
    MODE_ORTHONORMAL,
    RBMError,
    ReducedBasis,
    solve_reduced,
)

log = logging.getLogger(__name__)


class QualityUnreachableError(RBMError):
    """Even the full basis misses the residual bound for this query.

    Carries the best available solution so an adaptive caller can decide to
    fetch a basis update or to return the answer flagged as degraded.
    """

    def __init__(self, query, solution):
        super().__init__(
            f"residual {solution.residual_norm:.3e} exceeds bound {query.bound:.3e} "
            f"at mu={query.parameter}"
        )
        self.query = query
        self.solution = solution


@dataclass(frozen=True)
class Query:
    """One simulation request: a parameter and the residual bound to meet.

    ``max_res`` None means "use the bound the basis was generated for".
    """

    parameter: Parameter
    max_res: float | None = None

    def __post_init__(self):
        if self.max_res is not None and not self.max_res > 0.0:
            raise ValueError("max_res must be positive when given")
        object.__setattr__(self, "_bound", self.max_res)

    @property
    def bound(self):
        return self._bound

    def resolve_bound(self, quality) -> "Query":
        if self.max_res is not None:
            return self
        q = Query(self.parameter, quality.max_res)
        return q


@dataclass
class QueryAnswer:
    """A served answer: reconstructed field plus its certificate and costs."""

    parameter: Parameter
    values: np.ndarray = field(repr=False)
    residual_norm: float
    snapshots_used: int
    strategy: str
    quality_ok: bool = True
    served_remotely: bool = False
    metrics: dict = field(default_factory=dict)


def _default_method(blocks) -> str:
    return "direct" if blocks.mode == MODE_ORTHONORMAL else "lstsq"


@dataclass(frozen=True, eq=False)
class SubspaceView:
    """Leading m x m slice of a basis's block family.

    Arrays are numpy views into the parent blocks, never copies, so trimming
    costs nothing in the reduced dimension and less in the full one.
    """

    m: int
    mode: str
    quality: object
    theta_a_ids: tuple
    theta_f_ids: tuple
    snapshot_params: tuple
    red_A: np.ndarray = field(repr=False)
    red_f: np.ndarray = field(repr=False)
    r1: np.ndarray = field(repr=False)
    r2: np.ndarray = field(repr=False)
    r4: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.m


def trim(blocks, m: int) -> SubspaceView:
    """View of the leading m snapshots' blocks (m = 0 gives the empty view)."""
    n = blocks.red_f.shape[1]
    if not 0 <= m <= n:
        raise ValueError(f"cannot trim a basis of {n} snapshots to m={m}")
    return SubspaceView(
        m=m,
        mode=blocks.mode,
        quality=blocks.quality,
        theta_a_ids=blocks.theta_a_ids,
        theta_f_ids=blocks.theta_f_ids,
        snapshot_params=tuple(blocks.snapshot_params[:m]),
        red_A=blocks.red_A[:, :m, :m],
        red_f=blocks.red_f[:, :m],
        r1=blocks.r1[:, :, :m, :m],
        r2=blocks.r2[:, :, :m],
        r4=blocks.r4,
    )


def subspace_select(basis, query: Query, *, method: str | None = None, stats: dict | None = None):
    """Find the smallest leading block of the basis that meets the bound.

    Starts at m = n and walks down while the residual still fulfills the
    query, so the returned m is the smallest for which every level from m to
    n fulfills it.  Raises QualityUnreachableError when even m = n misses.

    ``stats`` (optional dict) receives ``levels`` (accepted levels, n-m+1)
    and ``residual_evals`` (including the one failing probe, when there is
    one).
    """
    query = query.resolve_bound(basis.quality)
    method = method or _default_method(basis)
    n = basis.red_f.shape[1]

    view = trim(basis, n)
    sol = solve_reduced(view, query.parameter, method=method)
    evals = 1
    if sol.residual_norm > query.bound:
        if stats is not None:
            stats.update(levels=0, residual_evals=evals)
        raise QualityUnreachableError(query, sol)

    while view.m > 1:
        probe_view = trim(basis, view.m - 1)
        probe = solve_reduced(probe_view, query.parameter, method=method)
        evals += 1
        if probe.residual_norm > query.bound:
            break
        view, sol = probe_view, probe

    if stats is not None:
        stats.update(levels=n - view.m + 1, residual_evals=evals)
    return view, sol


@dataclass(frozen=True)
class Reordering:
    """A permutation of snapshot positions; order[k] is the old index that
    moves to position k."""

    order: tuple

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError("reordering must be a permutation of 0..n-1")

    @property
    def n(self) -> int:
        return len(self.order)

    @classmethod
    def identity(cls, n: int) -> "Reordering":
        return cls(tuple(range(n)))

    def inverse(self) -> "Reordering":
        inv = [0] * self.n
        for new, old in enumerate(self.order):
            inv[old] = new
        return Reordering(tuple(inv))


def find_reorder(basis, mu: Parameter, *, method: str | None = None) -> Reordering:
    """Order snapshots by falling coefficient magnitude for this parameter.

    Ties keep their original relative order (stable sort).  Works on
    orthonormal bases too, but ordering mixed directions is less meaningful,
    so that case is logged.
    """
    if basis.mode == MODE_ORTHONORMAL:
        log.info("reordering an orthonormal basis; its columns mix snapshots, "
                 "ordering by coefficient is less meaningful there")
    sol = solve_reduced(basis, mu, method=method or _default_method(basis))
    order = np.argsort(-np.abs(sol.coefficients), kind="stable")
    return Reordering(tuple(int(i) for i in order))


def apply_reorder(basis: ReducedBasis, reordering: Reordering) -> ReducedBasis:
    """Permute all blocks (and V, when present) by pure index remapping.

    Equivalent to conjugating each block with the permutation matrix, without
    ever forming one.  The permuted basis has a different identifier since
    snapshot order is part of a basis's identity.
    """
    if reordering.n != basis.n:
        raise ValueError("reordering size does not match the basis")
    order = np.asarray(reordering.order, dtype=np.intp)
    return ReducedBasis(
        snapshot_params=tuple(basis.snapshot_params[i] for i in order),
        mode=basis.mode,
        quality=basis.quality,
        theta_a_ids=basis.theta_a_ids,
        theta_f_ids=basis.theta_f_ids,
        red_A=basis.red_A[:, order, :][:, :, order],
        red_f=basis.red_f[:, order],
        r1=basis.r1[:, :, order, :][:, :, :, order],
        r2=basis.r2[:, :, order],
        r4=basis.r4.copy(),
        snapshots=basis.snapshots[:, order] if basis.has_snapshots else None,
    )


def _memory_loader(basis):
    def load(m, perm=None):
        V = basis.V
        if perm is None:
            return V[:, :m]
        return V[:, np.asarray(perm[:m], dtype=np.intp)]
    return load


def answer_basic(basis, query: Query, *, load_columns=None) -> QueryAnswer:
    """Solve on the full basis and reconstruct; certificate reported as-is."""
    query = query.resolve_bound(basis.quality)
    sol = solve_reduced(basis, query.parameter, method=_default_method(basis))
    load = load_columns or _memory_loader(basis)
    values = load(basis.n) @ sol.coefficients
    return QueryAnswer(
        parameter=query.parameter,
        values=values,
        residual_norm=sol.residual_norm,
        snapshots_used=basis.n,
        strategy="basic",
        quality_ok=sol.residual_norm <= query.bound,
    )


def answer_subspace(basis, query: Query, *, load_columns=None) -> QueryAnswer:
    """Subspace answer: reconstruct from the m leading snapshot columns."""
    query = query.resolve_bound(basis.quality)
    stats: dict = {}
    view, sol = subspace_select(basis, query, stats=stats)
    load = load_columns or _memory_loader(basis)
    values = load(view.m) @ sol.coefficients
    return QueryAnswer(
        parameter=query.parameter,
        values=values,
        residual_norm=sol.residual_norm,
        snapshots_used=view.m,
        strategy="subspace",
        quality_ok=True,
        metrics=stats,
    )


def answer_reorder(basis, query: Query, *, load_columns=None) -> QueryAnswer:
    """Reorder answer: permute blocks for the query, then trim.

    The search runs entirely on permuted metadata; afterwards exactly the m
    snapshot columns named by the head of the permutation are loaded.
    """
    query = query.resolve_bound(basis.quality)
    reordering = find_reorder(basis, query.parameter)
    meta = replace(basis, snapshots=None)  # keep the permutation d-free
    permuted = apply_reorder(meta, reordering)
    stats: dict = {}
    view, sol = subspace_select(permuted, query, stats=stats)
    load = load_columns or _memory_loader(basis)
    values = load(view.m, perm=reordering.order) @ sol.coefficients
    stats["order_head"] = tuple(reordering.order[: view.m])
    return QueryAnswer(
        parameter=query.parameter,
        values=values,
        residual_norm=sol.residual_norm,
        snapshots_used=view.m,
        strategy="reorder",
        quality_ok=True,
        metrics=stats,
    )
