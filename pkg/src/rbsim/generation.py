"""Offline basis generation: greedy sampling over a training set.

The greedy loop repeatedly solves the reduced problem for every training
parameter (cheap, fast residual), takes the worst one, computes its full
snapshot (expensive, only here), and extends the basis, until every training
residual sits below the requested bound.

The reorder variant generates bases meant for the reorder answering strategy:
it drives the same loop with the *reorder residual*, the residual left after
sorting snapshots by coefficient magnitude and dropping the trailing ``a``
of them.  The margin ``a`` is a constant offset from the basis size, never a
fixed cut, so the guarantee adapts as the basis grows.  Such bases keep raw
normalized snapshots as columns; orthogonalization would mix snapshots and
destroy the per-snapshot meaning the reordering relies on.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from rbsim.full_problem import (
    Parameter,
    QualitySpec,
    assemble_problem,
    snapshot,
    theta_matrix,
)
from rbsim.rbm import (
    MODE_NORMALIZED,
    MODE_ORTHONORMAL,
    DependentSnapshotError,
    RBMError,
    empty_basis,
    extend_basis,
    residual_many,
    solve_many,
    _lstsq_batch,
)
from rbsim.strategies import apply_reorder, find_reorder, solve_reduced, trim

log = logging.getLogger(__name__)

PRESET_RANGES = {
    "A": ((10.0, 20.0), (0.0, 40.0), (0.0, 40.0)),
    "B": ((10.0, 20.0), (-40.0, 40.0), (0.0, 40.0)),
    "C": ((10.0, 20.0), (-40.0, 40.0), (-40.0, 40.0)),
}

MAX_ITERS = 200


class NonConvergenceError(RBMError):
    """Generation hit its iteration cap or ran out of independent snapshots."""

    def __init__(self, message, log_so_far=None):
        super().__init__(message)
        self.log = log_so_far


def _axis_values(lo: float, hi: float, step: float) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    return np.arange(lo, hi + 1e-9 * step, step)


@dataclass(frozen=True)
class TrainingSet:
    """A finite set of training parameters, optionally with its box ranges."""

    parameters: tuple
    name: str = "custom"
    ranges: tuple | None = None  # ((diff lo,hi), (advx lo,hi), (advy lo,hi))

    def __post_init__(self):
        if not self.parameters:
            raise ValueError("training set must not be empty")

    def __len__(self) -> int:
        return len(self.parameters)

    @classmethod
    def preset(cls, name: str, step: float = 1.0) -> "TrainingSet":
        """Named parameter boxes A, B, C discretized with a uniform step.

        A keeps both advection components non-negative, B lets the x
        component change sign, C both.  A is contained in B, B in C.
        """
        if name not in PRESET_RANGES:
            raise ValueError(f"unknown preset {name!r}, have {sorted(PRESET_RANGES)}")
        ranges = PRESET_RANGES[name]
        axes = [_axis_values(lo, hi, step) for lo, hi in ranges]
        params = tuple(
            Parameter(d, ax, ay) for d, ax, ay in itertools.product(*axes)
        )
        return cls(params, name=name, ranges=ranges)

    def sample(self, count: int, rng) -> tuple:
        """Uniform random parameters from the box this set was built on."""
        if self.ranges is None:
            raise ValueError("training set has no ranges to sample from")
        return tuple(
            Parameter(*(rng.uniform(lo, hi) for lo, hi in self.ranges))
            for _ in range(count)
        )


@dataclass
class IterationRecord:
    chosen: Parameter
    max_residual: float  # over the training set, before this extension
    skipped: tuple = ()


@dataclass
class GenerationLog:
    """Audit trail of one generation run."""

    method: str
    seed: int | None
    initial: Parameter | None = None
    iterations: list = field(default_factory=list)
    residual_trace: list = field(default_factory=list)  # max residual after each extension
    converged: bool = False


@dataclass
class GenerationResult:
    basis: object
    log: GenerationLog


def _pick_candidate(residuals, train, basis, max_res):
    """Worst training parameter not already in the basis; ties by set order."""
    members = set(basis.snapshot_params)
    order = np.argsort(-residuals, kind="stable")
    skipped = []
    for idx in order:
        if residuals[idx] < max_res:
            break
        mu = train.parameters[int(idx)]
        if mu in members:
            skipped.append(mu)
            continue
        return mu, float(residuals[idx]), tuple(skipped)
    return None, None, tuple(skipped)


def greedy_generate(train: TrainingSet, quality: QualitySpec, initial: Parameter | None = None,
                    *, mode: str = MODE_ORTHONORMAL, max_iters: int = MAX_ITERS,
                    seed: int | None = None, stop_n: int | None = None,
                    op=None, rhs=None) -> GenerationResult:
    """Greedy basis generation until every training residual is < max_res.

    Starts from the snapshot of ``initial`` (or of a random training
    parameter when None; ``seed`` fixes the choice).  Snapshots whose
    orthogonal remainder vanishes are skipped with a log entry, the
    next-worst parameter is taken instead.  ``stop_n`` caps the basis size
    without claiming convergence (useful for fixed-size studies).
    """
    if op is None or rhs is None:
        op, rhs = assemble_problem(quality)
    rng = np.random.default_rng(seed)
    genlog = GenerationLog(method="greedy", seed=seed)

    if initial is None:
        initial = train.parameters[int(rng.integers(len(train)))]
    genlog.initial = initial

    basis = empty_basis(op, rhs, quality, mode)
    basis = extend_basis(basis, snapshot(initial, quality, op=op, rhs=rhs), op, rhs)

    while True:
        residuals = residual_many(basis, train.parameters, solve_many(basis, train.parameters))
        worst = float(residuals.max())
        genlog.residual_trace.append(worst)
        if worst < quality.max_res:
            genlog.converged = True
            break
        if stop_n is not None and basis.n >= stop_n:
            break
        if len(genlog.iterations) >= max_iters:
            raise NonConvergenceError(
                f"greedy did not converge within {max_iters} extensions "
                f"(max residual {worst:.3e})", genlog)

        chosen, res, skipped = _pick_candidate(residuals, train, basis, quality.max_res)
        candidate_pool = skipped
        extended = None
        while chosen is not None:
            try:
                extended = extend_basis(basis, snapshot(chosen, quality, op=op, rhs=rhs), op, rhs)
                break
            except DependentSnapshotError:
                log.info("snapshot at %s is dependent, trying next-worst", chosen)
                candidate_pool = candidate_pool + (chosen,)
                masked = residuals.copy()
                for mu in candidate_pool:
                    masked[train.parameters.index(mu)] = -np.inf
                chosen, res, more = _pick_candidate(masked, train, basis, quality.max_res)
                candidate_pool = candidate_pool + more
        if extended is None:
            raise NonConvergenceError(
                "no independent snapshot left above the residual bound", genlog)
        genlog.iterations.append(IterationRecord(chosen, worst, candidate_pool))
        basis = extended

    return GenerationResult(basis, genlog)


def reorder_residual(basis, l: int, mu: Parameter, *, method: str = "lstsq") -> float:
    """Residual after reordering for ``mu`` and trimming to the l leading
    snapshots; l <= 0 degenerates to the empty-basis residual ||f(mu)||."""
    if l <= 0:
        return solve_reduced(trim(basis, 0), mu, method=method).residual_norm
    reordering = find_reorder(basis, mu, method=method)
    permuted = apply_reorder(_metadata_only(basis), reordering)
    return solve_reduced(trim(permuted, l), mu, method=method).residual_norm


def _metadata_only(basis):
    return replace(basis, snapshots=None) if basis.has_snapshots else basis


def reorder_residual_many(basis, params, l: int, *, method: str = "lstsq") -> np.ndarray:
    """Batched reorder residuals; the same math as reorder_residual, with the
    per-parameter permutation applied by gather indexing."""
    qn, n = len(params), basis.n
    if l <= 0:
        return residual_many(trim(basis, 0), params, np.zeros((qn, 0)))
    if l > n:
        raise ValueError(f"cannot keep {l} of {n} snapshots")

    coeffs = solve_many(basis, params, method=method)
    orders = np.argsort(-np.abs(coeffs), axis=1, kind="stable")[:, :l]
    q1 = np.arange(qn)[:, None]        # broadcast helpers for per-query gathers
    q2 = np.arange(qn)[:, None, None]

    ta = theta_matrix(basis.theta_a_ids, params)
    tf = theta_matrix(basis.theta_f_ids, params)
    mats = np.einsum("qi,ijk->qjk", ta, basis.red_A)[q2, orders[:, :, None], orders[:, None, :]]
    vecs = np.einsum("qj,jn->qn", tf, basis.red_f)[q1, orders]
    if method == "lstsq":
        sub = _lstsq_batch(mats, vecs)
    else:
        sub = np.linalg.solve(mats, vecs[:, :, None])[:, :, 0]

    m_full = np.einsum("qi,qj,ijkl->qkl", ta, ta, basis.r1, optimize=True)
    m_sub = m_full[q2, orders[:, :, None], orders[:, None, :]]
    v_sub = np.einsum("qi,qj,ijk->qk", ta, tf, basis.r2, optimize=True)[q1, orders]
    c = np.einsum("qi,qj,ij->q", tf, tf, basis.r4, optimize=True)

    q = (np.einsum("qk,qkl,ql->q", sub, m_sub, sub, optimize=True)
         - 2.0 * np.einsum("qk,qk->q", v_sub, sub) + c)
    neg = q < 0.0
    if np.any(neg):
        log.debug("reorder residual squares clamped at %d parameters", int(neg.sum()))
        q = np.where(neg, 0.0, q)
    return np.sqrt(q)


def reorder_generate(train: TrainingSet, a: int, quality: QualitySpec,
                     *, mode: str = MODE_NORMALIZED, max_iters: int = MAX_ITERS,
                     seed: int | None = None, stop_n: int | None = None,
                     op=None, rhs=None) -> GenerationResult:
    """Generate a basis certified for reorder answering with margin ``a``.

    Terminates once, for every training parameter, the residual after
    reordering and dropping the trailing ``a`` snapshots is below max_res.
    Parameters already in the basis are skipped when picking the worst
    (re-adding an identical raw snapshot could never improve anything).
    """
    if a < 0:
        raise ValueError("margin a must be >= 0")
    if op is None or rhs is None:
        op, rhs = assemble_problem(quality)
    rng = np.random.default_rng(seed)
    genlog = GenerationLog(method="reorder", seed=seed)

    initial = train.parameters[int(rng.integers(len(train)))]
    genlog.initial = initial
    basis = empty_basis(op, rhs, quality, mode)
    basis = extend_basis(basis, snapshot(initial, quality, op=op, rhs=rhs), op, rhs)

    while True:
        residuals = reorder_residual_many(basis, train.parameters, basis.n - a)
        worst = float(residuals.max())
        genlog.residual_trace.append(worst)
        if worst < quality.max_res:
            genlog.converged = True
            break
        if stop_n is not None and basis.n >= stop_n:
            break
        if len(genlog.iterations) >= max_iters:
            raise NonConvergenceError(
                f"reorder generation did not converge within {max_iters} extensions "
                f"(max reorder residual {worst:.3e})", genlog)

        chosen, res, skipped = _pick_candidate(residuals, train, basis, quality.max_res)
        if chosen is None:
            raise NonConvergenceError(
                "all above-bound parameters are already in the basis", genlog)
        if skipped:
            log.info("reorder generation skipped %d basis members", len(skipped))
        basis = extend_basis(basis, snapshot(chosen, quality, op=op, rhs=rhs), op, rhs)
        genlog.iterations.append(IterationRecord(chosen, worst, skipped))

    return GenerationResult(basis, genlog)
