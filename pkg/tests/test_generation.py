"""Basis generation: preset training sets, greedy convergence and audit log,
reorder residuals (batched vs single route), reorder generation."""

import numpy as np
import pytest

from rbsim.full_problem import Parameter, QualitySpec, assemble_problem, evaluate_rhs, snapshot
from rbsim.generation import (
    NonConvergenceError,
    TrainingSet,
    greedy_generate,
    reorder_generate,
    reorder_residual,
    reorder_residual_many,
)
from rbsim.rbm import reconstruct, residual_many, solve_many, solve_reduced

from util import make_basis, random_params


def test_preset_shapes_and_containment():
    a = TrainingSet.preset("A")
    b = TrainingSet.preset("B")
    c = TrainingSet.preset("C")
    assert len(a) == 11 * 41 * 41
    assert len(b) == 11 * 81 * 41
    assert len(c) == 11 * 81 * 81
    sa, sb, sc = set(a.parameters), set(b.parameters), set(c.parameters)
    assert sa < sb < sc
    assert a.ranges == ((10.0, 20.0), (0.0, 40.0), (0.0, 40.0))


def test_preset_desk_scale_step():
    a = TrainingSet.preset("A", step=4.0)
    diffs = sorted({p.diff for p in a.parameters})
    advs = sorted({p.advx for p in a.parameters})
    assert diffs == [10.0, 14.0, 18.0]  # the step does not divide the range
    assert advs == [0.0, 4.0, 8.0, 12.0, 16.0, 20.0, 24.0, 28.0, 32.0, 36.0, 40.0]
    assert len(a) == 3 * 11 * 11
    with pytest.raises(ValueError):
        TrainingSet.preset("A", step=0.0)
    with pytest.raises(ValueError):
        TrainingSet.preset("Z")


def test_preset_sampling_is_in_range_and_seeded():
    c = TrainingSet.preset("C", step=8.0)
    pts1 = c.sample(50, np.random.default_rng(9))
    pts2 = c.sample(50, np.random.default_rng(9))
    assert pts1 == pts2
    for p in pts1:
        assert 10.0 <= p.diff <= 20.0
        assert -40.0 <= p.advx <= 40.0
        assert -40.0 <= p.advy <= 40.0
    with pytest.raises(ValueError):
        TrainingSet((Parameter(1, 0, 0),)).sample(3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        TrainingSet(())


@pytest.fixture(scope="module")
def small_greedy():
    train = TrainingSet.preset("A", step=8.0)  # 2 * 6 * 6 = 72 parameters
    quality = QualitySpec(8, 1e-3)
    return greedy_generate(train, quality, seed=1234), train, quality


def test_greedy_converges_and_certifies(small_greedy):
    result, train, quality = small_greedy
    basis = result.basis
    assert result.log.converged
    assert basis.mode == "orthonormal"
    residuals = residual_many(basis, train.parameters, solve_many(basis, train.parameters))
    assert residuals.max() < quality.max_res
    assert basis.n == len(result.log.iterations) + 1  # initial snapshot plus extensions


def test_greedy_trace_non_increasing(small_greedy):
    result, _, _ = small_greedy
    trace = result.log.residual_trace
    assert len(trace) == result.basis.n
    for earlier, later in zip(trace, trace[1:]):
        assert later <= earlier + 1e-9


def test_greedy_log_and_determinism(small_greedy):
    result, train, quality = small_greedy
    assert result.log.seed == 1234
    assert result.log.initial in train.parameters
    assert result.log.initial == result.basis.snapshot_params[0]
    for rec, mu in zip(result.log.iterations, result.basis.snapshot_params[1:]):
        assert rec.chosen == mu
        assert rec.max_residual >= quality.max_res

    again = greedy_generate(train, quality, seed=1234)
    assert again.basis.snapshot_params == result.basis.snapshot_params

    different = greedy_generate(train, quality, seed=77)
    # a different seed picks a different initial snapshot (72 choices)
    assert different.log.initial != result.log.initial
    assert different.log.converged


def test_greedy_exact_at_chosen_snapshots(small_greedy):
    result, _, quality = small_greedy
    basis = result.basis
    op, rhs = assemble_problem(quality)
    for mu in basis.snapshot_params[:4]:
        full = snapshot(mu, quality, op=op, rhs=rhs)
        sol = solve_reduced(basis, mu)
        fnorm = np.linalg.norm(evaluate_rhs(rhs, mu))
        assert np.linalg.norm(reconstruct(basis.V, sol) - full.values) <= 1e-8 * fnorm


def test_greedy_single_parameter_training_set():
    train = TrainingSet((Parameter(12.0, 5.0, 5.0),))
    result = greedy_generate(train, QualitySpec(8, 1e-3), seed=0)
    assert result.basis.n == 1
    assert result.log.converged
    assert result.log.iterations == []


def test_greedy_explicit_initial_and_stop_n():
    train = TrainingSet.preset("B", step=8.0)
    initial = Parameter(18.0, 8.0, 16.0)
    result = greedy_generate(train, QualitySpec(8, 1e-12), initial=initial, stop_n=4, seed=5)
    assert result.basis.snapshot_params[0] == initial
    assert result.basis.n == 4
    assert not result.log.converged


def test_greedy_iteration_cap_raises():
    train = TrainingSet.preset("A", step=8.0)
    with pytest.raises(NonConvergenceError) as err:
        greedy_generate(train, QualitySpec(8, 1e-12), max_iters=2, seed=0)
    assert err.value.log is not None
    assert len(err.value.log.iterations) == 2


def test_reorder_residual_edges():
    rng = np.random.default_rng(55)
    basis, op, rhs = make_basis(8, random_params(rng, 5), mode="normalized")
    mu = Parameter(6.0, 3.0, 3.0)
    fnorm = np.linalg.norm(evaluate_rhs(rhs, mu))
    assert abs(reorder_residual(basis, 0, mu) - fnorm) <= 1e-12 * fnorm
    assert abs(reorder_residual(basis, -2, mu) - fnorm) <= 1e-12 * fnorm
    # keeping all snapshots: reordering cannot change the achievable residual
    full = solve_reduced(basis, mu, method="lstsq").residual_norm
    assert abs(reorder_residual(basis, basis.n, mu) - full) <= 1e-9 * (1 + full)
    with pytest.raises(ValueError):
        reorder_residual_many(basis, [mu], basis.n + 1)


def test_reorder_residual_batched_matches_single_route():
    # the batched gather path against the find/apply/trim composition
    rng = np.random.default_rng(56)
    basis, _, _ = make_basis(10, random_params(rng, 7), mode="normalized")
    queries = random_params(rng, 25)
    for l in (1, 3, 5, 7):
        batched = reorder_residual_many(basis, queries, l)
        for q, mu in enumerate(queries):
            single = reorder_residual(basis, l, mu)
            assert abs(batched[q] - single) <= 1e-9 * (1.0 + single)


@pytest.fixture(scope="module")
def small_reorder():
    train = TrainingSet.preset("A", step=8.0)
    quality = QualitySpec(8, 1e-3)
    return reorder_generate(train, 3, quality, seed=4321), train, quality


def test_reorder_generation_converges_with_margin(small_reorder):
    result, train, quality = small_reorder
    basis = result.basis
    assert result.log.converged
    assert result.log.method == "reorder"
    assert basis.mode == "normalized"
    assert basis.n > 3  # more snapshots than the margin
    assert len(set(basis.snapshot_params)) == basis.n
    # certified: dropping the 3 trailing snapshots still meets the bound
    residuals = reorder_residual_many(basis, train.parameters, basis.n - 3)
    assert residuals.max() < quality.max_res
    # spot-check through the single-query route
    worst = train.parameters[int(np.argmax(residuals))]
    assert reorder_residual(basis, basis.n - 3, worst) < quality.max_res


def test_reorder_generation_deterministic(small_reorder):
    result, train, quality = small_reorder
    again = reorder_generate(train, 3, quality, seed=4321)
    assert again.basis.snapshot_params == result.basis.snapshot_params


def test_reorder_generation_margin_validation():
    train = TrainingSet.preset("A", step=8.0)
    with pytest.raises(ValueError):
        reorder_generate(train, -1, QualitySpec(8, 1e-3))
