"""Desk-scale benchmark sweeps emitting plot-ready CSV.

Three sweeps mirror the evaluation structure of the middleware:

    quality    max test residual versus snapshot count, per training preset
    snapshots  per-query snapshot usage of each answering strategy
    bytes      storage and transfer costs (setup, per query, per update)

Every CSV starts with ``#`` comment lines recording the seed and settings,
so any file can be reproduced bit for bit.  Wall-clock times go to the log,
never into the CSV.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rbsim.full_problem import Parameter, QualitySpec, assemble_problem
from rbsim.generation import TrainingSet, greedy_generate, reorder_generate
from rbsim.middleware import SimulationClient
from rbsim.protocol import build_update, pack_update, update_float_count
from rbsim.rbm import prefix_basis, residual_many, solve_many
from rbsim.store import BasisStore, payload_float_count
from rbsim.strategies import (
    QualityUnreachableError,
    Query,
    answer_basic,
    answer_reorder,
    answer_subspace,
    trim,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchSpec:
    """What to sweep and where to write it."""

    presets: tuple = ("A", "B", "C")
    step: float = 4.0
    discretizations: tuple = (32,)
    snapshot_counts: tuple | None = None  # None: every prefix size
    test_size: int = 1000
    strategies: tuple = ("basic", "subspace", "reorder")
    max_res: float = 1e-4
    margin: int = 3
    seed: int = 0

    def test_set(self, train: TrainingSet, *extra) -> tuple:
        rng = np.random.default_rng((self.seed,) + extra)
        return train.sample(self.test_size, rng)

    def comments(self, op: str) -> list:
        return [
            f"rbsim bench {op}",
            f"seed={self.seed}",
            f"presets={','.join(self.presets)} step={self.step}",
            f"discretizations={','.join(str(d) for d in self.discretizations)}",
            f"max_res={self.max_res} test_size={self.test_size} margin={self.margin}",
        ]


def write_csv(path, comments, fieldnames, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        for line in comments:
            f.write(f"# {line}\n")
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    log.info("wrote %d rows to %s", len(rows), path)


def read_csv(path):
    """Rows of a bench CSV, comments skipped (values stay strings)."""
    with open(path, newline="") as f:
        rows = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(rows))


QUALITY_FIELDS = ("preset", "discretization", "n", "max_residual", "mean_residual")


def bench_quality(spec: BenchSpec) -> list:
    """Max/mean test residual for every greedy-basis prefix size."""
    rows = []
    for preset in spec.presets:
        train = TrainingSet.preset(preset, spec.step)
        for disc in spec.discretizations:
            t0 = time.perf_counter()
            result = greedy_generate(train, QualitySpec(disc, spec.max_res),
                                     seed=spec.seed)
            basis = result.basis
            test = spec.test_set(train, ord(preset), disc)
            counts = spec.snapshot_counts or range(1, basis.n + 1)
            for m in counts:
                if m > basis.n:
                    continue
                view = trim(basis, m)
                coeffs = solve_many(view, test)
                residuals = residual_many(view, test, coeffs)
                rows.append({
                    "preset": preset,
                    "discretization": disc,
                    "n": m,
                    "max_residual": float(np.max(residuals)),
                    "mean_residual": float(np.mean(residuals)),
                })
            log.info("quality %s D=%d: n=%d in %.2fs",
                     preset, disc, basis.n, time.perf_counter() - t0)
    return rows


SNAPSHOT_FIELDS = ("preset", "discretization", "strategy", "basis_mode", "n",
                   "mean_m", "p25", "p50", "p75", "p90", "max_m", "degraded")

_ANSWERERS = {"basic": answer_basic, "subspace": answer_subspace,
              "reorder": answer_reorder}


def _basis_for_strategy(strategy, train, quality, spec):
    if strategy == "reorder":
        return reorder_generate(train, spec.margin, quality, seed=spec.seed).basis
    return greedy_generate(train, quality, seed=spec.seed).basis


def bench_snapshot_counts(spec: BenchSpec) -> list:
    """Distribution of snapshots used per query, per strategy."""
    rows = []
    for preset in spec.presets:
        train = TrainingSet.preset(preset, spec.step)
        for disc in spec.discretizations:
            quality = QualitySpec(disc, spec.max_res)
            test = spec.test_set(train, ord(preset), disc)
            greedy = None
            for strategy in spec.strategies:
                t0 = time.perf_counter()
                if strategy == "reorder":
                    basis = _basis_for_strategy(strategy, train, quality, spec)
                else:
                    if greedy is None:
                        greedy = _basis_for_strategy(strategy, train, quality, spec)
                    basis = greedy
                answer = _ANSWERERS[strategy]
                ms, degraded = [], 0
                for mu in test:
                    try:
                        ms.append(answer(basis, Query(mu)).snapshots_used)
                    except QualityUnreachableError:
                        ms.append(basis.n)
                        degraded += 1
                ms = np.asarray(ms, dtype=float)
                rows.append({
                    "preset": preset,
                    "discretization": disc,
                    "strategy": strategy,
                    "basis_mode": basis.mode,
                    "n": basis.n,
                    "mean_m": float(np.mean(ms)),
                    "p25": float(np.percentile(ms, 25)),
                    "p50": float(np.percentile(ms, 50)),
                    "p75": float(np.percentile(ms, 75)),
                    "p90": float(np.percentile(ms, 90)),
                    "max_m": int(np.max(ms)),
                    "degraded": degraded,
                })
                log.info("snapshots %s D=%d %s: mean m %.2f of %d in %.2fs",
                         preset, disc, strategy, float(np.mean(ms)), basis.n,
                         time.perf_counter() - t0)
    return rows


BYTES_FIELDS = ("strategy", "discretization", "n", "file_bytes", "payload_floats",
                "setup_bytes", "per_query_bytes_mean", "update_bytes",
                "update_border_floats", "update_overhead_fraction")


def bench_bytes(spec: BenchSpec, store_dir) -> list:
    """Measured byte costs per strategy across a (discretization, n) sweep.

    Bases are greedy prefixes; update costs come from packing one real
    extension.  The overhead fraction is border floats over the d floats the
    raw snapshot itself costs.
    """
    rows = []
    preset = spec.presets[0]
    train = TrainingSet.preset(preset, spec.step)
    queries = min(spec.test_size, 50)
    for disc in spec.discretizations:
        quality = QualitySpec(disc, spec.max_res)
        result = greedy_generate(train, quality, seed=spec.seed)
        full = result.basis
        counts = [n for n in (spec.snapshot_counts or (full.n,)) if n <= full.n]
        mu_update = Parameter(*(np.random.default_rng((spec.seed, disc, 99))
                                .uniform(lo, hi) for lo, hi in train.ranges))
        test = spec.test_set(train, ord(preset), disc)[:queries]
        for n in counts:
            basis = prefix_basis(full, n)
            store = BasisStore(Path(store_dir) / f"bytes-{disc}-{n}")
            ident, file_bytes = store.save(basis)

            op, rhs = assemble_problem(quality)
            update, _ = build_update(basis, mu_update, op, rhs)
            update_bytes = len(pack_update(update))
            d = basis.dimension
            border_floats = update_float_count(n, d, basis.s_a, basis.s_f) - d

            for strategy in spec.strategies:
                client = SimulationClient(store, ident, strategy)
                report = client.warm_setup()
                per_query = []
                for mu in test:
                    client.query(mu)
                    per_query.append(client.ledger[-1].bytes_read)
                client.close()
                rows.append({
                    "strategy": strategy,
                    "discretization": disc,
                    "n": n,
                    "file_bytes": file_bytes,
                    "payload_floats": payload_float_count(n, d, basis.s_a, basis.s_f),
                    "setup_bytes": report["bytes_read"],
                    "per_query_bytes_mean": float(np.mean(per_query)),
                    "update_bytes": update_bytes,
                    "update_border_floats": border_floats,
                    "update_overhead_fraction": border_floats / d,
                })
    return rows


OPS = {
    "quality": (bench_quality, QUALITY_FIELDS),
    "snapshots": (bench_snapshot_counts, SNAPSHOT_FIELDS),
    "bytes": (bench_bytes, BYTES_FIELDS),
}


def run_bench(op: str, spec: BenchSpec, out_path, *, store_dir=None) -> list:
    """Run one sweep and write its CSV; returns the rows."""
    if op not in OPS:
        raise ValueError(f"unknown bench op {op!r}, have {sorted(OPS)}")
    func, fields = OPS[op]
    if op == "bytes":
        if store_dir is None:
            raise ValueError("bytes bench needs a store directory")
        rows = func(spec, store_dir)
    else:
        rows = func(spec)
    write_csv(out_path, spec.comments(op), fields, rows)
    return rows
