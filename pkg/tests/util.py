"""Shared helpers for building small bases in tests."""

from __future__ import annotations

import numpy as np

from rbsim.full_problem import Parameter, QualitySpec, assemble_problem, snapshot
from rbsim.rbm import empty_basis, extend_basis

DEFAULT_RANGES = ((0.5, 25.0), (-40.0, 40.0), (-40.0, 40.0))


def random_params(rng, count, ranges=DEFAULT_RANGES):
    out = []
    for _ in range(count):
        out.append(Parameter(*(rng.uniform(lo, hi) for lo, hi in ranges)))
    return out


def make_basis(D, params, mode="orthonormal", max_res=1.0):
    """Basis over the given snapshot parameters via repeated extension."""
    quality = QualitySpec(D, max_res)
    op, rhs = assemble_problem(quality)
    basis = empty_basis(op, rhs, quality, mode)
    for mu in params:
        snap = snapshot(mu, quality, op=op, rhs=rhs)
        basis = extend_basis(basis, snap, op, rhs)
    return basis, op, rhs


def gram_schmidt(columns):
    """Plain reference Gram-Schmidt, independent of the package's path."""
    vs = []
    for c in columns:
        w = c.astype(np.float64).copy()
        for v in vs:
            w -= (v @ w) * v
        for v in vs:
            w -= (v @ w) * v
        nrm = np.linalg.norm(w)
        assert nrm > 1e-12
        vs.append(w / nrm)
    return np.column_stack(vs)
