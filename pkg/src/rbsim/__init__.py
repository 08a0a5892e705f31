"""Reduced-basis simulation middleware.

Offline: a server generates certified reduced bases from snapshot solves of a
parameter-separable full problem.  Online: a client answers simulation
queries from precomputed low-dimensional blocks, with a fast residual bound
certifying every answer, and several strategies trading storage traffic
against accuracy.
"""

from rbsim.full_problem import Parameter, QualitySpec, SolveError, assemble_problem, snapshot
from rbsim.rbm import DegenerateBasisError, DependentSnapshotError, ReducedBasis, basis_identifier

__all__ = [
    "Parameter",
    "QualitySpec",
    "SolveError",
    "assemble_problem",
    "snapshot",
    "ReducedBasis",
    "basis_identifier",
    "DegenerateBasisError",
    "DependentSnapshotError",
]
