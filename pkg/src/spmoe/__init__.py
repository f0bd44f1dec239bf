"""Sparse pattern mixture-of-experts toolkit.

Sparse simplex projections (sparsegen-lin / sparsemax) with analytic
Jacobians, a small trainable sequence-to-sequence model with K expert pattern
heads and mixture / load-balance losses, a synthetic one-to-many pattern
corpus, and n-gram diversity metrics (PD, BLEU, Pairwise-BLEU, Distinct-1).
"""

from spmoe.projection import (
    ProjectionSolution,
    brute_force_projection,
    projection_jacobian,
    sparsegen_lin,
    sparsemax,
)

__version__ = "0.1.0"

__all__ = [
    "ProjectionSolution",
    "brute_force_projection",
    "projection_jacobian",
    "sparsegen_lin",
    "sparsemax",
    "__version__",
]
