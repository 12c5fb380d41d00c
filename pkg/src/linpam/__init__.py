"""Ensemble filters that preserve linear invariants of the state."""

from . import enkf, harness, invariant_subspace, models, sampling, smf, transport
from .errors import LinpamError

__version__ = "0.1.0"

__all__ = ["enkf", "harness", "invariant_subspace", "models", "sampling", "smf", "transport",
           "LinpamError"]
