"""Desk-scale laboratory for distributed optimization with bidirectional
communication compression: contractive/unbiased sparsifiers, shifted
compressed-gradient estimators, model-shift error feedback, closed-form
rate bounds, and a deterministic round-level simulator."""

from .backend import NUMBA_ENABLED, backend_name

__version__ = "0.1.0"

__all__ = ["NUMBA_ENABLED", "backend_name", "__version__"]
