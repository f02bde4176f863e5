"""Deterministic predictions for Krylov solvers on spiked sample covariance matrices."""

from __future__ import annotations

__version__ = "0.1.0"
