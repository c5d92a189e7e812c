"""The KL-regularized one-row planning problem and its closed-form solution.

minimize over p:  E_p[-U] + eta * KL(p || p0)

has the Gibbs optimum p*(x) proportional to p0(x) * exp(U(x) / eta). This is
the mechanism behind the preference-model alignment argument, so both the
objective and the optimum are exposed for brute-force cross-checking.
"""

from __future__ import annotations

import numpy as np

from ..errors import VisreasonError


class SupportMismatch(VisreasonError):
    pass


class NumericalOverflow(VisreasonError):
    pass


def gibbs_optimum(p0: np.ndarray, U: np.ndarray, eta: float) -> np.ndarray:
    """p*(x) = p0(x) exp(U(x)/eta) / Z, computed with max-shift stabilization."""
    p0 = np.asarray(p0, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    if p0.shape != U.shape:
        raise SupportMismatch(f"p0 has shape {p0.shape}, U has shape {U.shape}")
    if not np.all(p0 > 0):
        raise ValueError("p0 must be strictly positive")
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    w = np.log(p0) + U / eta
    w -= w.max()
    p = np.exp(w)
    total = p.sum()
    if not np.isfinite(total) or total <= 0:
        raise NumericalOverflow("Gibbs weights did not normalize to a finite positive mass")
    return p / total


def kl_divergence(p: np.ndarray, p0: np.ndarray) -> float:
    """KL(p || p0) with the 0 log 0 = 0 convention; p0 must dominate p."""
    p = np.asarray(p, dtype=np.float64)
    p0 = np.asarray(p0, dtype=np.float64)
    if p.shape != p0.shape:
        raise SupportMismatch(f"p has shape {p.shape}, p0 has shape {p0.shape}")
    if np.any((p > 0) & (p0 <= 0)):
        raise SupportMismatch("p places mass where p0 has none")
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(p0[mask]))))


def kl_objective(p: np.ndarray, p0: np.ndarray, U: np.ndarray, eta: float) -> float:
    """E_p[-U] + eta * KL(p || p0)."""
    p = np.asarray(p, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    if p.shape != U.shape:
        raise SupportMismatch(f"p has shape {p.shape}, U has shape {U.shape}")
    return float(-(p * U).sum()) + eta * kl_divergence(p, p0)
