"""Shared linear-algebra helpers: matrix-free operator norms and shifted solves.

Resolvents are only ever available as solves, so the largest singular value
of a weighted resolvent sandwich is estimated by power iteration on the
normal operator A*A.  Dense SVD is kept as a test oracle for small sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FactorizationFailure

Matvec = Callable[[np.ndarray], np.ndarray]


@dataclass
class OpNormResult:
    value: float
    iterations: int
    rel_change: float
    converged: bool


def opnorm_power(
    matvec: Matvec,
    rmatvec: Matvec,
    n: int,
    rtol: float = 1e-6,
    maxiter: int = 200,
    seed: int = 7,
) -> OpNormResult:
    """Largest singular value of A via power iteration on A*A.

    `matvec` applies A, `rmatvec` applies the conjugate transpose.  The
    reached relative change is reported, so callers can record whether the
    tolerance or the iteration cap was hit first.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v /= np.linalg.norm(v)
    sigma2 = 0.0
    rel = np.inf
    it = 0
    for it in range(1, maxiter + 1):
        w = rmatvec(matvec(v))
        new_sigma2 = float(np.real(np.vdot(v, w)))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return OpNormResult(0.0, it, 0.0, True)
        v = w / nw
        if new_sigma2 > 0:
            rel = abs(new_sigma2 - sigma2) / new_sigma2
        sigma2 = new_sigma2
        if rel < rtol:
            break
    return OpNormResult(float(np.sqrt(max(sigma2, 0.0))), it, rel, rel < rtol)


def dense_opnorm(a: np.ndarray) -> float:
    """Spectral norm by full SVD; oracle for small matrices."""
    return float(np.linalg.norm(a, 2))


def min_singular_value(a: np.ndarray) -> float:
    return float(np.linalg.svd(a, compute_uv=False)[-1])


class ShiftedSolve:
    """LU-backed solver for (M - z) with reusable factorization.

    M is sparse Hermitian; z any complex shift off the spectrum.  The
    adjoint solve reuses the same factorization, since (M - z)^* = M - conj(z).
    """

    def __init__(self, matrix: sp.spmatrix, z: complex):
        self.z = complex(z)
        shifted = (matrix - self.z * sp.identity(matrix.shape[0], dtype=complex)).tocsc()
        try:
            self._lu = spla.splu(shifted)
        except RuntimeError as exc:  # singular factorization
            raise FactorizationFailure(f"LU of (M - {z}) failed: {exc}") from exc
        self.n = matrix.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(rhs, dtype=complex))

    def solve_adjoint(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(rhs, dtype=complex), trans="H")

    def solve_many(self, rhs: np.ndarray) -> np.ndarray:
        """Columnwise solve; rhs is (n, k)."""
        return self._lu.solve(np.asarray(rhs, dtype=complex))


def residual_check(matrix: sp.spmatrix, z: complex, u: np.ndarray, rhs: np.ndarray,
                   rtol: float = 1e-10) -> float:
    res = matrix @ u - z * u - rhs
    denom = np.linalg.norm(rhs)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(res) / denom)


def log_linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares fit log(y) = a + b*x.  Returns (b, exp(a), R^2)."""
    x = np.asarray(x, dtype=float)
    ly = np.log(np.asarray(y, dtype=float))
    coeffs = np.polyfit(x, ly, 1)
    pred = np.polyval(coeffs, x)
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coeffs[0]), float(np.exp(coeffs[1])), r2


def loglog_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Slope and R^2 of log(y) against log(x)."""
    slope, _, r2 = log_linear_fit(np.log(np.asarray(x, dtype=float)), y)
    return slope, r2


def slope_confidence(x: np.ndarray, logy: np.ndarray) -> float:
    """Half-width of the 95% CI of the slope of logy against x."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 3:
        return np.inf
    coeffs = np.polyfit(x, logy, 1)
    resid = logy - np.polyval(coeffs, x)
    s2 = float(np.sum(resid**2)) / (n - 2)
    sxx = float(np.sum((x - x.mean()) ** 2))
    return 1.96 * np.sqrt(s2 / sxx)


def richardson_limit(eps: np.ndarray, values: np.ndarray) -> complex:
    """Extrapolate values(eps) to eps -> 0 assuming a polynomial error model.

    Lagrange interpolation through the nodes evaluated at zero; eps must be
    distinct and positive.  Works for scalar or array-valued samples (the
    leading axis indexes the nodes).
    """
    eps = np.asarray(eps, dtype=float)
    vals = np.asarray(values, dtype=complex)
    out = np.zeros_like(vals[0])
    for j in range(len(eps)):
        w = 1.0
        for m in range(len(eps)):
            if m != j:
                w *= eps[m] / (eps[m] - eps[j])
        out = out + w * vals[j]
    return out
