"""Free-resolvent kernels via Hankel functions and their strip continuation.

For Im(lambda) < 0 the resolvent (P0 - lambda^2)^{-1} on R^d has the radial
kernel

    K(x, y; lambda) = -(i/4) (2 pi)^{-(d-2)/2} lambda^{(d-2)/2}
                       |x-y|^{-(d-2)/2} H2_{(d-2)/2}(lambda |x-y|),

with H2 the second-kind Hankel function (d = 3 collapses to
exp(-i lambda r) / (4 pi r)).  Continuing through the physical sheet to
-lambda replaces H2 by H1, and the difference of the two is a plane-wave
average over the sphere: the jump identity tested here.  Multiplying by
mu = exp(-c<x>/2) on both sides tames the e^{Im lambda |x-y|} growth as long
as |Im lambda| stays below c/2, which is what makes the weighted kernel an
analytic family on the strip.

The Hankel evaluator is self-contained: half-integer orders use closed forms
plus the three-term recurrence, integer orders use the ascending series below
|z| = 8 and the large-argument expansion beyond.  scipy only appears in the
test suite as an independent oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (BranchError, CoincidencePoint, QuadratureUnderResolved,
                     StripViolation)
from .lattice import Grid
from .weights import ExpWeight

_EULER_GAMMA = 0.5772156649015328606
_SERIES_CUT = 10.0


# ---------------------------------------------------------------------------
# Hankel functions of complex argument
# ---------------------------------------------------------------------------

def _hankel_half_integer(order: float, z: np.ndarray, kind: int) -> np.ndarray:
    """Closed forms for |order| = 1/2 plus upward recurrence.

    The recurrence H_{v+1} = (2v/z) H_v - H_{v-1} is stable upward because the
    Hankel functions are the dominant solutions in the order direction.
    """
    sgn = -1.0 if kind == 2 else 1.0
    pref = np.sqrt(2.0 / (np.pi * z))
    h_minus = pref * np.exp(sgn * 1j * z)            # order -1/2
    h_plus = -sgn * 1j * pref * np.exp(sgn * 1j * z)  # order +1/2
    if order == -0.5:
        return h_minus
    v = 0.5
    while v < order:
        h_minus, h_plus = h_plus, (2.0 * v / z) * h_plus - h_minus
        v += 1.0
    return h_plus


def _bessel_j_series(n: int, z: np.ndarray) -> np.ndarray:
    out = np.zeros_like(z, dtype=complex)
    term = (0.5 * z) ** n / math.factorial(n)
    out += term
    zz = -0.25 * z * z
    for k in range(1, 60):
        term = term * zz / (k * (k + n))
        out += term
    return out


def _bessel_y_series(n: int, z: np.ndarray) -> np.ndarray:
    """Ascending series for Y_n, principal branch of log."""
    logz = np.log(0.5 * z)
    jn = _bessel_j_series(n, z)
    total = (2.0 / np.pi) * (logz + _EULER_GAMMA) * jn
    if n > 0:
        term = math.factorial(n - 1) * (0.5 * z) ** (-n)
        acc = term
        for k in range(1, n):
            term = term * (0.25 * z * z) / (k * (n - k))
            acc = acc + term
        total = total - acc / np.pi
    # regular part with harmonic numbers
    def hsum(m):
        return sum(1.0 / j for j in range(1, m + 1))
    term = (0.5 * z) ** n / math.factorial(n)
    acc = (hsum(n)) * term
    zz = -0.25 * z * z
    for k in range(1, 60):
        term = term * zz / (k * (k + n))
        acc = acc + (hsum(k) + hsum(k + n)) * term
    total = total - acc / np.pi
    return total


def _hankel_integer_series(n: int, z: np.ndarray, kind: int) -> np.ndarray:
    j = _bessel_j_series(n, z)
    y = _bessel_y_series(n, z)
    return j + 1j * y if kind == 1 else j - 1j * y


def _hankel_asymptotic(v: float, z: np.ndarray, kind: int, kmax: int = 18) -> np.ndarray:
    sgn = 1.0 if kind == 1 else -1.0
    omega = z - 0.5 * v * np.pi - 0.25 * np.pi
    mu4 = 4.0 * v * v
    acc = np.ones_like(z, dtype=complex)
    term = np.ones_like(z, dtype=complex)
    for k in range(1, kmax + 1):
        term = term * (mu4 - (2 * k - 1) ** 2) / (8.0 * k) / z * (sgn * 1j)
        acc = acc + term
    return np.sqrt(2.0 / (np.pi * z)) * np.exp(sgn * 1j * omega) * acc


def hankel_minus(order: float, z, kind: int = 2):
    """Second-kind Hankel function H2_order(z) for complex z (kind=1 gives H1).

    Orders: nonnegative integers and half-integers, as needed by the kernels
    in d = 2, 3 and their first derivatives.  For integer orders the ascending
    series uses the principal log, so the negative real axis is an excluded
    ray; callers continue across it via the H1/H2 reflection instead.
    """
    z = np.asarray(z, dtype=complex)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    if np.any(z == 0):
        raise BranchError("Hankel functions are singular at z = 0")
    if order < -0.5 or (2.0 * order) != int(round(2.0 * order)):
        raise BranchError(f"unsupported order {order}")
    is_half = (abs(int(round(2.0 * order))) % 2) == 1
    if order < 0 and not is_half:
        raise BranchError(f"unsupported order {order}")
    if not is_half and np.any((z.real < 0) & (np.abs(z.imag) < 1e-12 * np.abs(z.real))):
        raise BranchError("integer order on the excluded ray (negative reals)")

    out = np.empty_like(z, dtype=complex)
    small = np.abs(z) <= _SERIES_CUT
    if is_half:
        out[:] = _hankel_half_integer(order, z, kind)
    else:
        n = int(round(order))
        if np.any(small):
            out[small] = _hankel_integer_series(n, z[small], kind)
        if np.any(~small):
            out[~small] = _hankel_asymptotic(float(n), z[~small], kind)
    return out[0] if scalar else out


def hankel_minus_derivative(order: float, z, kind: int = 2):
    """d/dz H_order(z) via the standard two-term relation."""
    if order == 0:
        return -hankel_minus(1.0, z, kind)
    return 0.5 * (hankel_minus(order - 1.0, z, kind) - hankel_minus(order + 1.0, z, kind))


# ---------------------------------------------------------------------------
# Strip bookkeeping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StripPoint:
    """Spectral parameter with its strip certificate.

    Physical values have Im(lambda) < 0; the continuation is trusted for
    Im(lambda) <= gamma0 < c/2 where c is the active exponential weight rate.
    """

    lam: complex
    gamma0: float

    def __post_init__(self):
        if abs(self.lam.imag) > self.gamma0:
            raise StripViolation(
                f"Im lambda = {self.lam.imag} outside strip |Im| <= {self.gamma0}")


def check_strip(lam: complex, mu: ExpWeight, gamma0: Optional[float] = None) -> float:
    """One-sided strip guard: the kernel is native on Im(lambda) < 0 and
    continues upward only as far as gamma0 < c/2."""
    g0 = mu.gamma0 if gamma0 is None else gamma0
    if g0 >= 0.5 * mu.c:
        raise StripViolation(f"gamma0 = {g0} must stay below c/2 = {0.5 * mu.c}")
    if complex(lam).imag > g0:
        raise StripViolation(f"Im lambda = {complex(lam).imag} above the strip {g0}")
    return g0


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def _kernel_pref(d: int, lam: complex) -> complex:
    nu = 0.5 * (d - 2)
    return -0.25j * (2.0 * np.pi) ** (-nu) * lam**nu


def free_kernel(x, y, lam: complex, d: int, deriv_axis: Optional[int] = None,
                reflected: bool = False):
    """Free-resolvent kernel K(x, y; lambda), or its first x-derivative.

    `reflected=True` evaluates the continuation of K to -lambda (through the
    physical sheet), realized with the first-kind Hankel function at the same
    argument lambda |x-y|.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    diff = np.atleast_1d(x - y)
    if diff.ndim == 1 and diff.shape[-1] == d:
        r = float(np.linalg.norm(diff))
        single = True
    else:
        r = np.linalg.norm(diff, axis=-1)
        single = False
    if np.any(np.asarray(r) == 0.0):
        raise CoincidencePoint("kernel evaluation at x = y")
    lam = complex(lam)
    nu = 0.5 * (d - 2)
    kind = 1 if reflected else 2
    sign = 1.0 if reflected else -1.0
    if deriv_axis is None:
        val = sign * 0.25j * (2.0 * np.pi) ** (-nu) * lam**nu * r ** (-nu) \
            * hankel_minus(nu, lam * r, kind)
    else:
        unit = diff[..., deriv_axis] / r if d > 1 else np.sign(diff)
        val = -sign * 0.25j * (2.0 * np.pi) ** (-nu) * lam ** (nu + 1.0) * r ** (-nu) \
            * hankel_minus(nu + 1.0, lam * r, kind) * unit
    return complex(val) if single and np.ndim(val) == 0 else val


def sphere_quadrature(d: int, order: int):
    """Nodes and weights integrating smooth functions over S^{d-1}.

    d=2: trapezoid on the circle (spectrally accurate); d=3: Gauss-Legendre
    in the polar cosine times exact azimuthal average.
    """
    if d == 2:
        theta = 2.0 * np.pi * np.arange(order) / order
        nodes = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        w = np.full(order, 2.0 * np.pi / order)
        return nodes, w
    if d == 3:
        t, wt = np.polynomial.legendre.leggauss(order)
        m = 2 * order
        phi = 2.0 * np.pi * np.arange(m) / m
        st = np.sqrt(1.0 - t**2)
        nodes = np.stack([np.outer(st, np.cos(phi)).ravel(),
                          np.outer(st, np.sin(phi)).ravel(),
                          np.outer(t, np.ones(m)).ravel()], axis=-1)
        w = np.outer(wt, np.full(m, 2.0 * np.pi / m)).ravel()
        return nodes, w
    raise BranchError(f"sphere quadrature supports d in {{2,3}}, got {d}")


def plane_wave_average(z: np.ndarray, lam: complex, d: int, order: int) -> complex:
    nodes, w = sphere_quadrature(d, order)
    phases = np.exp(1j * lam * (nodes @ np.asarray(z, dtype=float)))
    return complex(np.sum(w * phases))


def jump_identity_residual(x, y, lam: complex, d: int,
                           sphere_quadrature_order: int = 40,
                           check_tol: float = 1e-10) -> float:
    """Relative residual of the resolvent-kernel jump across the real axis.

    Both sides are computed independently: the left as the difference of the
    H1- and H2-kernels, the right as a plane-wave average over the sphere by
    quadrature.  Doubling the quadrature order must leave the result stable.
    """
    lam = complex(lam)
    z = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    # resolve the plane-wave oscillation: order must scale with |lambda||z|
    sphere_quadrature_order = max(sphere_quadrature_order,
                                  int(np.ceil(2.0 * abs(lam) * np.linalg.norm(z))) + 16)
    lhs = free_kernel(x, y, lam, d, reflected=True) - free_kernel(x, y, lam, d)
    rhs = 0.5j * (2.0 * np.pi) ** (1 - d) * lam ** (d - 2) \
        * plane_wave_average(z, lam, d, sphere_quadrature_order)
    rhs2 = 0.5j * (2.0 * np.pi) ** (1 - d) * lam ** (d - 2) \
        * plane_wave_average(z, lam, d, 2 * sphere_quadrature_order)
    if abs(rhs2 - rhs) > check_tol * max(abs(rhs2), 1.0):
        raise QuadratureUnderResolved(
            f"sphere quadrature drifted by {abs(rhs2 - rhs):.3e} on refinement")
    return float(abs(lhs - rhs2) / abs(rhs2))


# ---------------------------------------------------------------------------
# Weighted kernel matrices
# ---------------------------------------------------------------------------

@dataclass
class KernelMatrix:
    """Dense samples of mu d^alpha K(x, y; lambda) mu with quadrature weight."""

    matrix: np.ndarray
    lam: complex
    d: int
    deriv_axis: Optional[int]
    grid: Grid
    reflected: bool = False

    def opnorm(self) -> float:
        return float(np.linalg.norm(self.matrix, 2))


def radial_halfline_kernel(r: np.ndarray, lam: complex, reflected: bool = False,
                           deriv: bool = False) -> np.ndarray:
    """Green kernel of (-d^2/dr^2 - lambda^2) on (0, inf) with u(0) = 0.

    G(r, r') = sin(lambda r_<) e^{-i lambda r_>} / lambda; this is the nu = 0
    sector reduction of the d = 3 kernel.  The reflected version carries
    e^{+i lambda r_>}.  The kernel is continuous across r = r'; its radial
    derivative has a kink there and the diagonal takes the two-sided average.
    """
    r = np.asarray(r, dtype=float)
    lam = complex(lam)
    sgn = 1.0 if reflected else -1.0
    rl = np.minimum.outer(r, r)
    rg = np.maximum.outer(r, r)
    if not deriv:
        return np.sin(lam * rl) * np.exp(sgn * 1j * lam * rg) / lam
    lower = np.cos(lam * r)[:, None] * np.exp(sgn * 1j * lam * r)[None, :]
    upper = sgn * 1j * np.exp(sgn * 1j * lam * r)[:, None] * np.sin(lam * r)[None, :]
    out = np.where(r[:, None] < r[None, :], lower, upper)
    diag = 0.5 * (np.cos(lam * r) + sgn * 1j * np.sin(lam * r)) * np.exp(sgn * 1j * lam * r)
    np.fill_diagonal(out, diag)
    return out


def weighted_free_resolvent(grid: Grid, lam: complex, mu: ExpWeight,
                            deriv_axis: Optional[int] = None,
                            reflected: bool = False,
                            gamma0: Optional[float] = None) -> KernelMatrix:
    """Dense matrix of mu d^l K(.,.;lambda) mu times the quadrature weight h^d.

    Radial grids use the exact half-line (nu = 0, d = 3) kernel including its
    continuous diagonal; Cartesian grids sample the R^d kernel with the
    singular diagonal punctured (an O(h) quadrature error, acceptable because
    the continuation identities only compose it with smooth factors).
    """
    check_strip(lam, mu, gamma0)
    lam = complex(lam)
    if grid.mode == "radial":
        r = grid.axis_coords()
        core = radial_halfline_kernel(r, lam, reflected=reflected,
                                      deriv=deriv_axis is not None)
        w = mu.mu(r)
        mat = (w[:, None] * core * w[None, :]) * grid.h
        return KernelMatrix(mat, lam, 3, deriv_axis, grid, reflected)

    d = grid.d
    if d == 2 and lam.real <= 0:
        raise BranchError("even-d continuation restricted to Re lambda > 0")
    pts = grid.points()
    if pts.ndim == 1:
        pts = pts[:, None]
    diff = pts[:, None, :] - pts[None, :, :]
    r = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(r, 1.0)  # placeholder, punctured below
    nu = 0.5 * (d - 2)
    kind = 1 if reflected else 2
    sign = 1.0 if reflected else -1.0
    if deriv_axis is None:
        core = sign * 0.25j * (2.0 * np.pi) ** (-nu) * lam**nu * r ** (-nu) \
            * hankel_minus(nu, lam * r, kind)
    else:
        unit = diff[:, :, deriv_axis] / r
        core = -sign * 0.25j * (2.0 * np.pi) ** (-nu) * lam ** (nu + 1.0) * r ** (-nu) \
            * hankel_minus(nu + 1.0, lam * r, kind) * unit
    np.fill_diagonal(core, 0.0)
    w = mu.mu(pts)
    mat = (w[:, None] * core * w[None, :]) * grid.h ** d
    return KernelMatrix(mat, lam, d, deriv_axis, grid, reflected)


def _kernel_radial_parts(lam: complex, r: np.ndarray, d: int):
    """K(r), K'(r), K''(r) for the radial profile of the free kernel.

    With F_v(z) = z^{-v} H2_v(z) and c_v = -(i/4)(2 pi)^{-v}:
    K = c_v lam^{2v} F_v(lam r), K' = -c_v lam^{2v+2} r F_{v+1}(lam r),
    K'' = -c_v lam^{2v+2} [F_{v+1}(lam r) - (lam r)^2 F_{v+2}(lam r)].
    """
    nu = 0.5 * (d - 2)
    c = -0.25j * (2.0 * np.pi) ** (-nu)
    z = lam * r
    F = lambda v: z ** (-v) * hankel_minus(v, z)
    K0 = c * lam ** (2 * nu) * F(nu)
    K1 = -c * lam ** (2 * nu + 2) * r * F(nu + 1.0)
    K2 = -c * lam ** (2 * nu + 2) * (F(nu + 1.0) - z**2 * F(nu + 2.0))
    return K0, K1, K2


def kernel_gradient_blocks(grid: Grid, lam: complex, mu: ExpWeight,
                           b_vals: np.ndarray, gamma0=None):
    """Magnetic kernel blocks (mu^{-1} b.grad) R0 mu, mu R0 grad.(b mu^{-1} .),
    and the doubly contracted version, for Cartesian grids.

    The diagonal is punctured in all three; the second-derivative block is
    only meaningful as a difference against another spectral parameter, where
    the lambda-independent singular part cancels.
    """
    check_strip(lam, mu, gamma0)
    lam = complex(lam)
    pts = grid.points()
    if pts.ndim == 1:
        pts = pts[:, None]
    n, d = pts.shape
    diff = pts[:, None, :] - pts[None, :, :]
    r = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(r, 1.0)
    unit = diff / r[:, :, None]
    _, K1, K2 = _kernel_radial_parts(lam, r, d)
    w = mu.mu(pts)
    winv_b = b_vals / w[:, None]           # (n, d)
    hd = grid.h ** d

    # grad_a K = K'(r) n_a
    gradK = K1[:, :, None] * unit          # (n, n, d)
    row_contr = np.einsum("ia,ija->ij", winv_b, gradK)
    col_contr = np.einsum("ija,ja->ij", gradK, winv_b)
    g10 = 1j * row_contr * w[None, :] * hd
    g01 = 1j * w[:, None] * col_contr * hd

    # d_a d_b K = K'' n_a n_b + K' (delta_ab - n_a n_b)/r
    nb = np.einsum("ija,ja->ij", unit, winv_b)
    na = np.einsum("ia,ija->ij", winv_b, unit)
    bb = winv_b @ winv_b.T
    hess_contr = K2 * na * nb + K1 / r * (bb - na * nb)
    g11 = -hess_contr * hd
    for m in (g10, g01, g11):
        np.fill_diagonal(m, 0.0)
    if d == 1:
        # the 1D second-derivative kernel is bounded at coincidence:
        # K''(0) = i lam / 2, so the punctured diagonal can be filled exactly
        np.fill_diagonal(g11, -0.5j * lam * (winv_b[:, 0] ** 2) * hd)
    return g10, g01, g11


def kernel_to_csv(km: KernelMatrix, path) -> None:
    """Flat dump (i, j, re, im) for the plotting component."""
    n = km.matrix.shape[0]
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    data = np.column_stack([ii.ravel(), jj.ravel(),
                            km.matrix.real.ravel(), km.matrix.imag.ravel()])
    header = "i,j,re,im"
    np.savetxt(path, data, delimiter=",", header=header, comments="",
               fmt=["%d", "%d", "%.17g", "%.17g"])
