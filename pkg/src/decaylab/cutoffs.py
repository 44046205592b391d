"""Frequency cutoff families with factorial derivative bounds, almost-analytic
extensions, and the Helffer-Sjostrand functional calculus.

The bump rho_m is the density of a sum of m independent uniform variables
with widths a_j = W / (j (j+1)), shifted into [1, 2].  That makes rho_m a
degree-(m-1) spline whose k-th derivative, for k <= m-1, is an exact signed
sum of shifted convolutions of the remaining m-k indicators.  Rather than
expanding that sum (which cancels catastrophically in floating point around
m = 12), the family is built by sequential exact convolution of piecewise
polynomials held in segment-local bases with rational breakpoints; every
evaluation, derivative, and antiderivative is then closed-form and stable.

psi_m is the cumulative integral of rho_m(./delta) extended evenly, so
psi_m = 0 on [-delta, delta], 1 beyond 2 delta, and d^k psi_m needs only
d^{k-1} rho_m: the family supports psi-derivatives up to order m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BoundViolation, ConstraintViolation, OrderExceeded, QuadratureUnderResolved

# ---------------------------------------------------------------------------
# Exact piecewise polynomials with rational breakpoints
# ---------------------------------------------------------------------------


class PiecewisePoly:
    """Polynomial spline in segment-local coordinates.

    ``breaks`` are exact rationals b_0 < ... < b_K; on [b_i, b_{i+1}) the
    value is sum_j coeffs[i, j] (x - b_i)^j.  Outside [b_0, b_K) the value is
    ``left`` / ``right`` (constants), which lets antiderivatives carry their
    accumulated mass.
    """

    def __init__(self, breaks: Sequence[Fraction], coeffs: np.ndarray,
                 left: float = 0.0, right: float = 0.0):
        self.breaks = list(breaks)
        self.coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        self.left = float(left)
        self.right = float(right)
        self._breaks_f = np.array([float(b) for b in self.breaks])

    @property
    def degree(self) -> int:
        return self.coeffs.shape[1] - 1

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        idx = np.searchsorted(self._breaks_f, x, side="right") - 1
        out = np.where(idx < 0, self.left, self.right).astype(float)
        inside = (idx >= 0) & (idx < len(self.breaks) - 1)
        if np.any(inside):
            seg = idx[inside]
            t = x[inside] - self._breaks_f[seg]
            c = self.coeffs[seg]  # (n_pts, D+1)
            val = c[:, -1].copy()
            for j in range(c.shape[1] - 2, -1, -1):
                val = val * t + c[:, j]
            out[inside] = val
        return float(out[0]) if scalar else out

    def derivative(self) -> "PiecewisePoly":
        if self.degree == 0:
            z = np.zeros((self.coeffs.shape[0], 1))
            return PiecewisePoly(self.breaks, z, 0.0, 0.0)
        d = self.coeffs[:, 1:] * np.arange(1, self.coeffs.shape[1])[None, :]
        return PiecewisePoly(self.breaks, d, 0.0, 0.0)

    def antiderivative(self) -> "PiecewisePoly":
        """Running integral with value self.left * (taken as 0) at b_0."""
        K = len(self.breaks) - 1
        D = self.coeffs.shape[1]
        anti = np.zeros((K, D + 1))
        anti[:, 1:] = self.coeffs / np.arange(1, D + 1)[None, :]
        acc = 0.0
        for i in range(K):
            anti[i, 0] = acc
            width = float(self.breaks[i + 1] - self.breaks[i])
            val = anti[i, -1]
            for j in range(D - 1, -1, -1):
                val = val * width + anti[i, j]
            acc = val
        return PiecewisePoly(self.breaks, anti, 0.0, acc)

    def _segment_poly_at(self, x_lo: Fraction) -> np.ndarray:
        """Local coefficients of this spline rebased at x_lo (which must lie
        in the closure of one segment or outside the support)."""
        xf = float(x_lo)
        if x_lo < self.breaks[0]:
            out = np.zeros(self.coeffs.shape[1]); out[0] = self.left
            return out
        if x_lo >= self.breaks[-1]:
            out = np.zeros(self.coeffs.shape[1]); out[0] = self.right
            return out
        i = int(np.searchsorted(self._breaks_f, xf, side="right") - 1)
        i = min(i, len(self.breaks) - 2)
        shift = float(x_lo - self.breaks[i])
        return _taylor_shift(self.coeffs[i], shift)

    def max_abs(self, samples_per_segment: int = 64) -> float:
        """Max |value| over dense per-segment samples (plus endpoints)."""
        widths = np.diff(self._breaks_f)
        t_rel = np.linspace(0.0, 1.0, samples_per_segment)
        t = widths[:, None] * t_rel[None, :]
        c = self.coeffs
        val = np.broadcast_to(c[:, -1][:, None], t.shape).copy()
        for j in range(c.shape[1] - 2, -1, -1):
            val = val * t + c[:, j][:, None]
        return max(float(np.max(np.abs(val))), abs(self.left), abs(self.right))


def _taylor_shift(c: np.ndarray, s: float) -> np.ndarray:
    """Coefficients of p(t + s) given those of p(t)."""
    D = len(c) - 1
    out = np.zeros_like(c)
    for j in range(D + 1):
        cj = c[j]
        if cj == 0.0:
            continue
        binom = 1.0
        power = 1.0
        for i in range(j, -1, -1):
            out[i] += cj * binom * power
            binom = binom * i / (j - i + 1)
            power *= s
    return out


def convolve_uniform(f: PiecewisePoly, a: Fraction) -> PiecewisePoly:
    """Exact convolution of a compactly supported spline with U[0, a]:
    (f * U)(x) = (F(x) - F(x - a)) / a with F the running antiderivative."""
    F = f.antiderivative()
    breaks = sorted(set(f.breaks) | {b + a for b in f.breaks})
    K = len(breaks) - 1
    D = F.coeffs.shape[1]
    coeffs = np.zeros((K, D))
    inv_a = 1.0 / float(a)
    for i in range(K):
        lo = breaks[i]
        p_here = F._segment_poly_at(lo)
        p_back = F._segment_poly_at(lo - a)
        coeffs[i] = (p_here - p_back) * inv_a
    return PiecewisePoly(breaks, coeffs, 0.0, 0.0)


def iterated_uniform_density(widths: Sequence[Fraction]) -> PiecewisePoly:
    """Density of sum_j U[0, a_j] built by sequential exact convolution."""
    a0 = widths[0]
    base = PiecewisePoly([Fraction(0), a0], np.array([[1.0 / float(a0)]]))
    for a in widths[1:]:
        base = convolve_uniform(base, a)
    return base


# ---------------------------------------------------------------------------
# Cutoff family
# ---------------------------------------------------------------------------

@dataclass
class CutoffFamily:
    """rho_m / psi_m / Psi_m with verified derivative-bound constants.

    rho_m >= 0 with unit mass supported strictly inside [1, 2];
    psi_m(lambda) = integral of rho_m up to |lambda|/delta vanishes for
    |lambda| <= delta and equals 1 beyond 2 delta.  fitted_C is the smallest
    constant validating |d^k rho_m| <= C^{k+1} k! over the orders the spline
    supports as bona fide functions (k <= m-1).
    """

    m: int
    delta: float
    rho_spline: PiecewisePoly
    cum_spline: PiecewisePoly
    deriv_splines: list  # deriv_splines[k] = d^k rho, k = 0..m-1
    fitted_C: float
    rho_samples: np.ndarray = field(default=None, repr=False)
    sigma_grid: np.ndarray = field(default=None, repr=False)

    # -- one-variable evaluators -------------------------------------------

    def rho(self, sigma):
        return self.rho_spline(sigma)

    def drho(self, sigma, k: int):
        if k > self.m - 1:
            raise OrderExceeded(f"rho_{self.m} supports derivatives up to {self.m - 1}")
        return self.deriv_splines[k](sigma)

    def psi(self, lam):
        lam = np.asarray(lam, dtype=float)
        return self.cum_spline(np.abs(lam) / self.delta)

    def dpsi_k(self, lam, k: int):
        """d^k psi at lam; uses d psi = rho(./delta)/delta and even extension."""
        if k > self.m:
            raise OrderExceeded(f"psi_{self.m} supports derivatives up to {self.m}")
        lam = np.asarray(lam, dtype=float)
        if k == 0:
            return self.psi(lam)
        inner = self.deriv_splines[k - 1](np.abs(lam) / self.delta) / self.delta**k
        sign = np.where(lam >= 0, 1.0, (-1.0) ** k)
        return sign * inner

    # -- two-variable divided difference -----------------------------------

    def Psi(self, lam, lamp, rel_switch: float = 1e-4):
        """(psi(lam) - psi(lamp)) / (lam^2 - lamp^2), guarded near coincidence.

        Near |lam| = |lamp| the divided difference loses half the digits, so
        the integral form delta^{-1} int_0^1 rho(...) dsigma / (|lam|+|lamp|)
        takes over; on the diagonal it reduces to (2 lam)^{-1} psi'(lam).
        Symmetric in both arguments and even in each.
        """
        a = abs(float(lam))
        b = abs(float(lamp))
        if a <= self.delta and b <= self.delta:
            return 0.0
        if abs(a - b) < rel_switch * (a + b):
            return self._psi_integral_form(a, b)
        return (float(self.psi(a)) - float(self.psi(b))) / (a * a - b * b)

    def _psi_integral_form(self, a: float, b: float, order: int = 48) -> float:
        t, w = np.polynomial.legendre.leggauss(order)
        sig = 0.5 * (t + 1.0)
        ws = 0.5 * w
        vals = self.rho_spline((b + sig * (a - b)) / self.delta) / self.delta
        integral = float(np.sum(ws * vals))
        return integral / (a + b)

    def dPsi_k(self, lam, lamp, k: int, rel_switch: float = 1e-4):
        """d^k/d lam^k of Psi at (lam, lamp), lam, lamp >= 0, k <= m-1."""
        if k == 0:
            return self.Psi(lam, lamp)
        if k > self.m - 1:
            raise OrderExceeded("dPsi_k supports k <= m-1")
        a = abs(float(lam)); b = abs(float(lamp))
        if abs(a - b) < rel_switch * (a + b):
            return self._dPsi_integral(a, b, k)
        # Leibniz on (psi(a) - psi(b)) * g(a), g = (a^2-b^2)^{-1}
        total = 0.0
        for j in range(k + 1):
            if j == 0:
                fj = float(self.psi(a)) - float(self.psi(b))
            else:
                fj = float(self.dpsi_k(a, j))
            gj = _inv_quad_diff_deriv(a, b, k - j)
            total += math.comb(k, j) * fj * gj
        return total

    def _dPsi_integral(self, a: float, b: float, k: int, order: int = 48) -> float:
        t, w = np.polynomial.legendre.leggauss(order)
        sig = 0.5 * (t + 1.0)
        ws = 0.5 * w
        total = 0.0
        for j in range(k + 1):
            if j == 0:
                integ = float(np.sum(ws * self.rho_spline((b + sig * (a - b)) / self.delta))) / self.delta
            else:
                vals = self.deriv_splines[j]((b + sig * (a - b)) / self.delta)
                integ = float(np.sum(ws * sig**j * vals)) / self.delta ** (j + 1)
            gj = (-1.0) ** (k - j) * math.factorial(k - j) / (a + b) ** (k - j + 1)
            total += math.comb(k, j) * integ * gj
        return total


def _inv_quad_diff_deriv(a: float, b: float, n: int) -> float:
    """n-th derivative in a of (a^2 - b^2)^{-1} via partial fractions."""
    if b < 1e-12:
        return (-1.0) ** n * math.factorial(n + 1) / a ** (n + 2)
    fac = (-1.0) ** n * math.factorial(n) / (2.0 * b)
    return fac * (1.0 / (a - b) ** (n + 1) - 1.0 / (a + b) ** (n + 1))


def build_rho(m: int, delta: float) -> CutoffFamily:
    """Construct rho_m as m iterated uniform convolutions inside [1, 2].

    Widths a_j = W/(j(j+1)) with W = 1 keep the total support below 1, so the
    shifted bump sits strictly inside [1, 2].  Construction-time guards
    (unit mass, nonnegativity, support, finite fitted constant) raise
    BoundViolation on failure; they are bug tripwires, not estimates.
    """
    if m < 1:
        raise ConstraintViolation("need m >= 1")
    if delta <= 0:
        raise ConstraintViolation("need delta > 0")
    widths = [Fraction(1, j * (j + 1)) for j in range(1, m + 1)]
    density = iterated_uniform_density(widths)
    density = PiecewisePoly([b + 1 for b in density.breaks], density.coeffs)

    cum = density.antiderivative()
    mass = cum.right
    if abs(mass - 1.0) > 1e-10:
        raise BoundViolation(f"unit mass violated: integral = {mass!r}")

    derivs = [density]
    for _ in range(m - 1):
        derivs.append(derivs[-1].derivative())

    sigma = np.linspace(1.0, 2.0, 2049)
    samples = density(sigma)
    if np.min(samples) < -1e-10:
        raise BoundViolation("rho_m went negative")
    if abs(density(0.999)) > 0 or abs(density(2.001)) > 0:
        raise BoundViolation("support escaped [1, 2]")

    fitted = 0.0
    for k in range(m):
        mk = derivs[k].max_abs()
        fitted = max(fitted, (mk / math.factorial(k)) ** (1.0 / (k + 1)))
    if not np.isfinite(fitted):
        raise BoundViolation("fitted derivative constant is not finite")

    return CutoffFamily(m=m, delta=delta, rho_spline=density, cum_spline=cum,
                        deriv_splines=derivs, fitted_C=fitted,
                        rho_samples=samples, sigma_grid=sigma)


def family_to_csv(family: CutoffFamily, path) -> None:
    data = np.column_stack([
        family.sigma_grid,
        family.rho_samples,
        family.cum_spline(family.sigma_grid),
    ])
    np.savetxt(path, data, delimiter=",", header="sigma,rho,cumulative",
               comments="", fmt="%.17g")


# ---------------------------------------------------------------------------
# Almost-analytic extension
# ---------------------------------------------------------------------------

def _smoothstep(x):
    """C-infinity ramp: 0 for x <= 0, 1 for x >= 1."""
    x = np.asarray(x, dtype=float)
    lo = x <= 0.0
    hi = x >= 1.0
    mid = ~(lo | hi)
    out = np.zeros_like(x)
    out[hi] = 1.0
    xm = x[mid]
    e1 = np.exp(-1.0 / xm)
    e2 = np.exp(-1.0 / (1.0 - xm))
    out[mid] = e1 / (e1 + e2)
    return out


def spectral_derivatives(x: np.ndarray, samples: np.ndarray, max_order: int):
    """Derivatives of compactly supported samples by filtered FFT.

    Modes below the roundoff floor are zeroed before multiplying by (i xi)^n,
    which keeps high-order differentiation from amplifying noise.  Returns a
    callable list d[n](x_query) using cubic-spline interpolation of the
    differentiated samples.
    """
    from scipy.interpolate import CubicSpline

    x = np.asarray(x, dtype=float)
    n = len(x)
    L = x[-1] - x[0] + (x[1] - x[0])
    xi = 2.0 * np.pi * np.fft.fftfreq(n, d=(x[1] - x[0]))
    fhat = np.fft.fft(samples)
    floor = 50.0 * np.finfo(float).eps * np.max(np.abs(fhat))
    fhat_filtered = np.where(np.abs(fhat) < floor, 0.0, fhat)
    out = []
    for order in range(max_order + 1):
        d = np.real(np.fft.ifft((1j * xi) ** order * fhat_filtered))
        out.append(CubicSpline(x, d, extrapolate=False))

    def make(fn):
        def call(xq):
            v = fn(np.asarray(xq, dtype=float))
            return np.nan_to_num(v, nan=0.0)
        return call

    return [make(f) for f in out]


@dataclass
class AlmostAnalytic:
    """phi~(x+iy) = chi(y) sum_{n<=N} phi^(n)(x) (iy)^n / n! and its dbar.

    dbar phi~ = chi(y) phi^(N+1)(x) (iy)^N / (2 N!) + (i/2) chi'(y) * (sum),
    so |dbar phi~| vanishes like |Im z|^N near the real axis.
    """

    derivs: list          # callables, order 0..N+1
    N: int
    y_cut: float          # chi = 1 for |y| <= y_cut, 0 beyond 2 y_cut

    def _chi(self, y):
        return 1.0 - _smoothstep((np.abs(y) - self.y_cut) / self.y_cut)

    def _chi_prime(self, y):
        h = 1e-6 * self.y_cut
        return (self._chi(y + h) - self._chi(y - h)) / (2.0 * h)

    def value(self, z):
        z = np.asarray(z, dtype=complex)
        x, y = z.real, z.imag
        total = np.zeros_like(z)
        for n in range(self.N + 1):
            total = total + self.derivs[n](x) * (1j * y) ** n / math.factorial(n)
        return self._chi(y) * total

    def dbar(self, z):
        z = np.asarray(z, dtype=complex)
        x, y = z.real, z.imag
        lead = self._chi(y) * self.derivs[self.N + 1](x) \
            * (1j * y) ** self.N / (2.0 * math.factorial(self.N))
        tail = np.zeros_like(z)
        for n in range(self.N + 1):
            tail = tail + self.derivs[n](x) * (1j * y) ** n / math.factorial(n)
        return lead + 0.5j * self._chi_prime(y) * tail

    def vanishing_rate(self, x0: float, ys=None) -> float:
        """Fitted slope of log|dbar| against log|y| as y -> 0."""
        ys = np.logspace(-3.5, -1.5, 9) if ys is None else np.asarray(ys)
        vals = np.abs(self.dbar(x0 + 1j * ys))
        keep = vals > 0
        if np.count_nonzero(keep) < 3:
            return np.inf
        coeffs = np.polyfit(np.log(ys[keep]), np.log(vals[keep]), 1)
        return float(coeffs[0])


def almost_analytic(phi, N: int, support: tuple[float, float],
                    n_samples: int = 4096, y_cut: float = 1.0,
                    derivs: Optional[list] = None) -> AlmostAnalytic:
    """Build the order-N almost-analytic extension of a real function.

    ``phi`` may be a callable or an array of samples on a uniform grid over
    ``support`` (the function must vanish near both ends).  Exact derivative
    callables can be supplied to bypass spectral differentiation.
    """
    lo, hi = support
    if derivs is None:
        pad = 0.25 * (hi - lo)
        x = np.linspace(lo - pad, hi + pad, n_samples, endpoint=False)
        samples = phi(x) if callable(phi) else np.interp(x, np.linspace(lo, hi, len(phi)), phi)
        derivs = spectral_derivatives(x, samples, N + 1)
    return AlmostAnalytic(derivs=derivs, N=N, y_cut=y_cut)


# ---------------------------------------------------------------------------
# Helffer-Sjostrand functional calculus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HSQuadrature:
    """Midpoint-cell quadrature spec for the complex-plane integral.

    Uniform midpoint cells in both directions: the dbar weight grows like
    |Im z|^N toward the chi cutoff, so uniform rows balance the error better
    than axis-graded ones for the N used here.
    """

    cell: float = 0.04
    y_floor: float = 0.05
    x_pad: float = 0.5

    def refined(self, factor: float = 0.5) -> "HSQuadrature":
        return HSQuadrature(self.cell * factor, self.y_floor, self.x_pad)


def hs_apply(matrix, extension: AlmostAnalytic, support: tuple[float, float],
             quad: HSQuadrature = HSQuadrature()) -> np.ndarray:
    """phi(M) = (1/pi) sum_cells dbar(phi~)(z) (M - z)^{-1} area.

    Cells with |Im z| below the floor are excluded; their contribution is
    bounded by the |Im z|^N vanishing rate against the 1/|Im z| resolvent
    bound, so the floor is chosen to keep that mass below tolerance.  For
    Hermitian input and real phi the lower half-plane is the Hermitian
    transpose of the upper, so only Im z > 0 is visited.  Dense LU per cell;
    no spectral information about M is used.
    """
    M = np.asarray(matrix.toarray() if hasattr(matrix, "toarray") else matrix,
                   dtype=complex)
    n = M.shape[0]
    lo, hi = support
    x_lo, x_hi = lo - quad.x_pad, hi + quad.x_pad
    y_hi = 2.0 * extension.y_cut
    nx = max(4, int(np.ceil((x_hi - x_lo) / quad.cell)))
    ny = max(2, int(np.ceil((y_hi - quad.y_floor) / quad.cell)))
    xs = x_lo + (np.arange(nx) + 0.5) * (x_hi - x_lo) / nx
    ys = quad.y_floor + (np.arange(ny) + 0.5) * (y_hi - quad.y_floor) / ny
    area = (x_hi - x_lo) / nx * (y_hi - quad.y_floor) / ny

    acc = np.zeros((n, n), dtype=complex)
    eye = np.eye(n, dtype=complex)
    for y in ys:
        weights = extension.dbar(xs + 1j * y) * area
        for x0, w in zip(xs, weights):
            if abs(w) < 1e-18:
                continue
            acc += w * np.linalg.solve(M - (x0 + 1j * y) * eye, eye)
    return (acc + acc.conjugate().T) / np.pi


def hs_apply_vec(matrix, extension: AlmostAnalytic, support: tuple[float, float],
                 v: np.ndarray, quad: HSQuadrature = HSQuadrature(),
                 check_refinement: Optional[float] = None) -> np.ndarray:
    """phi(M) v without forming the full matrix (one solve per cell).

    With ``check_refinement`` set, the result is recomputed at half the cell
    size and QuadratureUnderResolved is raised if the two differ by more than
    the given relative tolerance.
    """
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    M = matrix.tocsc() if sp.issparse(matrix) else np.asarray(matrix, dtype=complex)
    n = M.shape[0]
    lo, hi = support
    x_lo, x_hi = lo - quad.x_pad, hi + quad.x_pad
    y_hi = 2.0 * extension.y_cut
    nx = max(4, int(np.ceil((x_hi - x_lo) / quad.cell)))
    ny = max(2, int(np.ceil((y_hi - quad.y_floor) / quad.cell)))
    xs = x_lo + (np.arange(nx) + 0.5) * (x_hi - x_lo) / nx
    ys = quad.y_floor + (np.arange(ny) + 0.5) * (y_hi - quad.y_floor) / ny
    area = (x_hi - x_lo) / nx * (y_hi - quad.y_floor) / ny

    acc = np.zeros(n, dtype=complex)
    accH = np.zeros(n, dtype=complex)
    eye = sp.identity(n, dtype=complex, format="csc") if sp.issparse(M) \
        else np.eye(n, dtype=complex)
    for y in ys:
        weights = extension.dbar(xs + 1j * y) * area
        for x0, w in zip(xs, weights):
            if abs(w) < 1e-18:
                continue
            z = x0 + 1j * y
            if sp.issparse(M):
                lu = spla.splu(M - z * eye)
                acc += w * lu.solve(v.astype(complex))
                accH += np.conj(w) * lu.solve(v.astype(complex), trans="H")
            else:
                acc += w * np.linalg.solve(M - z * eye, v)
                accH += np.conj(w) * np.linalg.solve(M.conjugate().T - np.conj(z) * eye, v)
    out = (acc + accH) / np.pi
    if check_refinement is not None:
        fine = hs_apply_vec(matrix, extension, support, v, quad.refined(), None)
        if np.linalg.norm(fine - out) > check_refinement * max(np.linalg.norm(fine), 1e-300):
            raise QuadratureUnderResolved(
                "halving the cell size moved phi(M)v beyond tolerance")
        return fine
    return out
