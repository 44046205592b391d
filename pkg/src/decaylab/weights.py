"""Scalar weight functions: Carleman weights, exponential weights, field specs.

The Carleman machinery is driven by two radial profiles: a Lipschitz
multiplier ``omega`` and a C^1 phase ``phi`` whose derivative switches from a
slowly varying profile on [0, A] to a short-range tail K_A (r+1)^{-2s} beyond
A.  Everything here is closed-form; numerical quadrature appears only in the
test oracles.

All evaluators accept scalars or numpy arrays in ``r`` and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConstraintViolation, DomainMismatch

ArrayLike = np.ndarray


@dataclass(frozen=True)
class CarlemanParams:
    """Parameter pack (s, ell_w, kappa, A0, tau) with derived scales.

    The admissible region is the open polytope

        0 < s - 1/2 < ell_w < 2s/3 < 2/3,
        0 < kappa < 2s - 1,   kappa < 1 - ell_w,

    and the derived quantities are recomputed on access so they can never go
    stale:  A = A0 * tau^(2 / (1 + 2*ell_w - 2*s)) and
    K_A = (A+1)^(2s - ell_w) * (2 - (A+1)^(-kappa)).
    """

    s: float
    ell_w: float
    kappa: float
    A0: float
    tau: float

    def __post_init__(self):
        s, ell, kap = self.s, self.ell_w, self.kappa
        if not (0.0 < s - 0.5 < ell < 2.0 * s / 3.0 < 2.0 / 3.0):
            raise ConstraintViolation(
                f"need 0 < s-1/2 < ell_w < 2s/3 < 2/3, got s={s}, ell_w={ell}")
        if not (0.0 < kap < 2.0 * s - 1.0 and kap < 1.0 - ell):
            raise ConstraintViolation(
                f"need 0 < kappa < 2s-1 and kappa < 1-ell_w, got kappa={kap}")
        if self.A0 <= 0.0 or self.tau <= 0.0:
            raise ConstraintViolation("A0 and tau must be positive")

    @property
    def A(self) -> float:
        return self.A0 * self.tau ** (2.0 / (1.0 + 2.0 * self.ell_w - 2.0 * self.s))

    @property
    def K_A(self) -> float:
        A = self.A
        return (A + 1.0) ** (2.0 * self.s - self.ell_w) * (2.0 - (A + 1.0) ** (-self.kappa))

    def with_tau(self, tau: float) -> "CarlemanParams":
        return CarlemanParams(self.s, self.ell_w, self.kappa, self.A0, tau)


DEFAULT_PARAMS = dict(s=0.6, ell_w=0.3, kappa=0.1)


def default_params(A0: float = 1.0, tau: float = 2.0) -> CarlemanParams:
    """Interior point of the constraint polytope; see module tests."""
    return CarlemanParams(A0=A0, tau=tau, **DEFAULT_PARAMS)


# ---------------------------------------------------------------------------
# omega and phi
# ---------------------------------------------------------------------------

def eval_omega(r, p: CarlemanParams):
    """Two-branch Lipschitz multiplier; continuous at r = A."""
    r = np.asarray(r, dtype=float)
    A, ell, s = p.A, p.ell_w, p.s
    inner = (r + 1.0) ** (2.0 * ell)
    outer = (A + 1.0) ** (2.0 * ell) * (
        1.0 + (A + 1.0) ** (-2.0 * s + 1.0) - (r + 1.0) ** (-2.0 * s + 1.0))
    return np.where(r <= A, inner, outer)


def eval_omega_prime(r, p: CarlemanParams):
    """Derivative of omega away from the junction (jump at r = A)."""
    r = np.asarray(r, dtype=float)
    A, ell, s = p.A, p.ell_w, p.s
    inner = 2.0 * ell * (r + 1.0) ** (2.0 * ell - 1.0)
    outer = (2.0 * s - 1.0) * (A + 1.0) ** (2.0 * ell) * (r + 1.0) ** (-2.0 * s)
    return np.where(r < A, inner, outer)


def eval_phi_prime(r, p: CarlemanParams):
    r = np.asarray(r, dtype=float)
    A, ell, kap, s = p.A, p.ell_w, p.kappa, p.s
    inner = (r + 1.0) ** (-ell) * (2.0 - (r + 1.0) ** (-kap))
    outer = p.K_A * (r + 1.0) ** (-2.0 * s)
    return np.where(r <= A, inner, outer)


def eval_phi_prime2(r, p: CarlemanParams):
    """phi'' away from r = A (phi' is Lipschitz, phi'' jumps there)."""
    r = np.asarray(r, dtype=float)
    A, ell, kap, s = p.A, p.ell_w, p.kappa, p.s
    inner = -2.0 * ell * (r + 1.0) ** (-ell - 1.0) + (ell + kap) * (r + 1.0) ** (-ell - kap - 1.0)
    outer = -2.0 * s * p.K_A * (r + 1.0) ** (-2.0 * s - 1.0)
    return np.where(r < A, inner, outer)


def eval_phi(r, p: CarlemanParams):
    """Antiderivative of phi' with phi(0) = 0, matched continuously at A.

    Both branches integrate in closed form (pure powers); quadrature of phi'
    is used only as a test oracle.
    """
    r = np.asarray(r, dtype=float)
    A, ell, kap, s = p.A, p.ell_w, p.kappa, p.s

    def inner_anti(rr):
        # int_0^rr [2(t+1)^(-ell) - (t+1)^(-ell-kap)] dt
        return (2.0 * ((rr + 1.0) ** (1.0 - ell) - 1.0) / (1.0 - ell)
                - ((rr + 1.0) ** (1.0 - ell - kap) - 1.0) / (1.0 - ell - kap))

    phi_A = inner_anti(np.asarray(A))
    outer = phi_A + p.K_A * ((A + 1.0) ** (1.0 - 2.0 * s) - (r + 1.0) ** (1.0 - 2.0 * s)) / (2.0 * s - 1.0)
    return np.where(r <= A, inner_anti(r), outer)


def eval_omega_phip2_prime(r, p: CarlemanParams):
    """Analytic derivative of omega * (phi')^2 on each open branch.

    Inner branch: omega*(phi')^2 = (2 - (r+1)^(-kappa))^2.  Outer branch is a
    product of the omega tail and K_A^2 (r+1)^(-4s).
    """
    r = np.asarray(r, dtype=float)
    A, ell, kap, s = p.A, p.ell_w, p.kappa, p.s
    inner = 2.0 * kap * (r + 1.0) ** (-kap - 1.0) * (2.0 - (r + 1.0) ** (-kap))
    pref = (A + 1.0) ** (2.0 * ell) * p.K_A ** 2
    tail = 1.0 + (A + 1.0) ** (1.0 - 2.0 * s) - (r + 1.0) ** (1.0 - 2.0 * s)
    outer = pref * ((2.0 * s - 1.0) * (r + 1.0) ** (-6.0 * s)
                    - 4.0 * s * tail * (r + 1.0) ** (-4.0 * s - 1.0))
    return np.where(r < A, inner, outer)


def eval_phi_p_prime(r, p: CarlemanParams, tau: float, p_exp: float):
    """d/dr of phi_p = phi + (p_exp/2) tau^{-1} log(r^2+1)."""
    r = np.asarray(r, dtype=float)
    return eval_phi_prime(r, p) + (p_exp / tau) * r / (r * r + 1.0)


def eval_phi_p_prime2(r, p: CarlemanParams, tau: float, p_exp: float):
    r = np.asarray(r, dtype=float)
    return eval_phi_prime2(r, p) + (p_exp / tau) * (1.0 - r * r) / (r * r + 1.0) ** 2


# ---------------------------------------------------------------------------
# Lemma 2.1 pointwise verification
# ---------------------------------------------------------------------------

@dataclass
class InequalityReport:
    """Margins and fitted constants for the four weight inequalities.

    margin_21 / margin_22 cover the inner branch (nonnegative means the
    stated lower bound holds pointwise).  The outer-branch inequalities only
    assert existence of a constant, so C_23 (largest admissible) and C_24
    (smallest admissible) are fitted from the grid.
    """

    r_inner: np.ndarray
    margin_21: np.ndarray
    margin_22: np.ndarray
    r_outer: np.ndarray
    fitted_C23: float
    fitted_C24: float
    params: CarlemanParams
    scale_21: np.ndarray = None
    scale_22: np.ndarray = None

    def min_relative_margin(self) -> float:
        """Smallest margin normalized by the local size of the inequality.

        The bounds approach relative equality as r grows, so raw margins can
        round to tiny negatives far out; the relative margin is the honest
        float-level statement of 'holds with margin >= 0'.
        """
        out = 0.0
        if self.margin_21.size:
            out = min(out, float(np.min(self.margin_21 / self.scale_21)))
        if self.margin_22.size:
            out = min(out, float(np.min(self.margin_22 / self.scale_22)))
        return out

    @property
    def all_nonnegative(self) -> bool:
        return self.min_relative_margin() >= -1e-12


def verify_lemma21(p: CarlemanParams, r_grid) -> InequalityReport:
    """Pointwise margins of the two inner inequalities and fitted outer constants.

    The grid must avoid r = A exactly: omega' and phi'' jump there and the
    two-sided derivative is undefined.
    """
    r = np.asarray(r_grid, dtype=float)
    if r.ndim != 1 or np.any(np.diff(r) <= 0):
        raise ConstraintViolation("r_grid must be strictly increasing")
    if np.any(r < 0):
        raise ConstraintViolation("r_grid must be nonnegative")
    A = p.A
    if np.any(r == A):
        raise ConstraintViolation("r_grid must exclude r = A exactly")

    inner = r[(r > 0) & (r < A)]
    outer = r[r > A]

    margin_21 = np.asarray([])
    margin_22 = np.asarray([])
    scale_21 = np.asarray([])
    scale_22 = np.asarray([])
    if inner.size:
        lhs21 = 2.0 * eval_omega(inner, p) / inner - eval_omega_prime(inner, p)
        rhs21 = 2.0 * (1.0 - p.ell_w) * (inner + 1.0) ** (2.0 * p.ell_w - 1.0)
        margin_21 = lhs21 - rhs21
        scale_21 = np.maximum(np.abs(lhs21), np.abs(rhs21))
        lhs22 = eval_omega_phip2_prime(inner, p)
        rhs22 = p.kappa * (inner + 1.0) ** (-1.0 - p.kappa)
        margin_22 = lhs22 - rhs22
        scale_22 = np.maximum(np.abs(lhs22), np.abs(rhs22))

    C23 = np.inf
    C24 = 0.0
    if outer.size:
        lhs23 = (2.0 * eval_omega(outer, p) / outer - eval_omega_prime(outer, p))
        C23 = float(np.min(lhs23 * (outer + 1.0) / A ** (2.0 * p.ell_w)))
        lhs24 = eval_omega_phip2_prime(outer, p)
        scale = A ** (-1.0 - 2.0 * p.ell_w + 2.0 * p.s) * eval_omega_prime(outer, p)
        C24 = float(np.max(np.maximum(0.0, -lhs24) / scale))

    return InequalityReport(inner, margin_21, margin_22, outer, C23, C24, p,
                             scale_21, scale_22)


# ---------------------------------------------------------------------------
# Exponential weight and potential/field specs
# ---------------------------------------------------------------------------

def bracket(x) -> np.ndarray:
    """Japanese bracket <x> = sqrt(|x|^2 + 1); x is (n, d) points or radii."""
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        return np.sqrt(x * x + 1.0)
    return np.sqrt(np.sum(x * x, axis=-1) + 1.0)


@dataclass(frozen=True)
class ExpWeight:
    """mu(x) = exp(-c <x> / 2) with c > 0, plus its reciprocal."""

    c: float

    def __post_init__(self):
        if self.c <= 0:
            raise ConstraintViolation("decay rate c must be positive")

    def mu(self, x) -> np.ndarray:
        return np.exp(-0.5 * self.c * bracket(x))

    def mu_inv(self, x) -> np.ndarray:
        return np.exp(0.5 * self.c * bracket(x))

    @property
    def gamma0(self) -> float:
        """Default working strip height, strictly inside c/2."""
        return 0.45 * self.c


@dataclass(frozen=True)
class FieldSpec:
    """Bounded electric potential V and magnetic field b with decay metadata.

    tag='exponential' promises |V| + |b| <= C exp(-c_exp <x>), the class for
    which the meromorphic continuation is available; tag='short_range'
    promises only a polynomial envelope C <x>^(-rho_decay).  Decay is spot
    checked on sample points, not proved.
    """

    V: Callable[[np.ndarray], np.ndarray]
    b: Optional[Callable[[np.ndarray], np.ndarray]] = None
    tag: str = "exponential"
    rho_decay: float = 2.0
    c_exp: float = 1.0
    C_bound: float = 10.0

    def __post_init__(self):
        if self.tag not in ("exponential", "short_range"):
            raise ConstraintViolation(f"unknown decay tag {self.tag!r}")
        if self.tag == "exponential" and self.c_exp <= 0:
            raise ConstraintViolation("exponential tag needs c_exp > 0")
        if self.tag == "short_range" and self.rho_decay <= 1:
            raise ConstraintViolation("short-range tag needs rho_decay > 1")

    def vtilde(self, x) -> np.ndarray:
        """V + |b|^2, the effective electric part of the expanded operator."""
        v = np.asarray(self.V(x), dtype=float)
        if self.b is None:
            return v
        bv = np.asarray(self.b(x), dtype=float)
        if bv.ndim == 1:  # scalar field on a line
            return v + bv * bv
        return v + np.sum(bv * bv, axis=-1)

    def validate_on(self, points: np.ndarray) -> float:
        """Worst ratio of |V|+|b| against the promised envelope on samples."""
        points = np.asarray(points, dtype=float)
        try:
            mag = np.abs(np.asarray(self.V(points), dtype=float))
            if self.b is not None:
                mag = mag + np.linalg.norm(np.asarray(self.b(points), dtype=float), axis=-1)
        except Exception as exc:
            raise DomainMismatch(f"fields not evaluable on grid: {exc}") from exc
        br = bracket(points)
        if self.tag == "exponential":
            envelope = self.C_bound * np.exp(-self.c_exp * br)
        else:
            envelope = self.C_bound * br ** (-self.rho_decay)
        ratio = float(np.max(mag / envelope))
        if ratio > 1.0:
            raise ConstraintViolation(
                f"fields exceed their decay envelope by factor {ratio:.3g}")
        return ratio


def exponential_sample_field(amplitude: float = 1.0, rate: float = 2.0) -> FieldSpec:
    """V(x) = amplitude * exp(-rate <x>), b = 0; the workhorse V >= 0 sample."""
    def V(x):
        return amplitude * np.exp(-rate * bracket(x))
    return FieldSpec(V=V, b=None, tag="exponential", c_exp=rate,
                     C_bound=max(2.0 * amplitude, 1.0))
