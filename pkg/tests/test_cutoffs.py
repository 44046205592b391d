import math

import numpy as np
import pytest

from decaylab import cutoffs as C
from decaylab.errors import ConstraintViolation, OrderExceeded, QuadratureUnderResolved


@pytest.fixture(scope="module")
def fam8():
    return C.build_rho(8, 0.3)


class TestRho:
    @pytest.mark.parametrize("m", [1, 2, 3, 5, 8, 12])
    def test_mass_support_sign(self, m):
        fam = C.build_rho(m, 0.25)
        assert abs(fam.cum_spline.right - 1.0) < 1e-12
        sigma = np.linspace(0.0, 3.0, 1500)
        vals = fam.rho(sigma)
        assert np.all(vals >= -1e-12)
        assert np.all(vals[(sigma < 1.0) | (sigma > 2.0)] == 0.0)

    def test_m1_degenerate_base_case(self):
        fam = C.build_rho(1, 0.3)
        # rho_1 is the scaled indicator: height 1/a1 = 2 on [1, 1.5]
        assert fam.rho(1.25) == pytest.approx(2.0)
        assert fam.rho(1.75) == 0.0
        with pytest.raises(OrderExceeded):
            fam.drho(1.2, 1)  # the derivative is distributional

    def test_fft_convolution_oracle(self, fam8):
        # independent construction: FFT convolution of the shifted indicators
        n = 2 ** 15
        x = np.linspace(0.0, 1.0, n, endpoint=False)
        dx = x[1] - x[0]
        dens = np.zeros(n); dens[0] = 1.0 / dx
        spec = np.fft.rfft(dens)
        for j in range(1, 9):
            a = 1.0 / (j * (j + 1))
            box = (x < a).astype(float)
            box /= box.sum() * dx  # unit mass despite grid misalignment
            spec = spec * np.fft.rfft(box) * dx
        conv = np.fft.irfft(spec, n)
        mine = fam8.rho(1.0 + x)
        # the sampled-indicator oracle carries O(h) kink-alignment error
        assert np.max(np.abs(conv - mine)) < 1e-3 * np.max(np.abs(mine))

    def test_spectral_differentiation_oracle(self, fam8):
        sig = np.linspace(0.9, 2.1, 8192, endpoint=False)
        ders = C.spectral_derivatives(sig, fam8.rho(sig), 3)
        q = np.linspace(1.05, 1.85, 400)
        for k in (1, 2, 3):
            exact = fam8.drho(q, k)
            scale = np.max(np.abs(exact))
            assert np.max(np.abs(exact - ders[k](q))) < 1e-6 * scale

    def test_fitted_envelope_and_refinement_stability(self):
        fam = C.build_rho(8, 0.3)
        for k in range(8):
            mk = fam.deriv_splines[k].max_abs()
            assert mk <= fam.fitted_C ** (k + 1) * math.factorial(k) * (1 + 1e-12)
        coarse = max((fam.deriv_splines[k].max_abs(24) / math.factorial(k)) ** (1 / (k + 1))
                     for k in range(8))
        fine = max((fam.deriv_splines[k].max_abs(96) / math.factorial(k)) ** (1 / (k + 1))
                   for k in range(8))
        assert abs(fine - coarse) / coarse < 1e-3

    def test_fitted_C_reported_for_m_up_to_12(self):
        trend = [C.build_rho(m, 0.3).fitted_C for m in range(2, 13)]
        assert np.all(np.isfinite(trend))

    def test_bad_arguments(self):
        with pytest.raises(ConstraintViolation):
            C.build_rho(0, 0.3)
        with pytest.raises(ConstraintViolation):
            C.build_rho(3, -0.1)


class TestPsi:
    def test_plateau_values(self, fam8):
        d = fam8.delta
        assert fam8.psi(0.5 * d) == 0.0
        assert fam8.psi(3.0 * d) == 1.0
        lam = np.linspace(-2, 2, 401)
        vals = fam8.psi(lam)
        assert np.all((0.0 <= vals) & (vals <= 1.0))
        assert np.allclose(vals, fam8.psi(-lam))

    def test_derivative_identity(self, fam8):
        lam = 0.41
        assert fam8.dpsi_k(lam, 1) == pytest.approx(
            fam8.rho(lam / fam8.delta) / fam8.delta, abs=1e-14)
        h = 1e-6
        fd = (fam8.psi(lam + h) - fam8.psi(lam - h)) / (2 * h)
        assert fam8.dpsi_k(lam, 1) == pytest.approx(fd, abs=1e-8)

    def test_62_envelope(self, fam8):
        lam = np.linspace(0.0, 1.0, 2000)
        for k in range(1, 9):
            vals = np.max(np.abs(fam8.dpsi_k(lam, k)))
            envelope = (fam8.fitted_C / fam8.delta) ** k * math.factorial(k)
            assert vals <= envelope * (1 + 1e-10)

    def test_order_exceeded(self, fam8):
        with pytest.raises(OrderExceeded):
            fam8.dpsi_k(0.5, 9)


class TestPsiTwoVariable:
    def test_diagonal_display(self, fam8):
        d = fam8.delta
        lam = 1.5 * d
        expect = (1.0 / (2 * lam)) * fam8.dpsi_k(lam, 1)
        assert fam8.Psi(lam, lam) == pytest.approx(float(expect), rel=1e-12)

    def test_zero_square(self, fam8):
        d = fam8.delta
        assert fam8.Psi(d / 2, d / 2) == 0.0
        assert fam8.Psi(-d / 3, d / 2) == 0.0

    def test_overlap_agreement(self, fam8):
        a = 0.5
        for rel in (2.1e-4, 5e-4, 1e-3):
            b = a * (1 + rel)
            direct = (float(fam8.psi(a)) - float(fam8.psi(b))) / (a * a - b * b)
            assert abs(fam8.Psi(a, b) - direct) < 1e-10 * abs(direct)

    def test_symmetries(self, fam8):
        assert fam8.Psi(0.5, 0.8) == pytest.approx(fam8.Psi(0.8, 0.5), rel=1e-14)
        assert fam8.Psi(-0.5, 0.8) == pytest.approx(fam8.Psi(0.5, 0.8), rel=1e-14)

    def test_64_envelope(self, fam8):
        grid = np.linspace(0.05, 3.0, 40)
        for k in (0, 2, 4):
            worst = 0.0
            for a in grid:
                vals = np.array([fam8.dPsi_k(a, b, k) for b in grid])
                worst = max(worst, np.max(np.abs(vals) * (a + 1) * (grid + 1)
                                          / math.factorial(k)) ** (1 / (k + 1)))
            assert np.isfinite(worst)


class TestAlmostAnalytic:
    def _gauss(self, n, x0=3.0, sig=0.6):
        from numpy.polynomial.hermite_e import hermeval

        def f(x, n=n):
            u = (np.asarray(x, dtype=float) - x0) / sig
            c = np.zeros(n + 1); c[n] = 1.0
            return (-1.0 / sig) ** n * hermeval(u, c) * np.exp(-0.5 * u * u)
        return f

    def test_restriction(self):
        ext = C.almost_analytic(self._gauss(0), 4, (0.0, 6.0))
        x = np.array([2.0, 3.0, 3.7])
        assert np.max(np.abs(ext.value(x + 0j) - self._gauss(0)(x))) < 1e-10

    def test_zero_function(self):
        ext = C.almost_analytic(lambda x: np.zeros_like(np.asarray(x, float)),
                                4, (0.0, 6.0))
        assert abs(ext.value(1.0 + 0.3j)) == 0.0
        assert abs(ext.dbar(1.0 + 0.3j)) == 0.0

    def test_vanishing_rate_slope(self):
        for N in (2, 4):
            ext = C.almost_analytic(self._gauss(0), N, (0.0, 6.0))
            assert ext.vanishing_rate(2.8) >= N - 0.2

    def test_exact_vs_spectral_derivative_paths(self):
        exact = C.almost_analytic(self._gauss(0), 4, (0.0, 6.0),
                                  derivs=[self._gauss(n) for n in range(6)])
        spectral = C.almost_analytic(self._gauss(0), 4, (0.0, 6.0))
        z = 2.6 + 0.07j
        assert abs(exact.dbar(z) - spectral.dbar(z)) < 1e-8 * abs(exact.dbar(z))


class TestHelfferSjostrand:
    def _setup(self, n=60, seed=3):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        M = (A + A.conjugate().T) / (2 * np.sqrt(n))
        lam, V = np.linalg.eigh(M)
        return M, lam, V

    def _bump(self):
        from numpy.polynomial.hermite_e import hermeval
        x0, sig = 0.5, 0.5

        def deriv(n):
            def f(x):
                u = (np.asarray(x, dtype=float) - x0) / sig
                c = np.zeros(n + 1); c[n] = 1.0
                return (-1.0 / sig) ** n * hermeval(u, c) * np.exp(-0.5 * u * u)
            return f
        return deriv, (x0 - 3.0, x0 + 3.0)

    def test_eigendecomposition_oracle(self):
        M, lam, V = self._setup()
        deriv, support = self._bump()
        ext = C.almost_analytic(deriv(0), 8, support,
                                derivs=[deriv(n) for n in range(10)], y_cut=0.8)
        hs = C.hs_apply(M, ext, support,
                        C.HSQuadrature(cell=0.04, y_floor=0.05, x_pad=2.0))
        ref = (V * deriv(0)(lam)[None, :]) @ V.conjugate().T
        assert np.linalg.norm(hs - ref, 2) < 1e-5

    def test_single_eigenvalue_in_support(self):
        deriv, support = self._bump()
        M = np.diag([0.5, 4.0, -3.0]).astype(complex)
        ext = C.almost_analytic(deriv(0), 8, support,
                                derivs=[deriv(n) for n in range(10)], y_cut=0.8)
        hs = C.hs_apply(M, ext, support,
                        C.HSQuadrature(cell=0.03, y_floor=0.04, x_pad=2.0))
        assert abs(hs[0, 0] - deriv(0)(0.5)) < 1e-6
        assert abs(hs[1, 1]) < 1e-6 and abs(hs[2, 2]) < 1e-6

    def test_refinement_reduces_error(self):
        M, lam, V = self._setup(n=40)
        deriv, support = self._bump()
        ext = C.almost_analytic(deriv(0), 8, support,
                                derivs=[deriv(n) for n in range(10)], y_cut=0.8)
        ref = (V * deriv(0)(lam)[None, :]) @ V.conjugate().T
        errs = [np.linalg.norm(C.hs_apply(M, ext, support,
                                          C.HSQuadrature(cell=c, y_floor=0.05,
                                                         x_pad=2.0)) - ref, 2)
                for c in (0.16, 0.08)]
        assert errs[0] / errs[1] >= 4.0

    def test_linearity(self):
        M, lam, V = self._setup(n=30)
        deriv, support = self._bump()
        quad = C.HSQuadrature(cell=0.06, y_floor=0.05, x_pad=2.0)
        ext1 = C.almost_analytic(deriv(0), 6, support,
                                 derivs=[deriv(n) for n in range(8)], y_cut=0.8)
        shifted = [lambda x, n=n: deriv(n)(np.asarray(x) + 0.4) for n in range(8)]
        ext2 = C.almost_analytic(shifted[0], 6, support, derivs=shifted, y_cut=0.8)
        both = [lambda x, n=n: deriv(n)(x) + shifted[n](x) for n in range(8)]
        ext12 = C.almost_analytic(both[0], 6, support, derivs=both, y_cut=0.8)
        a = C.hs_apply(M, ext1, support, quad)
        b = C.hs_apply(M, ext2, support, quad)
        ab = C.hs_apply(M, ext12, support, quad)
        assert np.linalg.norm(ab - a - b, 2) < 1e-8

    def test_vector_apply_and_refinement_guard(self):
        M, lam, V = self._setup(n=40)
        deriv, support = self._bump()
        ext = C.almost_analytic(deriv(0), 6, support,
                                derivs=[deriv(n) for n in range(8)], y_cut=0.8)
        rng = np.random.default_rng(0)
        v = rng.standard_normal(40)
        out = C.hs_apply_vec(M, ext, support, v,
                             C.HSQuadrature(cell=0.08, y_floor=0.05, x_pad=2.0),
                             check_refinement=1e-2)
        ref = (V * deriv(0)(lam)[None, :]) @ V.conjugate().T @ v
        assert np.linalg.norm(out - ref) < 1e-3
        with pytest.raises(QuadratureUnderResolved):
            C.hs_apply_vec(M, ext, support, v,
                           C.HSQuadrature(cell=0.8, y_floor=0.3, x_pad=2.0),
                           check_refinement=1e-7)

    def test_functional_calculus_square_rule(self, fam8):
        # psi_m(sqrt(P)) realized through eigenvalues: psi(sqrtP)^2 = (psi^2)(sqrtP)
        rng = np.random.default_rng(5)
        A = rng.standard_normal((50, 50))
        M = A @ A.T / 50
        lam, V = np.linalg.eigh(M)
        om = np.sqrt(np.maximum(lam, 0))
        P1 = (V * fam8.psi(om)[None, :]) @ V.T
        P2 = (V * (fam8.psi(om) ** 2)[None, :]) @ V.T
        assert np.linalg.norm(P1 @ P1 - P2, 2) < 1e-12
        assert np.linalg.norm(P1 @ M - M @ P1, 2) < 1e-8
