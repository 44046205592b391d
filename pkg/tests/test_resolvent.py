import math

import numpy as np
import pytest
import scipy.sparse as sp

from decaylab import lattice as L, resolvent as R, weights as W
from decaylab._linalg import ShiftedSolve, dense_opnorm, min_singular_value
from decaylab.errors import (InvalidGrid, NeumannDivergence, PoleInDisc,
                             PreconditionViolation)


class TestLASolve:
    def test_eigenvector_rhs(self, radial_sample):
        _, op = radial_sample
        from scipy.linalg import eigh
        lam, vec = eigh(op.to_dense())
        j = 17
        u = R.la_solve(op, 1.3, 1e-3, +1, vec[:, j])
        # sign=+1 selects (P - lambda^2 + i eps)^{-1}
        assert np.allclose(u, vec[:, j] / (lam[j] - 1.3**2 + 1e-3j), atol=1e-9)

    def test_adjoint_relation(self, radial_sample):
        _, op = radial_sample
        rng = np.random.default_rng(0)
        f = rng.standard_normal(op.n) + 1j * rng.standard_normal(op.n)
        g = rng.standard_normal(op.n) + 1j * rng.standard_normal(op.n)
        lhs = np.vdot(g, R.la_solve(op, 2.0, 1e-3, +1, f))
        rhs = np.vdot(R.la_solve(op, 2.0, 1e-3, -1, g), f)
        assert abs(lhs - rhs) / abs(lhs) < 1e-10

    def test_exact_selfadjoint_bound(self, radial_sample, exterior_sample,
                                     magnetic_1d_sample):
        rng = np.random.default_rng(1)
        for op in (radial_sample[1], exterior_sample[1], magnetic_1d_sample[1]):
            from scipy.linalg import eigvalsh
            spec = eigvalsh(op.to_dense())
            for _ in range(17):
                lam = rng.uniform(0.5, 5.0)
                eps = 10 ** rng.uniform(-4, -1)
                z2 = (lam - 1j * eps) ** 2
                exact = 1.0 / np.min(np.abs(spec - z2))
                assert exact <= 1.0 / (2 * eps * lam) * (1 + 1e-8)
                solver = ShiftedSolve(op.matrix, z2)
                v = rng.standard_normal(op.n)
                assert np.linalg.norm(solver.solve(v)) <= exact * np.linalg.norm(v) * (1 + 1e-8)


class TestWeightedNorm:
    def test_dense_svd_oracle(self):
        grid = L.radial_grid(10.0, 200)
        op = L.assemble_radial_sector(0, 3, None, grid)
        for alpha, beta in ((None, None), (0, None), (None, 0), ("grad", None)):
            q = R.ResolventQuery(1.5, 1e-2, 1, ("poly", 0.6), alpha, beta)
            power = R.weighted_norm(op, q, rtol=1e-9, maxiter=500).value
            dense = dense_opnorm(R.dense_weighted_resolvent(op, q))
            assert power == pytest.approx(dense, rel=1e-6)

    def test_eps_stability_two_point(self, radial_sample):
        _, op = radial_sample
        n1 = R.weighted_norm(op, R.ResolventQuery(2.0, 1e-3, 1, ("exp", W.ExpWeight(2.0)))).value
        n2 = R.weighted_norm(op, R.ResolventQuery(2.0, 5e-4, 1, ("exp", W.ExpWeight(2.0)))).value
        assert abs(n2 - n1) / n1 < 0.02

    def test_poly_weight_validation(self):
        with pytest.raises(PreconditionViolation):
            R.ResolventQuery(1.0, 1e-3, 1, ("poly", 0.4))


class TestSweeps:
    def test_invalid_grid(self, radial_sample):
        _, op = radial_sample
        with pytest.raises(InvalidGrid):
            R.lambda_sweep(op, [2.0, 1.0], R.ResolventQuery(1.0, 1e-3))

    def test_free_slope(self):
        grid = L.radial_grid(20.0, 900)
        op = L.assemble_radial_sector(0, 3, None, grid)
        q = R.ResolventQuery(1.0, 1e-3, 1, ("exp", W.ExpWeight(2.0)))
        prof = R.lambda_sweep(op, np.geomspace(5.0, 40.0, 7), q)
        assert prof.finite
        assert -1.15 < prof.slope_loglog() < -0.85
        assert prof.eps_stability < 0.02

    def test_low_frequency_preconditions(self, radial_sample):
        _, op3 = radial_sample
        with pytest.raises(PreconditionViolation):
            R.low_frequency_sweep(op3, [0.1, 0.2], s=1.2)     # d_eff = 3
        grid5 = L.radial_grid(7.0, 300)
        op5 = L.assemble_radial_sector(0, 5, None, grid5)
        with pytest.raises(PreconditionViolation):
            R.low_frequency_sweep(op5, [0.1, 0.2], s=0.8)     # s <= 1

    def test_low_frequency_certificate(self):
        grid5 = L.radial_grid(7.0, 500)
        op5 = L.assemble_radial_sector(0, 5, lambda r: np.exp(-W.bracket(r) ** 2), grid5)
        prof = R.low_frequency_sweep(op5, [0.025, 0.05, 0.1, 0.2], s=1.2, epsilon=1e-5)
        assert prof.meta["certificate"]
        assert float(np.max(prof.norms) / np.min(prof.norms)) < 1.10
        assert prof.eps_stability < 1e-6


class TestCarlemanRatio:
    def test_zero_input_degenerate_guard(self, default_params):
        stats = R.carleman_ratio(default_params, 2.0, 1.0, 1e-6, trials=0,
                                 grid=L.radial_grid(10.0, 200))
        assert np.isnan(stats.fitted_constant)
        assert stats.degenerate == 0

    def test_variant_223_rhs_never_larger(self, default_params):
        # || . ||_{H^-1_h} <= || . ||_{L^2}: ratios for 2.23 dominate 2.6's
        grid = L.radial_grid(12.0, 400)
        from decaylab.lattice import SemiclassicalNorm
        helper = SemiclassicalNorm(grid)
        s26 = R.carleman_ratio(default_params, 3.0, 2.0, 1e-6, 10, "2.6",
                               grid=grid, seed=9, norm_helper=helper)
        s223 = R.carleman_ratio(default_params, 3.0, 2.0, 1e-6, 10, "2.23",
                                grid=grid, seed=9, norm_helper=helper)
        assert np.all(s223.ratios >= s26.ratios * (1 - 1e-8))

    def test_bump_ratio_stable_under_tau_doubling(self, default_params):
        grid = L.radial_grid(15.0, 500)
        vals = {}
        for tau in (3.0, 6.0):
            stats = R.carleman_ratio(default_params, tau, 2.0, 1e-6, 25, "2.5",
                                     grid=grid, seed=3)
            vals[tau] = stats.max
        assert 0.5 < vals[3.0] / vals[6.0] < 2.0


class TestLemma23:
    @pytest.mark.slow
    def test_theta_scalings(self, default_params):
        grid = L.radial_grid(10.0, 1200)
        tau, lam = 2.0, 1.0
        p = default_params.with_tau(tau)
        th0 = R.neumann_theta0(p, tau, lam, 0.6, grid)
        rep = R.lemma23_check(p, tau, lam, th0, 0.6, grid)
        assert -1.2 < rep.fitted_exponents["2.17"] < -0.8
        assert -1.2 < rep.fitted_exponents["2.18"] < -0.8
        assert -2.2 < rep.fitted_exponents["2.19"] < -1.8
        assert abs(rep.fitted_exponents["2.16"]) < 0.3

    def test_below_theta0_raises(self, default_params):
        grid = L.radial_grid(8.0, 300)
        with pytest.raises(NeumannDivergence):
            R.lemma23_check(default_params.with_tau(2.0), 2.0, 1.0, 1e-3, 0.6, grid)

    def test_free_mode_exact_normal_norm(self):
        # p_exp = 0, phi = 0: operator is (-h^2 Lap +- i theta^2)^{-1};
        # the L2 -> L2 norm equals 1/|h^2 Lam_min + i theta^2| on the spectrum
        grid = L.radial_grid(8.0, 300)
        from decaylab.resolvent import _free_base, _opnorm_weighted_solve
        from decaylab.lattice import SemiclassicalNorm
        from scipy.linalg import eigvalsh
        h, theta = 0.25, 2.0
        Kh = (_free_base(grid) * h**2).tocsr()
        helper = SemiclassicalNorm(grid)
        ones = np.ones(grid.n)
        norm = _opnorm_weighted_solve(Kh, 1j * theta**2, ones, ones, helper,
                                      h, 0, 0, rtol=1e-10, maxiter=600)
        spec = eigvalsh(Kh.toarray())
        exact = float(np.max(1.0 / np.abs(spec + 1j * theta**2)))
        # the normal operator's singular spectrum is nearly flat at the top,
        # so power iteration resolves the norm to ~1e-5 relative here
        assert norm == pytest.approx(exact, rel=5e-5)


class TestContinuation:
    def test_discrete_exact_case_a(self, radial_sample):
        _, op = radial_sample
        mu = W.ExpWeight(2.0)
        st = R.build_continuation("a", op, 2.0 - 0.5j, mu, lam_blocks="discrete")
        lam = 1.7 - 0.05j
        w = mu.mu(op.grid.axis_coords())
        direct = w[:, None] * ShiftedSolve(op.matrix, lam**2).solve_many(
            np.diag(w).astype(complex))
        Y = st.evaluate(lam)
        assert np.linalg.norm(Y - direct, 2) / np.linalg.norm(direct, 2) < 1e-6

    def test_discrete_exact_case_a_magnetic(self, magnetic_1d_sample):
        _, op = magnetic_1d_sample
        mu = W.ExpWeight(1.0)
        st = R.build_continuation("a", op, 1.5 - 0.4j, mu, lam_blocks="discrete")
        lam = 1.2 - 0.08j
        w = mu.mu(op.grid.points())
        direct = w[:, None] * ShiftedSolve(op.matrix, lam**2).solve_many(
            np.diag(w).astype(complex))
        Y = st.evaluate(lam)
        assert np.linalg.norm(Y - direct, 2) / np.linalg.norm(direct, 2) < 1e-6

    def test_discrete_exact_case_b(self, exterior_sample):
        grid, op, eta = exterior_sample
        mu = W.ExpWeight(1.0)
        st = R.build_continuation("b", op, 1.5 - 0.4j, mu, eta=eta,
                                  lam_blocks="discrete")
        lam = 1.1 - 0.07j
        keep = op.grid.keep_indices()
        w = mu.mu(grid.points())
        sol = ShiftedSolve(op.matrix, lam**2).solve_many(
            np.diag(w[keep]).astype(complex))
        direct = np.zeros((grid.size, grid.size), dtype=complex)
        direct[np.ix_(keep, keep)] = w[keep, None] * sol
        Y = st.evaluate(lam)
        assert np.linalg.norm(Y - direct, 2) / np.linalg.norm(direct, 2) < 1e-6

    def test_anchor_is_returned_exactly(self, radial_sample):
        _, op = radial_sample
        mu = W.ExpWeight(2.0)
        z = 2.0 - 0.5j
        for mode in ("discrete", "kernel"):
            st = R.build_continuation("a", op, z, mu, lam_blocks=mode)
            w = mu.mu(op.grid.axis_coords())
            direct = w[:, None] * ShiftedSolve(op.matrix, z**2).solve_many(
                np.diag(w).astype(complex))
            assert np.allclose(st.evaluate(z), direct, atol=1e-12)

    def test_kernel_vs_discrete_second_order(self):
        mu = W.ExpWeight(2.0)
        Vf = lambda rr: np.exp(-2 * W.bracket(rr))
        errs = {}
        for n in (500, 1000):
            grid = L.radial_grid(20.0, n)
            op = L.assemble_radial_sector(0, 3, Vf, grid)
            stk = R.build_continuation("a", op, 2.0 - 0.8j, mu, lam_blocks="kernel")
            std = R.build_continuation("a", op, 2.0 - 0.8j, mu, lam_blocks="discrete")
            lam = 1.7 - 0.35j
            errs[n] = np.linalg.norm(stk.evaluate(lam) - std.evaluate(lam), 2) \
                / np.linalg.norm(std.evaluate(lam), 2)
        assert 3.0 < errs[500] / errs[1000] < 5.0

    def test_kernel_vs_discrete_magnetic_first_order(self, magnetic_1d_sample):
        # the magnetic gradient blocks carry punctured-diagonal quadrature:
        # first-order agreement, documented
        mu = W.ExpWeight(1.0)
        fs = W.FieldSpec(V=lambda x: 0.5 * np.exp(-W.bracket(x)),
                         b=lambda m: 0.4 * np.exp(-W.bracket(np.asarray(m))),
                         tag="exponential", C_bound=10)
        errs = {}
        for n in (200, 400):
            g = L.cartesian_grid(1, 12.0, n)
            op = L.assemble_magnetic(g, fs)
            stk = R.build_continuation("a", op, 1.5 - 0.5j, mu, lam_blocks="kernel")
            std = R.build_continuation("a", op, 1.5 - 0.5j, mu, lam_blocks="discrete")
            lam = 1.2 - 0.3j
            errs[n] = np.linalg.norm(stk.evaluate(lam) - std.evaluate(lam), 2) \
                / np.linalg.norm(std.evaluate(lam), 2)
        assert 1.5 < errs[200] / errs[400] < 4.5

    def test_pole_free_strip_min_sval(self, radial_sample):
        _, op = radial_sample
        mu = W.ExpWeight(2.0)
        st = R.build_continuation("a", op, 2.0 - 0.8j, mu, lam_blocks="kernel")
        for lam in (0.7 + 0.05j, 2.0 + 0.05j, 5.0 + 0.05j):
            assert min_singular_value(st.fredholm_matrix(lam)) > 0.05

    def test_symmetry_of_boundary_values(self, radial_sample):
        # value(-sign) = value(+sign)^* at real lambda as eps -> 0
        _, op = radial_sample
        mu = W.ExpWeight(2.0)
        rng = np.random.default_rng(7)
        u = rng.standard_normal(op.n); v = rng.standard_normal(op.n)
        w = mu.mu(op.grid.axis_coords())
        lam, eps = 2.0, 1e-5
        plus = np.vdot(v, w * R.la_solve(op, lam, eps, +1, w * u))
        minus = np.vdot(v, w * R.la_solve(op, lam, eps, -1, w * u))
        assert abs(minus - np.conj(plus)) < 1e-10 * abs(plus)


class TestPoleScan:
    def test_empty_region(self, radial_sample):
        _, op = radial_sample
        st = R.build_continuation("a", op, 2.0 - 0.5j, W.ExpWeight(2.0),
                                  lam_blocks="discrete")
        pm = R.pole_scan(st, (1.0 - 0.1j, 1.0 - 0.1j), resolution=(0, 0))
        assert pm.candidates == []
        assert pm.min_svals.size == 0

    @pytest.mark.slow
    def test_square_well_bound_state(self, square_well_radial):
        from scipy.optimize import brentq
        _, op = square_well_radial
        V0 = 4.0
        k0 = brentq(lambda k: k / np.tan(k) + np.sqrt(V0 - k * k),
                    np.pi / 2 + 1e-9, np.sqrt(V0) - 1e-9)
        kappa = np.sqrt(V0 - k0**2)
        st = R.build_continuation("a", op, 1.5 - 0.8j, W.ExpWeight(2.0),
                                  lam_blocks="discrete")
        pm = R.pole_scan(st, (-0.15 - 0.85j, 0.15 - 0.45j), resolution=(4, 5))
        assert pm.candidates
        lam_c = min(pm.candidates, key=lambda cv: cv[1])[0]
        assert abs(lam_c - (-1j * kappa)) < 1e-3


class TestDerivativeBounds:
    def test_scalar_closed_form(self):
        table = R.derivative_bounds(lambda z: 1.0 / (z - 1j), 10, 2.0, 0.5)
        for k in range(11):
            exact = abs(math.factorial(k) / (2.0 - 1j) ** (k + 1))
            assert table.norms[k] == pytest.approx(exact, rel=1e-8, abs=1e-12)

    def test_b2_equality_on_extremal_polynomials(self):
        M, sigma, lam0 = 3.7, 0.4, 1.0 + 0.2j
        for k in (1, 3, 6):
            f = lambda z, k=k: M * ((z - lam0) / sigma) ** k
            table = R.derivative_bounds(f, k, lam0, sigma)
            assert table.norms[k] == pytest.approx(
                M * math.factorial(k) / sigma**k, rel=1e-12)

    def test_two_radius_stability_operator(self, radial_sample):
        _, op = radial_sample
        mu = W.ExpWeight(2.0)
        st = R.build_continuation("a", op, 2.0 - 0.8j, mu, lam_blocks="kernel")
        fits = []
        for sigma in (0.25, 0.125):
            t = R.derivative_bounds(lambda z: st.evaluate(z), 4, 2.0, sigma,
                                    n_nodes=24)
            fits.append(t.fitted_C)
        assert abs(fits[0] - fits[1]) / fits[0] < 0.3

    def test_first_derivative_matches_fd(self, radial_sample):
        _, op = radial_sample
        mu = W.ExpWeight(2.0)
        st = R.build_continuation("a", op, 2.0 - 0.8j, mu, lam_blocks="kernel")
        rng = np.random.default_rng(8)
        u = rng.standard_normal(op.n); v = rng.standard_normal(op.n)
        f = lambda z: np.vdot(v, st.evaluate_columns(z, u[:, None])[:, 0])
        table = R.derivative_bounds(f, 1, 2.0, 0.2, n_nodes=32)
        h = 1e-4
        fd = abs((f(2.0 + h) - f(2.0 - h)) / (2 * h))
        assert table.norms[1] == pytest.approx(fd, rel=1e-6)

    def test_pole_guard(self):
        with pytest.raises(PoleInDisc):
            R.derivative_bounds(lambda z: 1.0 / (z - 2.1), 3, 2.0, 0.2,
                                pole_guard=lambda z: abs(z - 2.1),
                                guard_threshold=0.15)
