import numpy as np
import pytest

from decaylab import cutoffs as C, lattice as L, resolvent as R, wavelab as WL, weights as W
from decaylab.errors import PreconditionViolation, SizeExceeded


@pytest.fixture(scope="module")
def free_radial_dec():
    grid = L.radial_grid(25.0, 600)
    return WL.decompose(L.assemble_radial_sector(0, 3, None, grid))


@pytest.fixture(scope="module")
def sample_dec():
    grid = L.radial_grid(25.0, 600)
    op = L.assemble_radial_sector(0, 3, lambda r: np.exp(-2 * W.bracket(r)), grid)
    return WL.decompose(op)


class TestDecompose:
    def test_closed_form_1d_dirichlet_spectrum(self):
        grid = L.cartesian_grid(1, 5.0, 60)
        op = L.assemble_magnetic(grid, W.FieldSpec(
            V=lambda x: np.zeros(np.shape(x)), b=None))
        dec = WL.decompose(op)
        j = np.arange(1, 61)
        expect = (2 - 2 * np.cos(j * np.pi / 61)) / grid.h**2
        assert np.allclose(np.sort(dec.eigenvalues), np.sort(expect), atol=1e-10)

    def test_contracts(self, sample_dec):
        assert sample_dec.residual() < 1e-10
        assert sample_dec.gram_defect() < 1e-12
        assert sample_dec.eigenvalues.min() >= 0.0

    def test_size_guard(self):
        grid = L.radial_grid(5.0, 50)
        op = L.assemble_radial_sector(0, 3, None, grid)
        with pytest.raises(SizeExceeded):
            WL.decompose(op, dense_limit=10)


class TestPropagate:
    def test_initial_conditions(self, sample_dec):
        rng = np.random.default_rng(0)
        f1, f2 = rng.standard_normal((2, sample_dec.op.n))
        u, ut = WL.propagate(sample_dec, f1, f2, 0.0)
        assert np.linalg.norm(u - f1) < 1e-10
        assert np.linalg.norm(ut - f2) < 1e-10

    def test_single_mode(self, sample_dec):
        v = sample_dec.eigenvectors[:, 11]
        u, _ = WL.propagate(sample_dec, v, np.zeros_like(v), 3.7)
        assert np.allclose(u, np.cos(3.7 * sample_dec.omegas[11]) * v, atol=1e-12)

    def test_energy_conservation(self, sample_dec):
        rng = np.random.default_rng(1)
        f1, f2 = rng.standard_normal((2, sample_dec.op.n))
        e0 = WL.energy(sample_dec, *WL.propagate(sample_dec, f1, f2, 0.0))
        for t in (1.0, 17.3, 50.0):
            e = WL.energy(sample_dec, *WL.propagate(sample_dec, f1, f2, t))
            assert abs(e - e0) / e0 < 1e-10

    def test_finite_propagation_speed(self, free_radial_dec):
        grid = free_radial_dec.op.grid
        r = grid.axis_coords()
        bump = np.exp(-((r - 4.0) / 1.0) ** 2)
        t = 8.0
        u, _ = WL.propagate(free_radial_dec, bump, np.zeros_like(bump), t)
        beyond = r > 4.0 + 1.0 + t + 5 * grid.h * t
        assert np.linalg.norm(u[beyond]) < 1e-3 * np.linalg.norm(u)

    def test_huygens_observation_ball(self):
        grid = L.radial_grid(30.0, 1500)
        free_radial_dec = WL.decompose(L.assemble_radial_sector(0, 3, None, grid))
        r = grid.axis_coords()
        bump = np.exp(-1.0 / np.maximum(1 - ((r - 5) / 1.5) ** 2, 1e-12)) \
            * (np.abs(r - 5) < 1.5)
        ball = r <= 8.0
        mu = W.ExpWeight(0.6)
        w = mu.mu(r)
        u0, _ = WL.propagate(free_radial_dec, bump, np.zeros_like(bump), 0.0)
        e0 = np.linalg.norm((w * u0)[ball])
        t_huygens = (5 + 1.5) + 8.0
        u, _ = WL.propagate(free_radial_dec, bump, np.zeros_like(bump),
                            t_huygens + 1.5)
        assert np.linalg.norm((w * u)[ball]) < 1e-4 * e0


class TestDecayExperiment:
    def test_schedule_decay_positive_rate(self, sample_dec):
        mu = W.ExpWeight(0.6)
        tg = np.linspace(2.0, 20.0, 10)
        curve = WL.decay_experiment(sample_dec, mu, "schedule", tg,
                                    probe="random-data", n_data=4).fit(2.0, 20.0)
        assert curve.fit_c1 > 0.1
        assert curve.fit_r2 > 0.98

    def test_operator_norm_probe_records_floor(self, sample_dec):
        # the operator-norm probe saturates at the finite-box spectral floor
        mu = W.ExpWeight(0.6)
        fam = C.build_rho(4, 0.3)
        tg = np.array([4.0, 12.0])
        curve = WL.decay_experiment(sample_dec, mu, fam, tg, probe="operator-norm")
        assert np.all(np.isfinite(curve.quantity))

    def test_no_cutoff_needs_certificate(self, sample_dec):
        mu = W.ExpWeight(0.6)
        with pytest.raises(PreconditionViolation):
            WL.decay_experiment(sample_dec, mu, None, [2.0, 4.0])

    def test_no_cutoff_with_certificate_runs(self):
        grid5 = L.radial_grid(7.0, 400)
        op5 = L.assemble_radial_sector(0, 5, lambda r: np.exp(-W.bracket(r) ** 2), grid5)
        prof = R.low_frequency_sweep(op5, [0.025, 0.05, 0.1], s=1.2, epsilon=1e-5)
        grid = L.radial_grid(25.0, 600)
        dec5 = WL.decompose(L.assemble_radial_sector(
            0, 5, lambda r: np.exp(-W.bracket(r) ** 2), grid))
        curve = WL.decay_experiment(dec5, W.ExpWeight(0.6), None,
                                    np.linspace(2, 16, 8), probe="random-data",
                                    zero_freq_certificate=prof, n_data=4).fit(2, 16)
        assert curve.fit_c1 > 0.0


class TestIdentities:
    def test_duhamel_residual_small(self, sample_dec):
        r = sample_dec.op.grid.axis_coords()
        f = np.exp(-((r - 5) / 1.5) ** 2)
        phi = WL.smooth_switch(1.0)
        res = WL.duhamel_residual(sample_dec, phi, f, np.linspace(0.6, 6.0, 8),
                                  panels=200)
        assert res < 1e-8

    def test_duhamel_zero_data(self, sample_dec):
        phi = WL.smooth_switch(1.0)
        res = WL.duhamel_residual(sample_dec, phi, np.zeros(sample_dec.op.n),
                                  [2.0], panels=50)
        assert res == 0.0

    def test_duhamel_refinement_order(self, sample_dec):
        # coarse panels sit above the floor; halving gains >= 8x (high order)
        r = sample_dec.op.grid.axis_coords()
        f = np.exp(-((r - 5) / 1.5) ** 2)
        phi = WL.smooth_switch(1.0)
        coarse = WL.duhamel_residual(sample_dec, phi, f, [4.0], panels=3,
                                     gl_order=3)
        fine = WL.duhamel_residual(sample_dec, phi, f, [4.0], panels=6,
                                   gl_order=3)
        assert coarse / fine >= 8.0

    def test_fourier_identity(self, sample_dec):
        mu = W.ExpWeight(0.5)
        res0 = WL.fourier_identity_check(sample_dec, mu, None, 0.1, [0.8, 2.0], j=0)
        res1 = WL.fourier_identity_check(sample_dec, mu, None, 0.1, [1.5], j=1)
        assert np.max(res0) < 1e-5
        assert np.max(res1) < 1e-5

    def test_fourier_far_lambda_ratio_guarded(self, sample_dec):
        mu = W.ExpWeight(0.5)
        res = WL.fourier_identity_check(sample_dec, mu, None, 0.4, [60.0], j=0)
        assert np.isfinite(res[0])

    def test_norm_equivalence(self, sample_dec):
        out = WL.norm_equivalence_check(sample_dec)
        assert 0 < out["grad_over_spec"] < 2.0
        assert 0 < out["spec_over_grad"] < 2.0

    def test_short_time_bound(self, sample_dec):
        mu = W.ExpWeight(0.6)
        rng = np.random.default_rng(2)
        out = WL.short_time_bound_check(sample_dec, mu, 1.0, k_trunc=6.0)
        assert out["stability"] < 0.05
        # t = 0 case: || mu_k^{-1} mu f || <= || f ||
        data = rng.standard_normal((sample_dec.op.n, 3))
        data /= np.linalg.norm(data, axis=0)
        w = mu.mu(sample_dec.op.grid.axis_coords())
        assert np.all(np.linalg.norm(w[:, None] * data, axis=0) <= 1.0 + 1e-12)

    def test_energy_identity(self, sample_dec):
        r = sample_dec.op.grid.axis_coords()
        f1 = np.exp(-((r - 6) / 2.0) ** 2)
        f2 = np.exp(-((r - 5) / 1.5) ** 2) * 0.3
        defect = WL.energy_identity_check(sample_dec, W.ExpWeight(0.6), f1, f2)
        # O(dt^2) + O(h) stencil defect
        assert defect < 0.02


class TestIntegratedDecay:
    def test_k0_reduces_to_square_integrability(self, sample_dec):
        fam = C.build_rho(4, 0.3)
        out = WL.integrated_decay_check(sample_dec, W.ExpWeight(0.6), fam, 0,
                                        [2.0, 5.0], T_max=40.0, n_quad=300)
        assert np.all(np.isfinite(out["tails"]))
        assert out["fitted_C"] > 0

    def test_envelope_ratio_nonincreasing(self, sample_dec):
        # monotone envelope approach needs the tail rate ~ c to clear 2k/t
        # inside the window; at desk scale that holds for k = 1 (the k = 2
        # crossover t > 2k/c lies past the reflection-free horizon)
        fam = C.build_rho(4, 0.3)
        rng = np.random.default_rng(11)
        f = WL.spectral_band_data(sample_dec, rng, 1, (0.8, 3.5))[:, 0]
        r = sample_dec.op.grid.axis_coords()
        f = f * 0.5 * (1 - np.tanh((r - 8.0) / 1.0))  # keep reflections out of T_max
        out = WL.integrated_decay_check(sample_dec, W.ExpWeight(1.2), fam, 1,
                                        np.linspace(3, 9, 5), f=f, T_max=22.0,
                                        n_quad=400)
        ratios = out["tails"] / out["envelope"]
        assert np.all(np.diff(ratios) < 0)

    def test_annihilated_data(self, sample_dec):
        fam = C.build_rho(4, 0.3)
        # psi(sqrt(P)) mu f = 0 requires mu f to be a sub-delta spectral
        # vector, i.e. f = mu^{-1} v_0
        mu = W.ExpWeight(0.6)
        w = mu.mu(sample_dec.op.grid.axis_coords())
        assert fam.psi(sample_dec.omegas[0]) == 0.0
        f = sample_dec.eigenvectors[:, 0] / w
        out = WL.integrated_decay_check(sample_dec, mu, fam, 1,
                                        [2.0], f=f, T_max=20.0, n_quad=150)
        assert out["tails"][0] < 1e-20 * np.linalg.norm(f) ** 2


class TestHardy:
    def test_d3_sharp_constant(self):
        out = WL.hardy_check(3, grid=L.radial_grid(40.0, 2500))
        assert out["max_ratio"] <= 2.0 + 0.05

    def test_d5_sharp_constant(self):
        out = WL.hardy_check(5, grid=L.radial_grid(40.0, 2500))
        assert out["max_ratio"] <= 2.0 / 3.0 + 0.05

    def test_magnetic_variant(self):
        out = WL.hardy_check(3, b_radial=lambda m: 0.5 * np.exp(-m),
                             grid=L.radial_grid(40.0, 2500))
        assert out["max_ratio"] <= 2.0 + 0.05

    def test_dimension_guard(self):
        with pytest.raises(PreconditionViolation):
            WL.hardy_check(2)

    def test_exterior_origin_variant(self):
        g3 = L.cartesian_grid(3, 4.0, 15)
        mask = L.disc_obstacle(g3, 1.0)
        val = WL.hardy_exterior_check(g3, mask)
        assert np.isfinite(val) and val > 0

    def test_exterior_needs_origin(self):
        g3 = L.cartesian_grid(3, 4.0, 15)
        mask = L.disc_obstacle(g3, 0.8, center=(2.5, 2.5, 2.5))
        with pytest.raises(PreconditionViolation):
            WL.hardy_exterior_check(g3, mask)

    def test_support_localization_monotone(self):
        # trials supported at distance R0 have ratio ~ 1/R0: decreasing in R0
        grid = L.radial_grid(60.0, 3000)
        r = grid.axis_coords()
        vals = []
        for r0 in (5.0, 10.0, 20.0):
            u = np.exp(-((r - r0) / 1.0) ** 2)
            num = np.linalg.norm(u / r)
            du = np.gradient(u, grid.h)
            vals.append(num / np.linalg.norm(du - u / r))
        assert vals[0] > vals[1] > vals[2]


class TestTimeSteppingOracle:
    def test_leapfrog_cross_check(self, sample_dec):
        """Spectral synthesis against leapfrog time stepping at CFL 0.5."""
        grid = sample_dec.op.grid
        M = sample_dec.op.matrix.real
        r = grid.axis_coords()
        f1 = np.exp(-((r - 6) / 1.5) ** 2)
        dt = 0.5 * grid.h
        t_end = 4.0
        steps = int(round(t_end / dt))
        dt = t_end / steps
        u_prev = f1.copy()
        u = f1 - 0.5 * dt**2 * (M @ f1)   # Taylor start, zero velocity
        for _ in range(steps - 1):
            u, u_prev = 2 * u - u_prev - dt**2 * (M @ u), u
        u_spec, _ = WL.propagate(sample_dec, f1, np.zeros_like(f1), t_end)
        err = np.linalg.norm(u - u_spec) / np.linalg.norm(u_spec)
        assert err < 5e-3  # O(dt^2) time-stepping error vs exact synthesis


class TestDecayMonotonicity:
    def test_sharper_cutoff_never_worsens_rate(self, sample_dec):
        """Increasing m must not lower the fitted rate beyond the fit CI."""
        mu = W.ExpWeight(0.6)
        tg = np.linspace(2.0, 20.0, 10)
        fits = {}
        for m in (4, 8):
            fam = C.build_rho(m, 0.3)
            cur = WL.decay_experiment(sample_dec, mu, fam, tg,
                                      probe="random-data", n_data=6).fit(2, 20)
            fits[m] = (cur.fit_c1, cur.fit_ci)
        assert fits[8][0] >= fits[4][0] - (fits[4][1] + fits[8][1])
