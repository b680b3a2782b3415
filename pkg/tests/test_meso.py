import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.special import roots_legendre

from pairsed.densities import UniformBall
from pairsed.errors import BlowUpError, DomainExitError, InvalidSpecError, NonConvergenceError
from pairsed.kernels import oseen_tensor
from pairsed.meso import (BlobSpec, Ensemble, FField, Physics, blob_oseen, continuous_K,
                          continuous_K_gradient, default_blob, grid_gradient, linear_flow,
                          picard_solve_F, quadrature_ensemble, sample_density,
                          step_meso_correlated, step_meso_kinetic, support_diameter)
from pairsed.metrics import fit_slope
from pairsed.pair_hydro import settling_velocity

g = np.array([0.0, 0.0, -1.0])
PHYS = Physics(0.1, tuple(g))
BALL = 'uniform_ball radius=1'
G_LIN = np.array([[0, 0.3, 0], [-0.2, 0, 0.1], [0, 0.05, 0]])


def identity_settling(F):
    return np.broadcast_to(g, F.shape)


def zero_flow(x):
    x = np.asarray(x).reshape(-1, 3)
    return np.zeros_like(x), np.zeros((x.shape[0], 3, 3))


def ball_center_oracle(r0, kappa_g, n=128):
    """6 pi r0 int Phi(-y) kappa_g rho(dy) for the unit uniform ball, by
    Gauss-Legendre in (r, cos theta, phi) on an n^3 tensor grid."""
    t, w = roots_legendre(n)
    r, wr = 0.5 * (t + 1), 0.5 * w
    c, wc = t, w
    p, wp = np.pi * (t + 1), np.pi * w
    R, C, P = np.meshgrid(r, c, p, indexing='ij')
    W = (wr[:, None, None] * wc[None, :, None] * wp[None, None, :]) * R**2
    S = np.sqrt(1 - C**2)
    y = np.stack([R * S * np.cos(P), R * S * np.sin(P), R * C], -1).reshape(-1, 3)
    phi = oseen_tensor(-y)
    rho = 3.0 / (4.0 * np.pi)
    return 6 * np.pi * r0 * rho * np.einsum('k,kab,b->a', W.ravel(), phi, kappa_g)


class TestBlob:
    def test_blob_spec(self):
        with pytest.raises(InvalidSpecError):
            BlobSpec(0.0)

    def test_far_field_consistency(self):
        ens = Ensemble(np.zeros((1, 3)), [1.0])
        d = 1e-2
        x = np.array([1.0, -2.0, 0.5])
        exact = 6 * np.pi * PHYS.r0 * oseen_tensor(x) @ g
        rel = np.abs(continuous_K(ens, x, BlobSpec(d), PHYS) - exact).max() / np.abs(exact).max()
        assert rel < 2 * d**2 / np.sum(x * x)

    def test_value_at_particle(self):
        ens = Ensemble(np.zeros((1, 3)), [1.0])
        vals = [np.linalg.norm(continuous_K(ens, np.zeros(3), BlobSpec(d), PHYS))
                for d in (0.1, 0.05)]
        assert np.isfinite(vals).all()
        assert vals[1] / vals[0] == pytest.approx(2.0, rel=1e-12)

    def test_blob_oseen_reduces_to_oseen(self):
        x = np.array([0.3, -0.4, 1.2])
        np.testing.assert_allclose(blob_oseen(x, 1e-9), oseen_tensor(x), rtol=1e-12)

    def test_quadrature_oracle_closed_form(self):
        np.testing.assert_allclose(ball_center_oracle(0.1, g), 1.5 * 0.1 * g, atol=1e-12)

    def test_uniform_ball_center_within_one_percent(self):
        ref = ball_center_oracle(0.1, g)
        for seed in range(5):
            ens = sample_density(BALL, 10_000, seed)
            u = continuous_K(ens, np.zeros(3), BlobSpec(0.02), PHYS)
            assert np.linalg.norm(u - ref) < 0.01 * np.linalg.norm(ref)

    def test_errors_decrease_in_delta_and_M(self):
        pts = np.array([[0, 0, 0], [0.3, 0.2, -0.1], [0.5, 0, 0]])
        exact = UniformBall(1.0).exact_K(pts, 0.1, g)[0]

        def rms(M, d, seeds=6):
            e = [np.abs(continuous_K(sample_density(BALL, M, s), pts, BlobSpec(d), PHYS)
                        - exact).max() for s in range(seeds)]
            return np.sqrt(np.mean(np.square(e)))

        by_delta = [rms(100_000, d, 2) for d in (0.4, 0.2, 0.1, 0.05)]
        by_M = [rms(M, 0.01) for M in (1000, 10_000, 100_000)]
        assert np.all(np.diff(by_delta) < 0)
        assert np.all(np.diff(by_M) < 0)

    def test_gradient_matches_fd(self):
        ens = sample_density(BALL, 200, 0)
        b = BlobSpec(0.1)
        x = np.array([0.2, -0.1, 0.3])
        h = 1e-5
        fd = np.stack([(continuous_K(ens, x + h * e, b, PHYS) - continuous_K(ens, x - h * e, b, PHYS))
                       / (2 * h) for e in np.eye(3)], axis=1)
        np.testing.assert_allclose(continuous_K_gradient(ens, x, b, PHYS), fd, atol=1e-7)

    def test_default_blob_scales_with_spacing(self):
        a = default_blob(sample_density(BALL, 1000, 0)).delta
        b = default_blob(sample_density(BALL, 8000, 0)).delta
        assert a / b == pytest.approx(2.0, rel=0.05)


class TestSampling:
    def test_mean_bound(self):
        M = 2000
        ok = sum(np.linalg.norm(sample_density(BALL, M, s).x.mean(0)) < 3 / np.sqrt(M)
                 for s in range(100))
        assert ok >= 99

    def test_single_and_deterministic(self):
        e = sample_density(BALL, 1, 3)
        assert e.M == 1 and e.weights[0] == 1.0
        a, b = sample_density(BALL, 50, 7), sample_density(BALL, 50, 7)
        assert a.x.tobytes() == b.x.tobytes()

    def test_errors(self):
        with pytest.raises(InvalidSpecError):
            sample_density(BALL, 0, 0)
        with pytest.raises(InvalidSpecError):
            sample_density('moon radius=1', 10, 0)

    def test_quadrature_mass(self):
        ens, h = quadrature_ensemble(BALL, 16)
        assert ens.weights.sum() == pytest.approx(1.0, rel=1e-12)
        assert h == pytest.approx(2.0 / 16, rel=1e-12)


class TestKinetic:
    def test_no_gravity_static(self):
        ens = sample_density(BALL, 30, 0)
        ens.xi = np.tile([0, 0, 2.0], (30, 1))
        new = step_meso_kinetic(ens, 0.1, BlobSpec(0.2), Physics(0.1, (0, 0, 0)))
        np.testing.assert_array_equal(new.x, ens.x)
        np.testing.assert_array_equal(new.xi, ens.xi)

    def test_single_particle_settles(self):
        xi = np.array([[0.5, 0.0, 2.0]])
        ens = Ensemble(np.zeros((1, 3)), [1.0], xi)
        e = ens
        for _ in range(4):
            e = step_meso_kinetic(e, 0.25, BlobSpec(0.1), PHYS)
        # the self-interaction of a smooth blob is a uniform drift
        self_u = continuous_K(ens, np.zeros(3), BlobSpec(0.1), PHYS)
        np.testing.assert_allclose(e.x[0], settling_velocity(xi[0], g) + self_u, rtol=1e-13)
        np.testing.assert_allclose(e.xi, xi, atol=1e-15)

    def test_linear_ambient_rk4_order(self):
        amb = lambda x: (x @ G_LIN.T, np.broadcast_to(G_LIN, (x.shape[0], 3, 3)))
        ens = Ensemble(np.zeros((1, 3)), [1.0], [[2.0, 0, 0]])
        ref = expm(G_LIN) @ [2.0, 0, 0]
        dts = np.array([0.2, 0.1, 0.05])
        errs = []
        for dt in dts:
            e = ens
            for _ in range(int(round(1 / dt))):
                e = step_meso_kinetic(e, dt, BlobSpec(1.0), PHYS, ambient=amb)
            errs.append(np.abs(e.xi[0] - ref).max())
        assert fit_slope(dts, errs) == pytest.approx(4.0, abs=0.25)

    def test_mass_conserved(self):
        ens = sample_density(BALL, 100, 1)
        ens.xi = np.tile([0, 1.0, 1.5], (100, 1))
        w = ens.weights.copy()
        for _ in range(5):
            ens = step_meso_kinetic(ens, 0.1, BlobSpec(0.2), PHYS)
        np.testing.assert_array_equal(ens.weights, w)
        assert ens.weights.sum() == pytest.approx(1.0, abs=1e-14)

    def test_blow_up(self):
        ens = Ensemble(np.zeros((1, 3)), [1.0], [[0, 0, 2.0]])
        amb = lambda x: (np.full_like(x, np.inf), np.zeros((x.shape[0], 3, 3)))
        with pytest.raises(BlowUpError):
            step_meso_kinetic(ens, 0.1, BlobSpec(0.1), PHYS, ambient=amb)

    def test_needs_orientations(self):
        with pytest.raises(InvalidSpecError):
            step_meso_kinetic(sample_density(BALL, 5, 0), 0.1, BlobSpec(0.1), PHYS)

    def test_support_growth_bounded(self):
        ens = sample_density(BALL, 300, 2)
        ens.xi = np.tile([0, 1.0, 1.5], (300, 1))
        d0 = support_diameter(ens)
        for _ in range(10):
            ens = step_meso_kinetic(ens, 0.1, BlobSpec(0.2), PHYS)
        assert 0.5 * d0 <= support_diameter(ens) <= 3.0 * d0


class TestFField:
    def test_trilinear_exact_for_affine(self):
        fn = lambda x: x @ np.array([[1.0, 2, 0], [0, 1, 0], [3, 0, 1]]).T + [1.0, 0, 2]
        F = FField.from_function(fn, (-1, -1, -1), (1, 1, 1), 5)
        p = np.random.default_rng(0).uniform(-1, 1, (20, 3))
        np.testing.assert_allclose(F(p), fn(p), atol=1e-13)
        np.testing.assert_allclose(grid_gradient(F)[2, 2, 2], [[1, 2, 0], [0, 1, 0], [3, 0, 1]],
                                   atol=1e-12)

    def test_domain_exit(self):
        F = FField.from_function(lambda x: x, (-1, -1, -1), (1, 1, 1), 5)
        with pytest.raises(DomainExitError):
            F(np.array([[2.0, 0, 0]]))
        np.testing.assert_allclose(F(np.array([[2.0, 0, 0]]), clamp=True), [[1.0, 0, 0]])


def rigid_transport_error(n, order_interp, nsteps=4, T=0.37):
    fn = lambda x: np.stack([np.sin(x[..., 0]) + 2, np.cos(x[..., 1]), np.sin(x[..., 2])], -1)
    # generous inflow margin: clamped feet at the top face pollute the cubic spline
    F = FField.from_function(fn, (-3, -3, -3), (3, 3, 3), n, order=order_interp)
    ens = Ensemble(np.zeros((1, 3)), [1.0])
    for _ in range(nsteps):
        ens, F = step_meso_correlated(ens, F, T / nsteps, BlobSpec(0.1), PHYS,
                                      settling=identity_settling, ambient=zero_flow)
    p = np.random.default_rng(1).uniform(-1, 1, (30, 3))
    return np.abs(F(p) - fn(p - T * g)).max(), ens


class TestCorrelated:
    def test_rigid_translation_interpolation_order(self):
        ns = [13, 25, 49]
        hs = np.array([6.0 / (n - 1) for n in ns])
        lin = [rigid_transport_error(n, 1)[0] for n in ns]
        cub = [rigid_transport_error(n, 3)[0] for n in ns]
        assert fit_slope(hs, lin) == pytest.approx(2.0, abs=0.25)
        assert fit_slope(hs, cub) >= 3.5
        _, ens = rigid_transport_error(13, 1)
        np.testing.assert_allclose(ens.x[0], 0.37 * g, atol=1e-14)

    def test_constant_F_stays_constant(self):
        F = FField.from_function(lambda x: np.broadcast_to([0.3, 0.0, 2.0], x.shape),
                                 (-2, -2, -3), (2, 2, 1), 9)
        ens = sample_density(BALL, 20, 0)
        for _ in range(3):
            ens, F = step_meso_correlated(ens, F, 0.1, BlobSpec(0.3), PHYS, ambient=zero_flow)
        np.testing.assert_allclose(F.values, np.broadcast_to([0.3, 0, 2.0], F.values.shape),
                                   atol=1e-14)

    def test_domain_exit(self):
        F = FField.from_function(lambda x: np.broadcast_to([0, 0, 2.0], x.shape),
                                 (-1.5, -1.5, -1.5), (1.5, 1.5, 1.5), 7)
        ens = Ensemble([[0, 0, -1.4]], [1.0])
        with pytest.raises(DomainExitError):
            step_meso_correlated(ens, F, 0.5, BlobSpec(0.3), PHYS)

    @pytest.mark.parametrize('order', [1, 2])
    def test_manufactured_linear_flow(self, order):
        """u = G x: the grid F follows the characteristic oracle at the design order."""
        def fn(x):
            return np.stack([2 + 0.3 * x[..., 0] + 0.1 * x[..., 2], 0.2 * x[..., 1] + 0.5,
                             1.5 + 0.1 * x[..., 0]], -1)
        T = 0.5
        probe = np.array([[0.3, -0.2, -0.4], [0.1, 0.5, 0.2], [-0.5, 0.0, -1.0]])
        ref = manufactured_oracle(fn, G_LIN, g, T, probe)
        amb = lambda x: (x @ G_LIN.T, np.broadcast_to(G_LIN, (x.shape[0], 3, 3)))
        dts, errs = [], []
        for nsteps in (4, 8, 16):
            F = FField.from_function(fn, (-5, -5, -6), (5, 5, 4), 21)
            ens = Ensemble([[0.0, 0, 0]], [1.0])
            for _ in range(nsteps):
                ens, F = step_meso_correlated(ens, F, T / nsteps, BlobSpec(0.1), PHYS, order=order,
                                              settling=identity_settling, ambient=amb)
            dts.append(T / nsteps)
            errs.append(np.abs(F(probe) - ref).max())
        assert fit_slope(dts, errs) == pytest.approx(order, abs=0.25)

    def test_kinetic_consistency(self):
        """xi_i(0) = F0(x_i): the kinetic xi tracks the grid F pulled back to particles."""
        fn = lambda x: np.stack([2 + 0.2 * x[..., 1], 0.3 * x[..., 0], 1.5 + 0.1 * x[..., 2]], -1)
        F = FField.from_function(fn, (-2.5, -2.5, -3.5), (2.5, 2.5, 1.5), 41)
        ens = sample_density(BALL, 400, 0)
        kin = Ensemble(ens.x, ens.weights, fn(ens.x))
        blob = BlobSpec(0.3)
        for _ in range(5):
            ens, F = step_meso_correlated(ens, F, 0.05, blob, PHYS, order=2)
            kin = step_meso_kinetic(kin, 0.05, blob, PHYS)
        assert np.abs(ens.x - kin.x).max() < 1e-3
        assert np.abs(F(kin.x) - kin.xi).max() < 1e-3


def manufactured_oracle(fn, G, kappa, T, x):
    """F(T, x) = exp(T G) F0(X0) with X0 the foot of x under dX/dt = kappa + G X."""
    aug = np.zeros((4, 4))
    aug[:3, :3], aug[:3, 3] = G, kappa
    b = expm(T * aug)[:3, 3]
    x0 = (x - b) @ np.linalg.inv(expm(T * G)).T
    return fn(x0) @ expm(T * G).T


def affine_F0(lo=(-2, -2, -4), hi=(2, 2, 1), n=17):
    fn = lambda x: np.stack([2 + 0 * x[..., 0], 0.5 + 0.2 * x[..., 1], 1.5 + 0.3 * x[..., 0]], -1)
    return FField.from_function(fn, lo, hi, n)


class TestPicard:
    def test_one_iteration_when_coefficient_fixed(self):
        F0 = FField.from_function(lambda x: np.stack([2 + 0.1 * x[..., 2], 0.5 + 0.2 * x[..., 1],
                                                      1.5 + 0.3 * x[..., 0]], -1),
                                  (-2, -2, -4), (2, 2, 1), 17)
        zero = lambda t: (lambda x: np.zeros_like(np.asarray(x).reshape(-1, 3)),
                          lambda x: np.zeros((np.asarray(x).reshape(-1, 3).shape[0], 3, 3)))
        r = picard_solve_F(zero, F0, 0.3, 4, PHYS, settling=identity_settling)
        # first sweep produces the answer, the second confirms a zero increment
        assert r.converged and r.increments[-1] == 0.0 and len(r.increments) == 2

    def test_contraction_scales_with_T(self):
        ratio = {}
        for T in (0.4, 0.2, 0.1):
            r = picard_solve_F(linear_flow(G_LIN), affine_F0(), T, 8, PHYS)
            assert r.converged
            ratio[T] = np.median(r.ratios[:4])
        assert ratio[0.2] / ratio[0.4] == pytest.approx(0.5, abs=0.1)
        assert ratio[0.1] / ratio[0.2] == pytest.approx(0.5, abs=0.1)
        assert ratio[0.4] < 0.2

    def test_fixed_point_stable(self):
        F0 = affine_F0()
        tol = 1e-10
        r = picard_solve_F(linear_flow(G_LIN), F0, 0.3, 6, PHYS, tol=tol)
        again = picard_solve_F(linear_flow(G_LIN), F0, 0.3, 6, PHYS, tol=tol, initial=r.levels)
        assert len(again.increments) == 1 and again.increments[0] < tol
        np.testing.assert_allclose(again.levels[-1], r.levels[-1], atol=tol)

    @pytest.mark.parametrize('order', [1, 2])
    def test_picard_design_order(self, order):
        def fn(x):
            return np.stack([2 + 0.3 * x[..., 0] + 0.1 * x[..., 2], 0.2 * x[..., 1] + 0.5,
                             1.5 + 0.1 * x[..., 0]], -1)
        T = 0.5
        F0 = FField.from_function(fn, (-5, -5, -6), (5, 5, 4), 41)
        probe = np.array([[0.3, -0.2, -0.4], [0.1, 0.5, 0.2], [-0.5, 0.0, -1.0]])
        ref = manufactured_oracle(fn, G_LIN, g, T, probe)
        ns = np.array([4, 8, 16, 32])
        errs = []
        for n in ns:
            r = picard_solve_F(linear_flow(G_LIN), F0, T, int(n), PHYS, order=order,
                               settling=identity_settling)
            errs.append(np.abs(r.field_at(F0)(probe) - ref).max())
        assert fit_slope(T / ns, errs) == pytest.approx(order, abs=0.25)

    def test_pde_residual(self):
        """Finite-difference residual of dF/dt + v . grad F - grad u F at the fixed point."""
        F0 = affine_F0(n=33)
        T, n = 0.2, 16
        res = {}
        for nsteps in (n, 2 * n):  # time error is far below the spatial truncation here
            r = picard_solve_F(linear_flow(G_LIN), F0, T, nsteps, PHYS, order=2)
            k = nsteps // 2
            dt = T / nsteps
            Fk = r.field_at(F0, k)
            dFdt = (r.levels[k + 1] - r.levels[k - 1]) / (2 * dt)
            nodes = Fk.nodes()
            v = settling_velocity(Fk.values, g) + nodes @ G_LIN.T
            resid = dFdt + np.einsum('...b,...ab->...a', v, grid_gradient(Fk)) \
                - Fk.values @ G_LIN.T
            inner = (slice(8, 25),) * 3
            res[nsteps] = np.abs(resid[inner]).max() / np.abs(dFdt[inner]).max()
        assert max(res.values()) < 1e-3

    def test_stall_raises(self):
        with pytest.raises(NonConvergenceError) as err:
            picard_solve_F(linear_flow(50 * G_LIN), affine_F0(), 2.0, 4, PHYS, max_iter=6)
        assert err.value.history

    def test_bad_args(self):
        with pytest.raises(InvalidSpecError):
            picard_solve_F(linear_flow(G_LIN), affine_F0(), 0.0, 4, PHYS)
