import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pairsed.errors import InvalidSpecError, NearFieldError, NonConvergenceError, OverlapError
from pairsed.kernels import oseen_tensor
from pairsed.metrics import fit_slope, min_distance
from pairsed.pair_hydro import mobility_pair, settling_velocity
from pairsed.reflections import (Cloud, ambient_field, contraction_ratio, force_residual,
                                 isolated_velocities, reflect_step, solve_reflections)

from helpers import G, ball_cloud, stacked_pairs


def grand_mobility_velocities(cloud):
    """Oracle: U = M (-F) with the 6N x 6N grand mobility assembled block by block
    (pair self blocks from the mobility matrices, cross blocks -Phi(x+^j - x_alpha^i)),
    and the forces F = -mg on every sphere."""
    n, R = cloud.N, cloud.R
    M = np.zeros((6 * n, 6 * n))
    sph = np.concatenate([cloud.x1, cloud.x2])
    owner = np.concatenate([np.arange(n), np.arange(n)])
    for i in range(n):
        m = mobility_pair(cloud.xi[i])
        for a, b, blk in ((0, 0, m.a1), (0, 1, m.a2), (1, 0, m.a2), (1, 1, m.a1)):
            ra, rb = (a * n + i) * 3, (b * n + i) * 3
            M[ra:ra + 3, rb:rb + 3] = -blk / (6 * np.pi * R)
    for t in range(2 * n):
        for s in range(2 * n):
            if owner[t] == owner[s]:
                continue
            M[3 * t:3 * t + 3, 3 * s:3 * s + 3] = -oseen_tensor(cloud.x_plus[owner[s]] - sph[t])
    F = np.tile(-cloud.mg, 2 * n)
    U = (M @ F).reshape(2 * n, 3)
    return U[:n], U[n:]


class TestCloud:
    def test_radius_and_weight(self):
        c = stacked_pairs(r0=0.2)
        assert c.R == 0.2 / 4
        np.testing.assert_allclose(c.mg, 6 * np.pi * c.R * G)

    def test_validation(self):
        x = np.zeros((1, 3))
        with pytest.raises(InvalidSpecError):
            Cloud(x, [[0, 0, 2.0]], 0.0, G)
        with pytest.raises(InvalidSpecError):
            Cloud(x, [[0, 0, 2.0]], 0.1, G, M1=1.1, M2=1.2)
        with pytest.raises(OverlapError):
            Cloud(x, [[0, 0, 0.5]], 0.1, G)


class TestReflectStep:
    def test_single_pair(self):
        c = Cloud(np.zeros((1, 3)), [[0, 0, 2.0]], 0.1, G)
        V1, V2 = reflect_step(c, [[1.0, 2, 3]], [[0.5, 0, 1]])
        assert np.all(V1 == 0) and np.all(V2 == 0)

    def test_zero_partner(self):
        c = stacked_pairs(r0=0.05)
        V1, V2 = reflect_step(c, [[1.0, 0, 0], [0, 0, 0]], [[1.0, 0, 0], [0, 0, 0]])
        assert np.all(V1[0] == 0) and np.all(V2[0] == 0)
        assert np.linalg.norm(V1[1]) > 0

    def test_distant_pairs_bound(self):
        R = 0.01 / 4
        d = 1e3 * R
        c = Cloud([[0, 0, 0], [d, 0, 0]], [[0, 0, 2.0], [0, 1.5, 0]], 0.01, G)
        V = np.array([[0.3, -0.2, 1.0], [0.0, 0.0, 0.0]])
        V1, V2 = reflect_step(c, V, V)
        # two drags of size <= 6 pi R |V| through |Phi| <= 1/(4 pi r): C = 3
        bound = 3.0 * R / (d - 2 * R * 2.0) * np.abs(V).max() * np.sqrt(3)
        assert np.abs(np.concatenate([V1[1], V2[1]])).max() <= bound

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidSpecError):
            reflect_step(stacked_pairs(), [[np.nan, 0, 0], [0, 0, 0]], np.zeros((2, 3)))

    def test_near_field_error(self):
        c = Cloud([[0, 0, 0], [0, 0, 0.01]], [[0, 0, 2.0], [0, 0, 2.0]], 0.1, G)
        with pytest.raises(NearFieldError):
            reflect_step(c, np.ones((2, 3)), np.ones((2, 3)))

    def test_counter_translation_decays_as_inverse_square(self):
        ds = np.array([0.2, 0.4, 0.8, 1.6])
        W = np.array([0.2, 0.5, -1.0])
        mags = []
        for d in ds:
            c = Cloud([[0, 0, 0], [d, 0.3 * d, 0]], [[0, 1.5, 1.5], [2.0, 0, 0]], 0.02, G)
            V1, V2 = reflect_step(c, [W, np.zeros(3)], [-W, np.zeros(3)], 'two_stokeslet')
            mags.append(max(np.linalg.norm(V1[1]), np.linalg.norm(V2[1])))
        assert fit_slope(ds, mags) == pytest.approx(-2.0, abs=0.1)

    def test_co_translation_decays_as_inverse(self):
        ds = np.array([0.2, 0.4, 0.8, 1.6])
        W = np.array([0.2, 0.5, -1.0])
        mags = []
        for d in ds:
            c = Cloud([[0, 0, 0], [d, 0.3 * d, 0]], [[0, 1.5, 1.5], [2.0, 0, 0]], 0.02, G)
            V1, V2 = reflect_step(c, [W, np.zeros(3)], [W, np.zeros(3)])
            mags.append(np.linalg.norm(V1[1]))
        assert fit_slope(ds, mags) == pytest.approx(-1.0, abs=0.05)


class TestSolve:
    def test_single_pair_exact(self):
        c = Cloud(np.zeros((1, 3)), [[0.3, 0, 2.0]], 0.1, G)
        sol = solve_reflections(c)
        np.testing.assert_array_equal(sol.U1[0], settling_velocity(c.xi[0], G))
        np.testing.assert_array_equal(sol.U2[0], sol.U1[0])
        assert sol.iterations == 0 and sol.ratios == [] and sol.converged

    def test_stacked_pairs_match_grand_mobility_oracle(self):
        c = stacked_pairs(sep=0.5, r0=0.05)
        sol = solve_reflections(c)
        U1, U2 = grand_mobility_velocities(c)
        np.testing.assert_allclose(sol.U1, U1, rtol=1e-12)
        np.testing.assert_allclose(sol.U2, U2, rtol=1e-12)
        iso = -isolated_velocities(c)[:, 2]
        assert np.all(-sol.U_plus[:, 2] > iso)

    @pytest.mark.parametrize('seed', [0, 1])
    def test_random_cloud_matches_oracle(self, seed):
        c = ball_cloud(24, seed)
        sol = solve_reflections(c)
        U1, U2 = grand_mobility_velocities(c)
        np.testing.assert_allclose(sol.U1, U1, rtol=1e-10, atol=1e-13)
        np.testing.assert_allclose(sol.U2, U2, rtol=1e-10, atol=1e-13)

    def test_dilute_ratios_below_half(self):
        sol = solve_reflections(ball_cloud(256, 3))
        assert sol.converged and max(sol.ratios) < 0.5
        assert contraction_ratio(sol) < 0.5

    def test_force_consistency(self):
        tol = 1e-10
        c = ball_cloud(128, 5)
        sol = solve_reflections(c, tol=tol)
        assert sol.force_residual <= 10 * tol
        res = force_residual(c, sol.U1, sol.U2, sol.W1, sol.W2)
        assert res == sol.force_residual

    def test_geometric_fit_matches_ratio(self):
        sol = solve_reflections(ball_cloud(128, 2))
        inc = np.asarray(sol.increments)
        k = np.arange(inc.size)
        fitted = np.exp(np.polyfit(k, np.log(inc), 1)[0])
        assert fitted == pytest.approx(contraction_ratio(sol), rel=0.1)

    def test_mirror_symmetry(self):
        rng = np.random.default_rng(4)
        half = rng.uniform([0.1, -1, -1], [1, 1, 1], (10, 3))
        xi = rng.normal(size=(10, 3))
        xi *= 2.0 / np.linalg.norm(xi, axis=1)[:, None]
        S = np.diag([-1.0, 1, 1])
        c = Cloud(np.vstack([half, half @ S]), np.vstack([xi, xi @ S]), 0.02, G)
        sol = solve_reflections(c)
        np.testing.assert_allclose(sol.U1[10:], sol.U1[:10] @ S, atol=1e-10)
        np.testing.assert_allclose(sol.U2[10:], sol.U2[:10] @ S, atol=1e-10)

    def test_non_convergence(self):
        # dense lattice just outside the near-field zone: the series diverges
        k = np.arange(5.0)
        x = np.stack(np.meshgrid(k, k, k), -1).reshape(-1, 3)
        c = Cloud(x, np.tile([0, 0, 1.3], (len(x), 1)), 2 * len(x) * 0.15, G, M1=1.2, M2=1.01)
        with pytest.raises(NonConvergenceError) as err:
            solve_reflections(c)
        assert err.value.history

    def test_max_iter(self):
        with pytest.raises(NonConvergenceError):
            solve_reflections(ball_cloud(64, 0), tol=1e-300, max_iter=2)

    def test_bad_tol(self):
        with pytest.raises(InvalidSpecError):
            solve_reflections(stacked_pairs(), tol=0.0)

    def test_two_stokeslet_refinement_close(self):
        c = ball_cloud(64, 1)
        a = solve_reflections(c)
        b = solve_reflections(c, refinement='two_stokeslet')
        assert np.abs(a.U_plus - b.U_plus).max() < 1e-3 * np.abs(a.U_plus).max()


class TestAmbient:
    def test_exclude_only_pair(self):
        c = Cloud(np.zeros((1, 3)), [[0, 0, 2.0]], 0.1, G)
        u = ambient_field(c, [[0, 0, 1.0]], [[0, 0, 1.0]], np.array([1.0, 0, 0]), exclude=0)
        assert np.all(u == 0)

    def test_far_field_slope_and_linearity(self):
        c = ball_cloud(16, 0)
        sol = solve_reflections(c)
        d = np.array([0.6, 0.0, 0.8])
        rs = np.array([10.0, 20.0, 40.0, 80.0])
        mags = [np.linalg.norm(ambient_field(c, sol.F1, sol.F2, r * d)) for r in rs]
        assert fit_slope(rs, mags) == pytest.approx(-1.0, abs=0.05)
        x = np.array([3.0, 1.0, -2.0])
        np.testing.assert_allclose(ambient_field(c, 2 * sol.F1, 2 * sol.F2, x),
                                   2 * ambient_field(c, sol.F1, sol.F2, x), rtol=1e-14)


class TestContractionRatio:
    def test_geometric_sequence(self):
        assert contraction_ratio(0.3 ** np.arange(6)) == pytest.approx(0.3, rel=1e-12)

    def test_needs_history(self):
        with pytest.raises(InvalidSpecError):
            contraction_ratio([1.0])

    @given(st.integers(0, 50))
    def test_dilute_random_cloud(self, seed):
        c = ball_cloud(48, seed, dilution=0.05)
        assert contraction_ratio(solve_reflections(c)) < 0.5
