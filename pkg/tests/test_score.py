import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prte_dml.dgp import generate_sample
from prte_dml.estimator import EstimationConfig, fit_crossfit
from prte_dml.kernel_smoothing import central_difference
from prte_dml.nuisance import Dataset, NuisanceSet, ProportionalShift, ZShift
from prte_dml.score import (
    IdentificationError,
    ThetaEstimate,
    d_transform,
    lambda_gradient,
    lambda_map,
    m_hat_matrix,
    numeric_jacobian_d,
    residual_u,
    sandwich_variance,
    score_decomposed,
    score_m1,
    score_m2,
    score_m3,
    score_rows,
    theta_dims,
)

from oracles import (  # noqa: E402
    analytic_jacobian,
    random_data,
    random_nuisance,
    random_spd,
    random_theta,
    reassembly_error,
    theta1_from,
)

seeds = st.integers(0, 2**32 - 1)


# one-observation fixture for hand calculations: p = 1, x = 2, y = 3, s = 1
HAND = Dataset(y=[3.0], s=[1.0], x=[[2.0]], z=[[0.0]])
HAND_THETA = ThetaEstimate(theta1_from(np.eye(2), [0.5, 1.0]), [0.1, 0.2], 0.1)


def hand_nuisance(zeta=None):
    return NuisanceSet(
        propensity=lambda z: 0.25 + 0.1 * np.atleast_2d(z)[:, 0],
        cond_means=lambda q: (np.full((np.size(q), 1), 1.0), np.full((np.size(q), 1), 0.5),
                              np.full(np.size(q), 1.0)),
        zeta_hat=(lambda z: np.arange(1.0, 7.0)[None, :]) if zeta is None else zeta,
        density_ratio=lambda z: np.array([2.0]),
        g_u_given_p=lambda q: np.asarray(q, float) ** 2,
        delta_u_given_p=lambda q: 2 * np.asarray(q, float),
        z_density_ratio=lambda z: np.array([1.5]),
        kappa=lambda z: np.array([[2.0, 3.0]]))


class TestDTransform:
    def test_identity(self):
        np.testing.assert_array_equal(d_transform(theta1_from(np.eye(4), [1, 2, 3, 4])), [1, 2, 3, 4])

    def test_scaled_identity(self):
        np.testing.assert_allclose(d_transform(theta1_from(2 * np.eye(4), [2, 4, 6, 8])), [1, 2, 3, 4])

    @given(seeds)
    def test_matches_least_squares(self, seed):
        rng = np.random.default_rng(seed)
        b, a = random_spd(rng, 4), rng.normal(size=4)
        ref = np.linalg.lstsq(b, a, rcond=None)[0]
        assert np.max(np.abs(d_transform(theta1_from(b, a)) - ref)) <= 1e-10

    @given(seeds)
    def test_solves_moment_equation(self, seed):
        rng = np.random.default_rng(seed)
        b, a = random_spd(rng, 4), rng.normal(size=4)
        assert np.max(np.abs(b @ d_transform(theta1_from(b, a)) - a)) < 1e-10

    def test_singular_rejected(self):
        with pytest.raises(IdentificationError):
            d_transform(theta1_from(np.diag([1.0, 1.0, 1.0, 0.0]), np.ones(4)))

    def test_bad_length_rejected(self):
        with pytest.raises(ValueError):
            d_transform(np.ones(7))


class TestThetaEstimate:
    def test_dims(self):
        assert sum(theta_dims(2)) == 25

    def test_vector_round_trip(self):
        th = random_theta(np.random.default_rng(0))
        back = ThetaEstimate.from_vector(th.as_vector(), 2)
        np.testing.assert_array_equal(back.as_vector(), th.as_vector())


class TestLambdaMap:
    def test_only_third_block(self):
        th = ThetaEstimate(theta1_from(np.eye(4), [1, 2, 3, 4]), np.zeros(4), 0.7)
        assert lambda_map(th) == 0.7

    def test_symmetric_cancellation(self):
        th = ThetaEstimate(theta1_from(np.eye(4), [1, 2, 1, 2]), [3, 5, 3, 5], -0.4)
        assert lambda_map(th) == -0.4

    def test_hand_value(self):
        th = ThetaEstimate(theta1_from(np.eye(4), [1, 1, 3, 1]), [1, 0, 2, 0], 0.5)
        assert lambda_map(th) == 5.5


class TestResidualU:
    def test_zero_slopes(self):
        d = random_data(np.random.default_rng(1), 5)
        np.testing.assert_array_equal(residual_u(d, np.zeros(2), np.zeros(2)), d.y)

    def test_treated_on_line(self):
        d = Dataset(y=[1.0 * 2 + 3 * 0.5], s=[1], x=[[1.0, 3.0]], z=[[0.0]])
        assert residual_u(d, [9, 9], [2.0, 0.5])[0] == 0.0

    def test_untreated_hand(self):
        d = Dataset(y=[5.0], s=[0], x=[[2.0, 0.0]], z=[[0.0]])
        assert residual_u(d, [1.0, 7.0], [0, 0])[0] == 3.0


class TestFirstBlock:
    def test_zero_when_treatment_matches_and_xi_equals_theta(self):
        nuis = hand_nuisance()
        d = Dataset(y=[3.0], s=[0.0], x=[[2.0]], z=[[-2.5]])   # propensity exactly 0
        xi = nuis.xi1_hat(d.features0, d.features1, d.y, np.array([0.0]))
        th = ThetaEstimate(xi[0], [0.0, 0.0], 0.0)
        np.testing.assert_array_equal(score_m1(d, th, nuis), np.zeros((1, 6)))

    def test_no_correction_without_zeta(self):
        nuis = hand_nuisance(zeta=lambda z: np.zeros((1, 6)))
        xi = nuis.xi1_hat(HAND.features0, HAND.features1, HAND.y, np.array([0.25]))
        np.testing.assert_array_equal(score_m1(HAND, HAND_THETA, nuis), xi - HAND_THETA.theta1)

    def test_hand_value(self):
        # v = (0.75 * (2 - 1), 0.25 * (2 - 0.5)) = (0.75, 0.375), r = 3 - 1 = 2, S - g = 0.75
        xi = [0.5625, 0.28125, 0.28125, 0.140625, 1.5, 0.75]
        expected = np.array(xi) - HAND_THETA.theta1 + 0.75 * np.arange(1.0, 7.0)
        np.testing.assert_allclose(score_m1(HAND, HAND_THETA, hand_nuisance())[0], expected,
                                   rtol=0, atol=1e-12)


class TestSecondBlock:
    @given(seeds)
    @settings(max_examples=25)
    def test_null_policy(self, seed):
        rng = np.random.default_rng(seed)
        d, th = random_data(rng, 20), random_theta(rng)
        out = score_m2(d, th, random_nuisance(rng), ProportionalShift(0.0))
        np.testing.assert_array_equal(out, np.tile(-th.theta2, (20, 1)))

    @given(seeds, st.floats(0.0, 0.95))
    @settings(max_examples=25)
    def test_proportional_shift_collapses(self, seed, a):
        rng = np.random.default_rng(seed)
        d, th = random_data(rng, 20), random_theta(rng)
        out = score_m2(d, th, random_nuisance(rng), ProportionalShift(a))
        mu = np.column_stack([d.features0, d.features1])
        np.testing.assert_allclose(out, a * mu * (1 - d.s)[:, None] - th.theta2, atol=1e-12)

    def test_hand_value(self):
        d = Dataset(y=[0.0], s=[0.0], x=[[2.0, -1.0]], z=[[0.0]])
        th = ThetaEstimate(theta1_from(np.eye(4), np.zeros(4)), np.zeros(4), 0.0)
        out = score_m2(d, th, random_nuisance(np.random.default_rng(0), d_z=1),
                       ProportionalShift(0.5))
        np.testing.assert_allclose(out[0], [1.0, -0.5, 1.0, -0.5], atol=1e-15)

    def test_zshift_hand_value(self):
        # g = 0.25, g(Z*) = 0.35, r = 1.5, kappa = (2, 3), mu = (2, 2)
        out = score_m2(HAND, HAND_THETA, hand_nuisance(), ZShift(lambda z: z + 1))
        np.testing.assert_allclose(out[0], [3.1, 5.25], atol=1e-12)

    def test_zshift_reduces_without_adjustment(self):
        nuis = hand_nuisance()
        out = score_m2(HAND, HAND_THETA, nuis, ZShift(lambda z: z + 1), adjusted=False)
        np.testing.assert_allclose(out[0], 2 * 0.1 - HAND_THETA.theta2, atol=1e-12)


class TestThirdBlock:
    def test_cancellation_at_identity(self):
        nuis = hand_nuisance()
        nuis = NuisanceSet(**{**nuis.__dict__, "density_ratio": lambda z: np.array([1.0])})
        d = Dataset(y=[3.0], s=[1.0], x=[[2.0]], z=[[7.5]])   # propensity exactly 1
        out = score_m3(d, HAND_THETA, nuis, ProportionalShift(0.0))
        assert out[0] == pytest.approx(-HAND_THETA.theta3, abs=1e-14)

    def test_no_adjustment_row_when_treatment_matches(self):
        d = Dataset(y=[3.0], s=[1.0], x=[[2.0]], z=[[7.5]])
        nuis = hand_nuisance()
        nuis = NuisanceSet(**{**nuis.__dict__, "delta_u_given_p": lambda q: np.zeros(np.shape(q))})
        u = 3.0 - 2.0 * 1.0
        expected = 1.0 - u - 0.1 + 2.0 * (u - 1.0)
        assert score_m3(d, HAND_THETA, nuis, ProportionalShift(0.5))[0] == pytest.approx(expected,
                                                                                           abs=1e-14)

    def test_hand_value(self):
        # g = 0.25, P* = 0.625, U = 1, r = 2: 0.390625 - 1.1 + 1.875 + (0.625 - 1) * 0.75
        out = score_m3(HAND, HAND_THETA, hand_nuisance(), ProportionalShift(0.5))
        assert abs(out[0] - 0.884375) < 1e-12

    def test_zshift_hand_value(self):
        # 0.35^2 - 1 - 0.1 + 1.5 * (1 - 0.0625)
        out = score_m3(HAND, HAND_THETA, hand_nuisance(), ZShift(lambda z: z + 1))
        assert abs(out[0] - 0.42875) < 1e-12

    def test_zshift_identity_is_minus_theta3(self):
        nuis = hand_nuisance()
        nuis = NuisanceSet(**{**nuis.__dict__, "z_density_ratio": lambda z: np.array([1.0]),
                              "kappa": lambda z: np.ones((1, 2))})
        pol = ZShift(lambda z: z)
        assert score_m3(HAND, HAND_THETA, nuis, pol)[0] == pytest.approx(-HAND_THETA.theta3, abs=1e-14)
        np.testing.assert_array_equal(score_m2(HAND, HAND_THETA, nuis, pol)[0], -HAND_THETA.theta2)


class TestDecomposition:
    @pytest.mark.parametrize("policy", [ProportionalShift(0.5), ZShift(lambda z: z + 0.5)],
                             ids=["pshift", "zshift"])
    def test_reassembly_on_many_inputs(self, policy):
        rng = np.random.default_rng(99)
        data, nuis, th = random_data(rng, 10_000), random_nuisance(rng), random_theta(rng)
        assert reassembly_error(data, th, nuis, policy) <= 1e-12

    @given(seeds)
    @settings(max_examples=30, deadline=None)
    def test_reassembly_property(self, seed):
        rng = np.random.default_rng(seed)
        data, nuis, th = random_data(rng, 50), random_nuisance(rng), random_theta(rng)
        assert reassembly_error(data, th, nuis, ProportionalShift(rng.uniform(0, 0.9))) <= 1e-12

    def test_unit_ratio_gives_zero_m32(self):
        rng = np.random.default_rng(3)
        nuis = random_nuisance(rng)
        nuis = NuisanceSet(**{**nuis.__dict__, "density_ratio": lambda z: np.ones(len(z))})
        dec = score_decomposed(random_data(rng, 30), nuis, ProportionalShift(0.5))
        assert np.all(dec.m32 == 0)

    def test_m32_hand_value(self):
        d = Dataset(y=[0.0], s=[1.0], x=[[1.0, 1.0]], z=[[0.0]])
        nuis = random_nuisance(np.random.default_rng(0), d_z=1)
        nuis = NuisanceSet(**{**nuis.__dict__, "density_ratio": lambda z: np.array([2.0])})
        np.testing.assert_array_equal(score_decomposed(d, nuis, ProportionalShift(0.5)).m32[0],
                                      [0, 0, 1, 1])

    @given(seeds)
    @settings(max_examples=25)
    def test_affine_in_first_two_blocks(self, seed):
        rng = np.random.default_rng(seed)
        data, nuis = random_data(rng, 15), random_nuisance(rng)
        t1, t2 = random_theta(rng), random_theta(rng)
        pol = ProportionalShift(0.5)
        diff = score_rows(data, t1, nuis, pol) - score_rows(data, t2, nuis, pol)
        k = t1.theta1.shape[0] + t1.theta2.shape[0]
        expected = -(t1.as_vector() - t2.as_vector())[:k]
        np.testing.assert_allclose(diff[:, :k], np.tile(expected, (15, 1)), atol=1e-12)


class TestJacobian:
    def test_identity_a_block(self):
        jac = numeric_jacobian_d(theta1_from(np.eye(4), np.zeros(4)))
        np.testing.assert_allclose(jac[:, 16:], np.eye(4), atol=1e-12)

    def test_scaled_identity_a_block(self):
        jac = numeric_jacobian_d(theta1_from(2 * np.eye(4), np.ones(4)))
        np.testing.assert_allclose(jac[:, 16:], 0.5 * np.eye(4), atol=1e-12)

    @given(seeds)
    @settings(max_examples=25)
    def test_matches_matrix_calculus(self, seed):
        rng = np.random.default_rng(seed)
        t1 = theta1_from(random_spd(rng, 4) + 4 * np.eye(4), rng.normal(size=4))
        np.testing.assert_allclose(numeric_jacobian_d(t1, 1e-4), analytic_jacobian(t1),
                                   rtol=0, atol=1e-6)


class TestLambdaGradient:
    def test_zero_theta2(self):
        th = ThetaEstimate(theta1_from(np.eye(4), [1, 2, 3, 4]), np.zeros(4), 1.0)
        g = lambda_gradient(th)
        np.testing.assert_array_equal(g[:20], 0)
        np.testing.assert_array_equal(g[20:], [-1, -2, 3, 4, 1])

    def test_zero_slopes(self):
        th = ThetaEstimate(theta1_from(np.eye(4), np.zeros(4)), [1, 2, 3, 4], 1.0)
        np.testing.assert_array_equal(lambda_gradient(th)[20:24], 0)

    @given(seeds)
    @settings(max_examples=25)
    def test_matches_finite_differences(self, seed):
        th = random_theta(np.random.default_rng(seed))
        vec = th.as_vector()
        step = 0.01
        fd = [central_difference(lambda t: lambda_map(ThetaEstimate.from_vector(
            vec + t * np.eye(vec.size)[k], 2)), 0.0, step) for k in range(vec.size)]
        np.testing.assert_allclose(lambda_gradient(th, step), fd, rtol=0, atol=1e-6)

    @given(seeds)
    @settings(max_examples=25)
    def test_matches_analytic_gradient(self, seed):
        th = random_theta(np.random.default_rng(seed))
        signed = np.concatenate([-th.theta2[:2], th.theta2[2:]])
        exact = np.concatenate([signed @ analytic_jacobian(th.theta1), -th.beta0, th.beta1, [1.0]])
        np.testing.assert_allclose(lambda_gradient(th, 1e-4), exact, rtol=0, atol=1e-6)


class TestMHat:
    def test_identity_for_zero_m32(self):
        th = random_theta(np.random.default_rng(1))
        np.testing.assert_array_equal(m_hat_matrix(np.zeros((10, 4)), th), np.eye(25))

    def test_null_policy_gives_identity(self):
        d = generate_sample(300, np.random.default_rng(4))
        cf, th = fit_crossfit(d, EstimationConfig(policy=ProportionalShift(0.0)))
        np.testing.assert_array_equal(m_hat_matrix(np.concatenate(cf.m32), th), np.eye(25))

    def test_matches_jacobian_of_mean_score(self):
        d = generate_sample(2000, np.random.default_rng(5))
        cf, th = fit_crossfit(d, EstimationConfig())
        vec = th.as_vector()
        jac = np.empty((25, 25))
        for k in range(25):
            e = np.zeros(25)
            e[k] = 1e-4
            up = cf.residual(ThetaEstimate.from_vector(vec + e, 2))
            dn = cf.residual(ThetaEstimate.from_vector(vec - e, 2))
            jac[:, k] = (up - dn) / 2e-4
        m_hat = m_hat_matrix(np.concatenate(cf.m32), th)
        np.testing.assert_allclose(m_hat, -jac, rtol=0, atol=1e-4)


class TestSandwich:
    def test_identity_m(self):
        rows = np.random.default_rng(0).normal(size=(40, 25))
        res = sandwich_variance(rows, np.eye(25), np.ones(25))
        np.testing.assert_allclose(res.var_theta, rows.T @ rows / 40, rtol=1e-12)

    def test_identical_rows(self):
        m = np.random.default_rng(1).normal(size=25)
        lam = np.random.default_rng(2).normal(size=25)
        res = sandwich_variance(np.tile(m, (10, 1)), np.eye(25), lam)
        np.testing.assert_allclose(res.sigma, np.outer(m, m), rtol=1e-12)
        assert res.var_prte == pytest.approx((lam @ m) ** 2, rel=1e-10)

    @given(seeds)
    @settings(max_examples=25)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        m_hat = np.eye(25)
        m_hat[-1, :20] = rng.normal(size=20)
        res = sandwich_variance(rng.normal(size=(60, 25)), m_hat, rng.normal(size=25))
        assert res.var_prte >= 0
        assert res.se(60) == pytest.approx(np.sqrt(res.var_prte / 60))
