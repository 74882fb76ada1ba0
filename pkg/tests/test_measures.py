"""Tests for metric supports, finite measures, divergences, and coverings."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import entroproj as ep
from entroproj.measures import EXACT_SCAN_LIMIT

from conftest import bernoulli, line_space, random_measure, random_space, two_point_space

# 0.7*log(0.7/0.5) + 0.3*log(0.3/0.5), evaluated with mpmath at 50 digits.
KL_07_05 = 0.08228287850505185
# Positive root of exp(u) - u - 1 = 1, bisected to machine precision.
ORLICZ_UNIT_ROOT = 1.1461932206205826


class TestMetricSpacePoints:
    def test_from_coordinates_line(self):
        space = line_space(3)
        assert space.points == (0.0, 0.5, 1.0)
        np.testing.assert_allclose(space.dist[0, 2], 1.0)
        np.testing.assert_allclose(space.dist[1, 2], 0.5)

    def test_from_coordinates_plane_euclidean(self):
        coords = np.array([[0.0, 0.0], [3.0, 4.0]])
        space = ep.MetricSpacePoints.from_coordinates(coords)
        assert space.points == ((0.0, 0.0), (3.0, 4.0))
        np.testing.assert_allclose(space.dist[0, 1], 5.0)

    def test_rejects_asymmetric_matrix(self):
        d = np.array([[0.0, 1.0], [2.0, 0.0]])
        with pytest.raises(ValueError):
            ep.MetricSpacePoints(points=(0, 1), dist=d)

    def test_rejects_nonzero_diagonal(self):
        d = np.array([[0.1, 1.0], [1.0, 0.0]])
        with pytest.raises(ValueError):
            ep.MetricSpacePoints(points=(0, 1), dist=d)

    def test_rejects_triangle_violation(self):
        d = np.array([
            [0.0, 1.0, 5.0],
            [1.0, 0.0, 1.0],
            [5.0, 1.0, 0.0],
        ])
        with pytest.raises(ValueError):
            ep.MetricSpacePoints(points=(0, 1, 2), dist=d)

    def test_index_of(self):
        space = line_space(4)
        assert space.index_of(space.points[2]) == 2

    def test_document_round_trip(self):
        space = random_space(np.random.default_rng(3), 5)
        back = ep.MetricSpacePoints.from_document(space.to_document())
        assert back.points == space.points
        np.testing.assert_array_equal(back.dist, space.dist)


class TestFiniteMeasure:
    def test_rejects_negative_weights(self):
        space = two_point_space()
        with pytest.raises(ValueError):
            ep.FiniteMeasure(space, np.array([1.2, -0.2]))

    def test_rejects_unnormalized(self):
        space = two_point_space()
        with pytest.raises(ValueError):
            ep.FiniteMeasure(space, np.array([0.5, 0.4]))

    def test_point_mass_and_uniform(self):
        space = line_space(4)
        delta = ep.FiniteMeasure.point_mass(space, 2)
        np.testing.assert_array_equal(delta.weights, [0.0, 0.0, 1.0, 0.0])
        unif = ep.FiniteMeasure.uniform(space)
        np.testing.assert_allclose(unif.weights, 0.25)

    def test_integrate(self):
        nu = bernoulli(0.7)
        assert nu.integrate(np.array([0.0, 1.0])) == pytest.approx(0.7)
        assert nu.integrate(np.array([1.0, 5.0])) == pytest.approx(0.3 + 3.5)

    def test_document_round_trip(self):
        nu = bernoulli(0.3)
        back = ep.FiniteMeasure.from_document(nu.to_document())
        np.testing.assert_array_equal(back.weights, nu.weights)
        assert back.space.points == nu.space.points


class TestRelativeEntropy:
    def test_zero_at_equality(self):
        nu = bernoulli(0.42)
        assert ep.relative_entropy(nu, nu) == 0.0

    def test_bernoulli_oracle(self):
        assert ep.relative_entropy(bernoulli(0.7), bernoulli(0.5)) == pytest.approx(
            KL_07_05, abs=1e-14
        )

    def test_infinite_off_support(self):
        space = two_point_space()
        delta0 = ep.FiniteMeasure.point_mass(space, 0)
        delta1 = ep.FiniteMeasure.point_mass(space, 1)
        assert ep.relative_entropy(delta0, delta1) == math.inf

    def test_zero_times_log_zero_is_zero(self):
        # beta vanishing where gamma charges costs nothing
        space = two_point_space()
        delta0 = ep.FiniteMeasure.point_mass(space, 0)
        assert ep.relative_entropy(delta0, bernoulli(0.5)) == pytest.approx(
            math.log(2.0)
        )

    @given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=6),
           st.lists(st.floats(0.01, 10.0), min_size=2, max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_nonnegative(self, raw_b, raw_g):
        m = min(len(raw_b), len(raw_g))
        space = line_space(m)
        b = np.array(raw_b[:m]) / np.sum(raw_b[:m])
        g = np.array(raw_g[:m]) / np.sum(raw_g[:m])
        h = ep.relative_entropy(ep.FiniteMeasure(space, b), ep.FiniteMeasure(space, g))
        assert h >= -1e-12

    def test_mismatched_supports_raise(self):
        nu1 = bernoulli(0.5)
        nu2 = ep.FiniteMeasure.uniform(line_space(3))
        with pytest.raises(ep.SupportMismatchError):
            ep.relative_entropy(nu1, nu2)


class TestVariationalLower:
    def test_constant_witness_gives_zero(self):
        beta, gamma = bernoulli(0.7), bernoulli(0.5)
        assert ep.variational_entropy_lower(beta, gamma, [np.full(2, 3.0)]) == pytest.approx(0.0, abs=1e-12)

    def test_log_ratio_witness_attains_entropy(self):
        beta, gamma = bernoulli(0.7), bernoulli(0.5)
        phi = np.log(beta.weights / gamma.weights)
        got = ep.variational_entropy_lower(beta, gamma, [phi])
        assert got == pytest.approx(KL_07_05, abs=1e-9)

    def test_never_exceeds_entropy(self, rng):
        space = line_space(5)
        beta = random_measure(rng, space, floor=1e-3)
        gamma = random_measure(rng, space, floor=1e-3)
        h = ep.relative_entropy(beta, gamma)
        phis = [rng.normal(size=5) for _ in range(200)]
        assert ep.variational_entropy_lower(beta, gamma, phis) <= h + 1e-12

    def test_empty_family_raises(self):
        with pytest.raises(ValueError):
            ep.variational_entropy_lower(bernoulli(0.5), bernoulli(0.5), [])


class TestTotalVariation:
    def test_disjoint_points_have_full_mass_two(self):
        space = two_point_space()
        d0 = ep.FiniteMeasure.point_mass(space, 0)
        d1 = ep.FiniteMeasure.point_mass(space, 1)
        assert ep.tv_distance(d0, d1) == pytest.approx(2.0)

    def test_zero_at_equality(self):
        nu = bernoulli(0.3)
        assert ep.tv_distance(nu, nu) == 0.0

    def test_pinsker(self, rng):
        space = line_space(4)
        for _ in range(50):
            nu1 = random_measure(rng, space, floor=1e-4)
            nu2 = random_measure(rng, space, floor=1e-4)
            tv = ep.tv_distance(nu1, nu2)
            kl = ep.relative_entropy(nu1, nu2)
            assert tv <= math.sqrt(2.0 * kl) + 1e-12


class TestFortetMourier:
    def test_unit_separated_point_masses(self):
        # Witness f needs |f| <= a and Lip(f) <= L with a + L <= 1. The
        # integral gap f(1) - f(0) is capped by both 2a and L * d(0, 1) = L,
        # so the best split at distance 1 is a = 1/3, L = 2/3, giving 2/3.
        space = two_point_space()
        d0 = ep.FiniteMeasure.point_mass(space, 0)
        d1 = ep.FiniteMeasure.point_mass(space, 1)
        assert ep.fm_distance(d0, d1) == pytest.approx(2.0 / 3.0, abs=1e-9)

    def test_symmetry(self, rng):
        space = random_space(rng, 5)
        nu1 = random_measure(rng, space)
        nu2 = random_measure(rng, space)
        assert ep.fm_distance(nu1, nu2) == pytest.approx(
            ep.fm_distance(nu2, nu1), abs=1e-10
        )

    def test_dominated_by_tv(self, rng):
        for trial in range(20):
            space = random_space(rng, 4 + trial % 3)
            nu1 = random_measure(rng, space)
            nu2 = random_measure(rng, space)
            assert ep.fm_distance(nu1, nu2) <= ep.tv_distance(nu1, nu2) + 1e-9

    def test_zero_at_equality(self, rng):
        space = random_space(rng, 4)
        nu = random_measure(rng, space)
        assert ep.fm_distance(nu, nu) == pytest.approx(0.0, abs=1e-10)


class TestProhorov:
    def test_unit_separated_point_masses(self):
        space = two_point_space()
        d0 = ep.FiniteMeasure.point_mass(space, 0)
        d1 = ep.FiniteMeasure.point_mass(space, 1)
        assert ep.prohorov_distance(d0, d1) == pytest.approx(1.0, abs=1e-12)

    def test_zero_at_equality(self, rng):
        space = random_space(rng, 5)
        nu = random_measure(rng, space)
        assert ep.prohorov_distance(nu, nu) == pytest.approx(0.0, abs=1e-12)

    def test_half_tv_upper_bound(self, rng):
        for _ in range(30):
            space = random_space(rng, 6)
            nu1 = random_measure(rng, space)
            nu2 = random_measure(rng, space)
            dp = ep.prohorov_distance(nu1, nu2)
            assert dp <= 0.5 * ep.tv_distance(nu1, nu2) + 1e-9

    def test_fm_two_sided_comparison(self, rng):
        # phi(d_P) <= d_FM <= 2 d_P with phi(u) = 2u^2 / (2 + u)
        for _ in range(30):
            space = random_space(rng, 5)
            nu1 = random_measure(rng, space)
            nu2 = random_measure(rng, space)
            dp = ep.prohorov_distance(nu1, nu2)
            fm = ep.fm_distance(nu1, nu2)
            phi = 2.0 * dp * dp / (2.0 + dp)
            assert phi <= fm + 1e-9
            assert fm <= 2.0 * dp + 1e-9

    def test_large_support_warns_and_estimates(self, rng):
        space = random_space(rng, EXACT_SCAN_LIMIT + 5)
        nu1 = random_measure(rng, space)
        nu2 = random_measure(rng, space)
        with pytest.warns(UserWarning, match="greedy"):
            est = ep.prohorov_distance(nu1, nu2)
        assert 0.0 <= est <= 1.0 + 1e-12


class TestWeightedTvRatio:
    def test_identical_measures_give_zero_ratio(self):
        nu = bernoulli(0.4)
        lhs, factor, ratio = ep.weighted_tv_ratio(np.array([1.0, 2.0]), nu, nu, delta=0.5)
        assert lhs == 0.0
        assert ratio == 0.0
        # the entropy budget H + sqrt(H) vanishes with H
        assert factor == 0.0

    def test_unit_weight_reduces_to_tv(self):
        nu1, nu2 = bernoulli(0.7), bernoulli(0.5)
        lhs, _, _ = ep.weighted_tv_ratio(np.ones(2), nu1, nu2, delta=1.0)
        assert lhs == pytest.approx(ep.tv_distance(nu1, nu2))

    def test_ratio_is_lhs_over_factor(self, rng):
        space = line_space(5)
        nu1 = random_measure(rng, space, floor=1e-3)
        nu2 = random_measure(rng, space, floor=1e-3)
        f = rng.normal(size=5) * 3.0
        lhs, factor, ratio = ep.weighted_tv_ratio(f, nu1, nu2, delta=0.7)
        assert ratio == pytest.approx(lhs / factor)

    def test_bounded_by_one_in_practice(self, rng):
        # the weighted distance never exceeds its entropy budget
        space = line_space(6)
        for _ in range(25):
            nu1 = random_measure(rng, space, floor=1e-3)
            nu2 = random_measure(rng, space, floor=1e-3)
            f = rng.normal(size=6) * rng.uniform(0.5, 4.0)
            for delta in (0.25, 1.0, 3.0):
                _, _, ratio = ep.weighted_tv_ratio(f, nu1, nu2, delta)
                assert ratio <= 1.0 + 1e-9

    def test_rejects_nonpositive_delta(self):
        with pytest.raises(ValueError):
            ep.weighted_tv_ratio(np.ones(2), bernoulli(0.5), bernoulli(0.6), delta=0.0)

    def test_rejects_infinite_entropy(self):
        space = two_point_space()
        d0 = ep.FiniteMeasure.point_mass(space, 0)
        d1 = ep.FiniteMeasure.point_mass(space, 1)
        with pytest.raises(ValueError):
            ep.weighted_tv_ratio(np.ones(2), d0, d1, delta=1.0)


class TestLuxemburgNorm:
    def test_zero_function(self):
        assert ep.luxemburg_norm(np.zeros(2), bernoulli(0.5)) == 0.0

    def test_constant_one(self):
        got = ep.luxemburg_norm(np.ones(2), bernoulli(0.5))
        assert got == pytest.approx(1.0 / ORLICZ_UNIT_ROOT, abs=1e-10)

    def test_positive_homogeneity(self, rng):
        space = line_space(5)
        alpha = random_measure(rng, space, floor=1e-3)
        g = rng.normal(size=5)
        base = ep.luxemburg_norm(g, alpha)
        assert ep.luxemburg_norm(2.5 * g, alpha) == pytest.approx(2.5 * base, rel=1e-8)

    def test_unit_ball_saturation(self, rng):
        # at s = norm the modular integral equals 1
        space = line_space(4)
        alpha = random_measure(rng, space, floor=1e-2)
        g = rng.normal(size=4) + 0.5
        s = ep.luxemburg_norm(g, alpha)
        u = np.abs(g) / s
        modular = alpha.integrate(np.exp(u) - u - 1.0)
        assert modular == pytest.approx(1.0, abs=1e-9)

    def test_ignores_nullsets(self):
        # mass zero at a point makes its value irrelevant
        space = line_space(3)
        alpha = ep.FiniteMeasure(space, np.array([0.5, 0.5, 0.0]))
        g_small = np.array([1.0, 1.0, 0.0])
        g_huge = np.array([1.0, 1.0, 1e6])
        assert ep.luxemburg_norm(g_huge, alpha) == pytest.approx(
            ep.luxemburg_norm(g_small, alpha)
        )


class TestCoveringNumber:
    def grid11(self):
        return line_space(11)  # 0.0, 0.1, ..., 1.0

    def test_known_counts_on_grid(self):
        space = self.grid11()
        assert ep.covering_number(space, 0.30).count == 2
        assert ep.covering_number(space, 0.15).count == 4
        assert ep.covering_number(space, 0.05).count == 11

    def test_exact_method_on_small_support(self):
        report = ep.covering_number(self.grid11(), 0.3)
        assert report.method == "exact"

    def test_centers_cover(self, rng):
        space = random_space(rng, 15)
        eps = 0.8
        report = ep.covering_number(space, eps)
        centers_idx = [space.index_of(c) for c in report.centers]
        d = space.dist
        for j in range(len(space)):
            assert min(d[j, i] for i in centers_idx) <= eps + 1e-12

    def test_greedy_beyond_scan_limit(self, rng):
        space = random_space(rng, EXACT_SCAN_LIMIT + 10)
        report = ep.covering_number(space, 0.9)
        assert report.method == "greedy"
        centers_idx = [space.index_of(c) for c in report.centers]
        for j in range(len(space)):
            assert min(space.dist[j, i] for i in centers_idx) <= 0.9 + 1e-12

    def test_rejects_nonpositive_epsilon(self):
        with pytest.raises(ValueError):
            ep.covering_number(self.grid11(), 0.0)


class TestCoveringBoundMeasures:
    def test_fortet_mourier_at_unit_radius(self):
        # (4e)^2, evaluated with mpmath
        assert ep.covering_bound_measures(2, 1.0, "fortet_mourier") == pytest.approx(
            118.2248975828904, rel=1e-12
        )

    def test_prohorov_at_unit_radius(self):
        assert ep.covering_bound_measures(2, 1.0, "prohorov") == pytest.approx(
            (2.0 * math.e) ** 2, rel=1e-12
        )

    def test_domain_checks(self):
        with pytest.raises(ValueError):
            ep.covering_bound_measures(-1, 0.5, "prohorov")
        with pytest.raises(ValueError):
            ep.covering_bound_measures(2, 0.0, "prohorov")
        with pytest.raises(ValueError):
            ep.covering_bound_measures(2, 1.5, "prohorov")
        with pytest.raises(ValueError):
            ep.covering_bound_measures(2, 0.5, "wasserstein")


class TestEpsilonScheduleMetric:
    def test_zero_covering_large_n(self):
        # with no covering term the criterion is n eps^2 / 8 >= sqrt(n),
        # i.e. eps >= sqrt(8) n^{-1/4}; for n = 6400 that is 0.3162...,
        # and the smallest admissible grid point is 0.95^22.
        got = ep.epsilon_schedule_metric(lambda r: 0.0, 6400)
        assert got == pytest.approx(0.95 ** 22, rel=1e-12)

    def test_decreases_with_n(self):
        fn = lambda r: 3.0
        eps_small = ep.epsilon_schedule_metric(fn, 400)
        eps_large = ep.epsilon_schedule_metric(fn, 40000)
        assert eps_large < eps_small

    def test_floor_with_warning_when_unsatisfiable(self):
        with pytest.warns(UserWarning, match="grid floor"):
            got = ep.epsilon_schedule_metric(lambda r: 1e9, 10)
        assert got == pytest.approx(0.95 ** 400)

    def test_rejects_nonpositive_n(self):
        with pytest.raises(ValueError):
            ep.epsilon_schedule_metric(lambda r: 0.0, 0)
