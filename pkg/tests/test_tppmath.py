"""Closed-form point-process math against independent oracles: adaptive
quadrature for integrals, inverse-CDF sampling + KS for distributions,
Monte-Carlo for expectations."""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from churnkit.tppmath import (
    GaussianParams,
    IntensitySpec,
    cumulative_intensity,
    expected_gap,
    gaussian_kl,
    log_gap_density,
    poisson_log_pmf,
    sample_gap,
    sample_logit_normal,
    sample_zt_poisson,
    total_mass,
    zt_poisson_log_pmf,
)


class TestCumulativeIntensity:
    def test_unit_rate(self):
        assert cumulative_intensity(IntensitySpec(0.0, 0.0), 2.0) == pytest.approx(2.0)

    def test_matches_quadrature_flat(self):
        spec = IntensitySpec(0.0, 0.0)
        for g in (0.3, 1.0, 4.2):
            num, _ = integrate.quad(lambda s: math.exp(spec.a + spec.wt * s), 0.0, g)
            assert cumulative_intensity(spec, g) == pytest.approx(num, abs=1e-8)

    def test_exponential_slope_closed_form(self):
        spec = IntensitySpec(0.0, 1.0)
        val = cumulative_intensity(spec, 1.0)
        assert val == pytest.approx(math.e - 1.0, rel=1e-12)
        num, _ = integrate.quad(lambda s: math.exp(s), 0.0, 1.0)
        assert val == pytest.approx(num, rel=1e-10)

    def test_properties_random_specs(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            spec = IntensitySpec(float(rng.uniform(-2, 2)), float(rng.uniform(-1, 1)))
            assert cumulative_intensity(spec, 0.0) == 0.0
            grid = np.sort(rng.uniform(0, 5, size=8))
            vals = [cumulative_intensity(spec, float(g)) for g in grid]
            assert all(v >= 0 for v in vals)
            assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_negative_gap_rejected(self):
        with pytest.raises(ValueError):
            cumulative_intensity(IntensitySpec(0.0, 0.0), -0.1)


class TestLogGapDensity:
    def test_unit_exponential(self):
        assert log_gap_density(IntensitySpec(0.0, 0.0), 1.0) == pytest.approx(-1.0)

    def test_normalizes_for_nonnegative_slope(self):
        for a, wt in ((0.3, 0.0), (-0.5, 0.2), (1.0, 0.7)):
            spec = IntensitySpec(a, wt)
            mass, _ = integrate.quad(
                lambda g: math.exp(log_gap_density(spec, g)), 0.0, np.inf, limit=200
            )
            assert mass == pytest.approx(1.0, abs=1e-6)

    def test_defective_mass_matches_closed_form(self):
        spec = IntensitySpec(0.0, -0.5)
        mass, _ = integrate.quad(
            lambda g: math.exp(log_gap_density(spec, g)), 0.0, np.inf, limit=200
        )
        expected = 1.0 - math.exp(-2.0)
        assert mass == pytest.approx(expected, abs=1e-6)
        assert total_mass(spec) == pytest.approx(expected, rel=1e-12)


class TestExpectedGap:
    def test_unit_exponential_mean(self):
        assert expected_gap(IntensitySpec(0.0, 0.0)) == pytest.approx(1.0)

    def test_rate_two_mean(self):
        assert expected_gap(IntensitySpec(math.log(2.0), 0.0)) == pytest.approx(0.5)

    def test_closed_equals_quadrature_at_zero_slope(self):
        spec = IntensitySpec(0.4, 0.0)
        assert expected_gap(spec, "closed") == pytest.approx(
            expected_gap(spec, "quadrature"), rel=1e-6
        )

    def test_quadrature_matches_monte_carlo(self):
        spec = IntensitySpec(0.0, 0.5)
        rng = np.random.default_rng(11)
        samples = np.array([sample_gap(spec, rng) for _ in range(1_000_000)])
        mc = samples.mean()
        assert expected_gap(spec) == pytest.approx(mc, rel=5e-3)

    def test_defective_mean_is_conditional_on_return(self):
        spec = IntensitySpec(0.0, -0.5)
        rng = np.random.default_rng(12)
        draws = np.array([sample_gap(spec, rng) for _ in range(200_000)])
        returned = draws[np.isfinite(draws)]
        assert len(returned) / len(draws) == pytest.approx(total_mass(spec), abs=5e-3)
        assert expected_gap(spec) == pytest.approx(returned.mean(), rel=1e-2)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            expected_gap(IntensitySpec(0.0, 0.0), "guess")


class TestSampleGap:
    def test_law_of_large_numbers(self):
        rng = np.random.default_rng(7)
        spec = IntensitySpec(0.0, 0.0)
        draws = np.array([sample_gap(spec, rng) for _ in range(100_000)])
        assert abs(draws.mean() - 1.0) < 0.02

    def test_kolmogorov_smirnov_vs_unit_exponential(self):
        rng = np.random.default_rng(8)
        draws = np.array([sample_gap(IntensitySpec(0.0, 0.0), rng) for _ in range(100_000)])
        stat = stats.kstest(draws, "expon").statistic
        assert stat < 0.01

    def test_ks_against_analytic_cdf_with_slope(self):
        spec = IntensitySpec(0.3, 0.4)
        rng = np.random.default_rng(9)
        draws = np.array([sample_gap(spec, rng) for _ in range(100_000)])
        cdf = lambda g: 1.0 - np.exp(-np.vectorize(lambda x: cumulative_intensity(spec, x))(g))
        stat = stats.kstest(draws, cdf).statistic
        assert stat < 0.01

    def test_u_equal_one_maps_to_zero_gap(self):
        class _Stub:
            def random(self):
                return 0.0  # u = 1 - random() = 1

        assert sample_gap(IntensitySpec(0.7, 0.3), _Stub()) == 0.0

    def test_defective_signals_never_returns(self):
        rng = np.random.default_rng(10)
        spec = IntensitySpec(-1.0, -2.0)
        draws = [sample_gap(spec, rng) for _ in range(5000)]
        frac_inf = sum(math.isinf(d) for d in draws) / len(draws)
        assert frac_inf == pytest.approx(math.exp(-total_mass_rate(spec)), abs=0.03)


def total_mass_rate(spec):
    return math.exp(spec.a) / abs(spec.wt)


class TestPoissonLogPmf:
    def test_examples(self):
        assert poisson_log_pmf(2.0, 0) == pytest.approx(-2.0)
        assert math.exp(poisson_log_pmf(2.0, 0)) == pytest.approx(0.1353, abs=5e-5)
        assert math.exp(poisson_log_pmf(1.0, 1)) == pytest.approx(math.exp(-1.0), rel=1e-12)

    def test_normalization(self):
        total = sum(math.exp(poisson_log_pmf(2.0, k)) for k in range(51))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_matches_scipy(self):
        for rate in (0.3, 1.0, 7.5):
            for k in (0, 1, 4, 19):
                assert poisson_log_pmf(rate, k) == pytest.approx(
                    stats.poisson.logpmf(k, rate), rel=1e-10
                )

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            poisson_log_pmf(0.0, 1)
        with pytest.raises(ValueError):
            poisson_log_pmf(1.0, -1)
        with pytest.raises(ValueError):
            poisson_log_pmf(1.0, 1.5)


class TestZeroTruncatedPoisson:
    def test_pmf_normalizes_over_support(self):
        total = sum(math.exp(zt_poisson_log_pmf(1.7, k)) for k in range(1, 60))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_sampler_matches_pmf(self):
        rng = np.random.default_rng(13)
        rate = 1.3
        draws = np.array([sample_zt_poisson(rate, rng) for _ in range(100_000)])
        assert draws.min() >= 1
        for k in (1, 2, 3, 5):
            frac = np.mean(draws == k)
            assert frac == pytest.approx(math.exp(zt_poisson_log_pmf(rate, k)), abs=4e-3)


class TestGaussianKL:
    def test_identity_is_zero(self):
        q = GaussianParams(0.7, 1.3)
        assert gaussian_kl(q, q) == 0.0

    def test_frozen_examples(self):
        assert gaussian_kl(GaussianParams(1, 1), GaussianParams(0, 1)) == pytest.approx(0.5)
        assert gaussian_kl(GaussianParams(0, 2), GaussianParams(0, 1)) == pytest.approx(
            math.log(0.5) + 2.0 - 0.5, rel=1e-12
        )

    def test_nonnegative_everywhere(self):
        rng = np.random.default_rng(14)
        for _ in range(10_000):
            q = GaussianParams(float(rng.normal(0, 3)), float(rng.uniform(0.05, 4)))
            p = GaussianParams(float(rng.normal(0, 3)), float(rng.uniform(0.05, 4)))
            kl = gaussian_kl(q, p)
            assert kl >= 0.0
            if q != p:
                assert kl > 0.0 or (q.mu == p.mu and q.sigma == p.sigma)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            q = GaussianParams(float(rng.normal(0, 2)), float(rng.uniform(0.3, 2.5)))
            p = GaussianParams(float(rng.normal(0, 2)), float(rng.uniform(0.3, 2.5)))
            x = q.mu + q.sigma * rng.standard_normal(1_000_000)
            log_q = -0.5 * ((x - q.mu) / q.sigma) ** 2 - math.log(q.sigma)
            log_p = -0.5 * ((x - p.mu) / p.sigma) ** 2 - math.log(p.sigma)
            diff = log_q - log_p
            se = diff.std(ddof=1) / math.sqrt(len(diff))
            assert abs(gaussian_kl(q, p) - diff.mean()) < 3.0 * se + 1e-9

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError):
            gaussian_kl(GaussianParams(0, 0.0), GaussianParams(0, 1))


class TestLogitNormal:
    def test_center(self):
        assert sample_logit_normal(GaussianParams(0.0, 1.0), 0.0) == pytest.approx(0.5)

    def test_symmetry(self):
        p = GaussianParams(0.0, 1.7)
        for eps in (0.3, 1.1, 2.2):
            z_pos = sample_logit_normal(p, eps)
            z_neg = sample_logit_normal(p, -eps)
            assert z_pos == pytest.approx(1.0 - z_neg, rel=1e-12)

    def test_frozen_example(self):
        z = sample_logit_normal(GaussianParams(2.0, 0.5), 1.0)
        assert z == pytest.approx(0.9241418199787566, rel=1e-12)

    def test_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(16)
        for _ in range(2000):
            z = sample_logit_normal(
                GaussianParams(float(rng.normal(0, 20)), float(rng.uniform(0.1, 10))),
                float(rng.standard_normal()),
            )
            assert 0.0 < z < 1.0
