import math
import tempfile
from dataclasses import replace
from io import StringIO
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase, override_settings
from joblib import parallel_config
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, signal, special, stats

from safety_apps.run_manifest import EXIT_GATE, EXIT_VALIDATION, read_json
from safety_apps.site_data.generator import GeneratorConfig, rpnbl_formula, synthesize, write_truth
from safety_apps.site_data.records import write_sites

from . import sampler
from .convergence import bgr, mc_error
from .distributions import (
    DistributionDomainError,
    GeParam,
    NbParam,
    ge_mean,
    ge_pdf,
    ge_sample,
    lindley_logpdf,
    lindley_mean,
    lindley_moment,
    lindley_pdf,
    lindley_sample,
    lindley_sample_mixture,
    nb_logpmf,
    nb_pmf,
    nb_sample,
    nb_tail_truncation,
)
from .draws_store import FORMAT_VERSION, decode_chain, encode_chain, load_fit, save_fit
from .inference import (
    DicReport,
    ParameterSummary,
    PosteriorSummary,
    compare_models,
    dic,
    marginal_effects,
    parameter_draws,
    population_predictions,
    recompute_log_likelihood,
    retention_candidates,
    site_draws,
    summarize,
    summarize_arrays,
    truth_coverage,
)
from .model_spec import (
    INTERCEPT,
    Formula,
    ModelSpec,
    PriorConfig,
    Term,
    absorb_intercept,
    build_design,
    destandardize_coefficients,
    expected_counts,
    mean_response,
    response_vector,
    standardize,
)
from .models import RunManifest
from .sampler import ACCEPTANCE_RANGE, GibbsSampler, McmcConfig, ModelData, z_probability
from .schemas import load_model_config, parse_model_config

SMALL_FORMULA = Formula(
    response='kabco',
    terms=(
        Term('aadt', 'log'),
        Term('speed_limit', 'indicator', threshold=35.0, op='ge'),
        Term('area', 'categorical', level='mix'),
    ),
    random_terms=('ln_aadt',),
)


def _records(n_sites=120, seed=11):
    records, _ = synthesize(GeneratorConfig(n_sites=n_sites, seed=seed))
    return records


def _fit(family='RPNB-L', formula=SMALL_FORMULA, records=None, **mcmc):
    records = records or _records()
    spec = ModelSpec(family, formula, PriorConfig.for_dataset(len(records)))
    design = standardize(build_design(records, formula))
    y = response_vector(records, formula.response)
    options = dict(n_chains=2, n_iter=300, burn_in=100, latent_thin=10, seed=5)
    options.update(mcmc)
    return sampler.run(spec, design, y, McmcConfig(**options)), design, y


# ── Distributions ────────────────────────────────────────────────────────────

class LindleyTests(TestCase):
    """Lindley density, moments and the two sampling representations."""

    def test_mean_is_one_at_root_two(self):
        self.assertAlmostEqual(lindley_moment(1.414214, 1), 1.0, delta=1e-6)

    def test_pdf_integrates_to_one(self):
        for theta in (0.5, 1.0, math.sqrt(2.0), 5.0):
            total, _ = integrate.quad(lambda x: lindley_pdf(x, theta), 0.0, np.inf,
                                      epsabs=1e-12, epsrel=1e-12, limit=200)
            self.assertAlmostEqual(total, 1.0, delta=1e-8, msg=f'theta={theta}')

    def test_raw_moments_match_quadrature(self):
        theta = 1.378
        for k in (1, 2, 3):
            numeric, _ = integrate.quad(lambda x: x ** k * lindley_pdf(x, theta), 0.0, np.inf,
                                        epsabs=1e-12, epsrel=1e-12, limit=200)
            self.assertAlmostEqual(lindley_moment(theta, k), numeric, places=8)

    def test_vectorized_mean_matches_first_moment(self):
        thetas = np.array([0.5, 1.378, 3.0])
        assert_allclose(lindley_mean(thetas), [lindley_moment(t) for t in thetas], rtol=1e-12)

    def test_sampler_mean_within_three_standard_errors(self):
        theta = 1.378
        draws = lindley_sample(theta, np.random.default_rng(2024), size=10 ** 6)
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        self.assertLess(abs(draws.mean() - lindley_moment(theta)), 3.0 * se)

    def test_gamma_mixture_and_exponential_sum_agree(self):
        for theta in (0.5, 1.378, 3.0):
            a = lindley_sample(theta, np.random.default_rng(101), size=10 ** 5)
            b = lindley_sample_mixture(theta, np.random.default_rng(202), size=10 ** 5)
            result = stats.ks_2samp(a, b)
            self.assertGreater(result.pvalue, 0.01, msg=f'theta={theta}')

    def test_rejects_invalid_arguments(self):
        for theta in (0.0, -1.0, float('nan')):
            with self.assertRaises(DistributionDomainError):
                lindley_pdf(1.0, theta)
        with self.assertRaises(DistributionDomainError):
            lindley_logpdf(-0.5, 1.0)
        with self.assertRaises(DistributionDomainError):
            lindley_moment(1.0, 0)


class NegativeBinomialTests(TestCase):

    def test_pmf_matches_scipy(self):
        y = np.arange(40)
        mean, phi = 2.5, 1.7
        expected = stats.nbinom.pmf(y, phi, phi / (phi + mean))
        assert_allclose(nb_pmf(y, NbParam(mean, phi)), expected, rtol=1e-10)

    def test_pmf_sums_to_one_over_truncated_support(self):
        for mean, phi in ((1.0, 1.0), (2.5, 1.7), (0.2, 0.05), (40.0, 3.0), (5.0, 1e4)):
            p = NbParam(mean, phi)
            y_max = nb_tail_truncation(p)
            self.assertLess(stats.nbinom.sf(y_max, phi, phi / (phi + mean)), 1e-12)
            total = float(np.sum(nb_pmf(np.arange(y_max + 1), p)))
            self.assertAlmostEqual(total, 1.0, delta=1e-10, msg=f'mean={mean}, phi={phi}')

    def test_zero_count_probabilities(self):
        self.assertAlmostEqual(float(nb_pmf(0, NbParam(1.0, 1.0))), 0.5, places=12)
        # Poisson(1) limit
        self.assertAlmostEqual(float(nb_pmf(0, NbParam(1.0, 1e9))), math.exp(-1.0), places=8)

    def test_variance_is_mean_plus_square_over_phi(self):
        self.assertAlmostEqual(NbParam(2.0, 4.0).variance, 3.0)

    def test_sample_moments(self):
        p = NbParam(1.5, 2.0)
        draws = nb_sample(p, np.random.default_rng(7), size=200_000)
        self.assertAlmostEqual(draws.mean(), p.mean, delta=4 * math.sqrt(p.variance / draws.size))
        assert_allclose(draws.var(), p.variance, rtol=0.03)

    def test_rejects_fractional_counts(self):
        with self.assertRaises(DistributionDomainError):
            nb_logpmf(1.5, 1.0, 1.0)
        with self.assertRaises(DistributionDomainError):
            NbParam(0.0, 1.0)


class GeneralizedExponentialTests(TestCase):

    def test_pdf_integrates_to_one(self):
        for a, b in ((1.0, 2.0), (2.022, 1.442), (5.0, 0.5)):
            total, _ = integrate.quad(lambda x: ge_pdf(x, GeParam(a, b)), 0.0, np.inf, limit=200)
            self.assertAlmostEqual(total, 1.0, places=7)

    def test_mean_matches_quadrature(self):
        p = GeParam(2.022, 1.442)
        numeric, _ = integrate.quad(lambda x: x * ge_pdf(x, p), 0.0, np.inf, limit=200)
        self.assertAlmostEqual(ge_mean(p.a, p.b), numeric, places=7)

    def test_sampler_mean(self):
        p = GeParam(2.022, 1.442)
        draws = ge_sample(p, np.random.default_rng(3), size=200_000)
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        self.assertLess(abs(draws.mean() - ge_mean(p.a, p.b)), 4 * se)

    def test_rejects_nonpositive_parameters(self):
        with self.assertRaises(DistributionDomainError):
            GeParam(0.0, 1.0)


# ── Model declaration ────────────────────────────────────────────────────────

class FormulaTests(TestCase):

    def test_published_formula_labels(self):
        labels = rpnbl_formula().labels()
        self.assertEqual(labels[:3], ['ln_aadt', 'avg_on', 'speed_limit_ge_35'])
        self.assertIn('school_count_gt_1', labels)
        self.assertIn('area_mix', labels)

    def test_full_categorical_coding_drops_reference(self):
        term = Term('area', 'categorical')
        self.assertEqual([label for label, _ in term.column_levels()], ['area_res', 'area_mix'])
        term = Term('area', 'categorical', reference='mix')
        self.assertEqual([label for label, _ in term.column_levels()], ['area_com', 'area_res'])

    def test_invalid_terms(self):
        with self.assertRaises(ValueError):
            Term('area', 'categorical', level='suburban')
        with self.assertRaises(ValueError):
            Term('speed_limit', 'indicator')
        with self.assertRaises(ValueError):
            Term('aadt', 'cube')
        with self.assertRaises(ValueError):
            Formula('kabco', (Term('aadt', 'log'),), random_terms=('avg_on',))
        with self.assertRaises(ValueError):
            Formula('fatal', (Term('aadt', 'log'),))

    def test_family_and_random_terms_must_agree(self):
        with self.assertRaises(ValueError):
            ModelSpec('NB-L', SMALL_FORMULA)
        with self.assertRaises(ValueError):
            ModelSpec('RPNB-GE', replace(SMALL_FORMULA, random_terms=()))
        with self.assertRaises(ValueError):
            ModelSpec('ZINB', SMALL_FORMULA)

    def test_lindley_prior_follows_observation_count(self):
        priors = PriorConfig.for_dataset(596)
        self.assertAlmostEqual(priors.lindley_a, 596 / 3)
        self.assertAlmostEqual(priors.lindley_b, 298.0)
        with self.assertRaises(ValueError):
            PriorConfig.for_dataset(596, lindley_a=2.0)

    def test_absorbed_intercept_reproduces_mean(self):
        b0, theta = -0.488, 1.378
        self.assertAlmostEqual(math.exp(absorb_intercept(b0, theta)), math.exp(b0) * lindley_mean(theta))


class MeanResponseTests(TestCase):

    def test_zero_coefficients_give_the_lambda_component(self):
        self.assertEqual(mean_response([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 1.0), 1.0)
        self.assertAlmostEqual(mean_response([0.0], [1.0], lindley_mean(math.sqrt(2.0))), 1.0, places=12)

    def test_population_mean_matches_absorbed_intercept(self):
        for b0, theta in ((-0.488, 1.378), (0.3, 0.5), (2.0, 4.0)):
            absorbed = mean_response([absorb_intercept(b0, theta)], [1.0], 1.0)
            assert_allclose(mean_response([b0], [1.0], lindley_mean(theta)), absorbed, rtol=1e-12)

    def test_linear_predictor_is_clamped(self):
        self.assertEqual(mean_response([100.0], [1.0], 1.0), math.exp(30.0))
        self.assertEqual(mean_response([-100.0], [1.0], 2.0), 2.0 * math.exp(-30.0))

    def test_expected_counts_vectorize_mean_response(self):
        rng = np.random.default_rng(14)
        X = np.column_stack([np.ones(6), rng.standard_normal((6, 2))])
        b = np.array([-0.4, 0.35, 0.2])
        rowwise = [mean_response(b, row, 1.7) for row in X]
        assert_allclose(expected_counts(b, X, 1.7), rowwise, rtol=1e-14)
        draws = np.vstack([b, 2 * b])
        self.assertEqual(expected_counts(draws, X, 1.0).shape, (2, 6))
        with self.assertRaises(ValueError):
            mean_response(draws, X[0], 1.0)


class DesignMatrixTests(TestCase):

    def setUp(self):
        self.records = _records(n_sites=60, seed=4)

    def test_intercept_first_and_encodings(self):
        design = build_design(self.records, SMALL_FORMULA)
        self.assertEqual(design.columns, (INTERCEPT, 'ln_aadt', 'speed_limit_ge_35', 'area_mix'))
        assert_array_equal(design.column(INTERCEPT), 1.0)
        assert_allclose(design.column('ln_aadt'), np.log([r.aadt for r in self.records]))
        assert_array_equal(design.column('speed_limit_ge_35'),
                           [1.0 if r.speed_limit >= 35 else 0.0 for r in self.records])
        assert_array_equal(design.column('area_mix'), [1.0 if r.area == 'mix' else 0.0 for r in self.records])

    def test_standardize_only_touches_continuous_columns(self):
        raw = build_design(self.records, SMALL_FORMULA)
        design = standardize(raw)
        self.assertAlmostEqual(design.column('ln_aadt').mean(), 0.0, places=12)
        self.assertAlmostEqual(design.column('ln_aadt').std(), 1.0, places=12)
        assert_array_equal(design.column('area_mix'), raw.column('area_mix'))
        self.assertEqual(set(design.column_stats), {'ln_aadt'})

    def test_destandardized_coefficients_give_same_linear_predictor(self):
        raw = build_design(self.records, SMALL_FORMULA)
        design = standardize(raw)
        b_star = np.array([-0.4, 0.35, 0.45, -0.37])
        b = destandardize_coefficients(b_star, design.columns, design.column_stats)
        assert_allclose(raw.values @ b, design.values @ b_star, rtol=1e-12)

    def test_reference_level_changes_coefficients_not_expected_counts(self):
        y = np.log(response_vector(self.records, 'kabco') + 0.5)
        fits = {}
        for reference in (None, 'mix'):
            formula = Formula('kabco', (Term('aadt', 'log'), Term('area', 'categorical', reference=reference)))
            design = build_design(self.records, formula)
            b, *_ = np.linalg.lstsq(design.values, y, rcond=None)
            fits[reference] = (design, b)
        (com_design, com_b), (mix_design, mix_b) = fits[None], fits['mix']
        self.assertEqual(com_design.columns[2:], ('area_res', 'area_mix'))
        self.assertEqual(mix_design.columns[2:], ('area_com', 'area_res'))
        self.assertAlmostEqual(mix_b[0], com_b[0] + com_b[3], places=8)
        assert_allclose(expected_counts(com_b, com_design.values, 1.0),
                        expected_counts(mix_b, mix_design.values, 1.0), rtol=1e-8)

    def test_zero_variance_column_rejected(self):
        records = [replace(r, avg_on=12.0) for r in self.records]
        with self.assertRaises(ValueError):
            standardize(build_design(records, Formula('kabco', (Term('avg_on'),))))

    def test_nonpositive_value_under_log_rejected(self):
        records = [replace(self.records[0], avg_on=0.0)] + self.records[1:]
        with self.assertRaises(ValueError) as ctx:
            build_design(records, Formula('kabco', (Term('avg_on', 'log'),)))
        self.assertIn(self.records[0].site_id, str(ctx.exception))


# ── Convergence ──────────────────────────────────────────────────────────────

class ConvergenceTests(TestCase):
    """BGR and batch-means MC error calibration."""

    def test_bgr_near_one_for_identical_chains(self):
        chain = np.random.default_rng(0).standard_normal(5000)
        self.assertAlmostEqual(bgr(np.vstack([chain, chain])), 1.0, delta=1e-3)

    def test_bgr_flags_separated_chains(self):
        rng = np.random.default_rng(1)
        chains = np.vstack([rng.normal(0.0, 1.0, 1000), rng.normal(10.0, 1.0, 1000)])
        self.assertGreater(bgr(chains), 2.0)

    def test_bgr_requires_two_chains(self):
        with self.assertRaises(ValueError):
            bgr(np.zeros((1, 100)))

    def test_mc_error_flags_autocorrelated_chains(self):
        rng = np.random.default_rng(2)
        rho, n = 0.99, 10_000
        chains = np.zeros((2, n))
        for c in range(2):
            shocks = rng.standard_normal(n)
            for t in range(1, n):
                chains[c, t] = rho * chains[c, t - 1] + shocks[t]
        iid_error = chains.std(ddof=1) / math.sqrt(chains.size)
        self.assertLess(iid_error, 0.03 * chains.std(ddof=1))
        self.assertFalse(mc_error(chains).passes)

    def test_mc_error_passes_independent_draws(self):
        draws = np.random.default_rng(3).standard_normal((2, 10_000))
        result = mc_error(draws)
        self.assertTrue(result.passes)
        self.assertAlmostEqual(result.value, 1.0 / math.sqrt(draws.size), delta=0.003)

    def test_mc_error_matches_ar1_asymptotic_variance(self):
        # AR(1) with ρ = 0.9 inflates the iid standard error by sqrt((1+ρ)/(1-ρ)) = sqrt(19)
        rng = np.random.default_rng(6)
        shocks = rng.standard_normal((2, 41_000))
        chains = signal.lfilter([1.0], [1.0, -0.9], shocks, axis=1)[:, 1_000:]
        iid_error = chains.std(ddof=1) / math.sqrt(chains.size)
        self.assertAlmostEqual(mc_error(chains).value / iid_error, math.sqrt(19.0), delta=0.25 * math.sqrt(19.0))

    def test_mc_error_of_a_constant_chain_is_zero(self):
        result = mc_error(np.full((2, 400), 3.2))
        self.assertEqual(result.value, 0.0)
        self.assertEqual(result.ratio, 0.0)
        self.assertTrue(result.passes)

    def test_mc_error_needs_enough_batches(self):
        with self.assertRaises(ValueError):
            mc_error(np.zeros((1, 100)))


# ── Sampler ──────────────────────────────────────────────────────────────────

class McmcConfigTests(TestCase):

    def test_single_chain_rejected(self):
        with self.assertRaises(ValueError) as ctx:
            McmcConfig(n_chains=1)
        self.assertIn('BGR', str(ctx.exception))

    def test_burn_in_and_thinning_checks(self):
        with self.assertRaises(ValueError):
            McmcConfig(n_iter=100, burn_in=100)
        with self.assertRaises(ValueError):
            McmcConfig(thin=3, latent_thin=10)
        with self.assertRaises(ValueError):
            McmcConfig(frozen=('everything',))


class SamplerTests(TestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.chains, cls.design, cls.y = _fit()

    def test_chain_seeds_are_offsets_of_the_run_seed(self):
        self.assertEqual([c.seed for c in self.chains], [5, 6])

    def test_same_seed_gives_identical_draws(self):
        again, _, _ = _fit()
        for first, second in zip(self.chains, again):
            self.assertEqual(encode_chain(first), encode_chain(second))

    def test_results_do_not_depend_on_thread_count(self):
        records = _records()
        spec = ModelSpec('RPNB-L', SMALL_FORMULA, PriorConfig.for_dataset(len(records)))
        cfg = McmcConfig(n_chains=2, n_iter=300, burn_in=100, latent_thin=10, seed=5)
        with parallel_config(backend='threading'):
            threaded = sampler.run(spec, self.design, self.y, cfg, threads=2)
        for first, second in zip(self.chains, threaded):
            self.assertEqual(encode_chain(first), encode_chain(second))

    def test_stored_layout(self):
        chain = self.chains[0]
        self.assertEqual(chain.n_records, 300)
        self.assertEqual(chain.burn_in, 100)
        assert_array_equal(chain.site_records, np.arange(100, 300, 10))
        self.assertEqual(chain.site_draws['lambda'].shape, (20, self.design.n_sites))
        self.assertEqual(set(chain.site_draws), {'lambda', 'z', 'coef:ln_aadt'})
        self.assertTrue(np.all(chain.site_draws['lambda'] > 0))
        self.assertTrue(np.all(np.isin(chain.site_draws['z'], (0.0, 1.0))))
        self.assertIn('sigma:ln_aadt', chain.scalars)

    def test_ge_family_tracks_shape_parameters(self):
        chains, _, _ = _fit(family='RPNB-GE', n_iter=120, burn_in=40)
        self.assertIn('ge_a', chains[0].scalars)
        self.assertNotIn('theta', chains[0].scalars)
        self.assertNotIn('z', chains[0].site_draws)

    def test_domain_assertions_hold(self):
        chains, _, _ = _fit(family='NB-L', formula=replace(SMALL_FORMULA, random_terms=()),
                            n_iter=120, burn_in=40, check_domain=True)
        self.assertTrue(np.all(chains[0].scalars['phi'] > 0))

    def test_z_conditional_matches_mixture_weights(self):
        theta = 1.378
        lam = np.array([0.05, 0.7, 2.5])
        gamma1 = theta / (1 + theta) * theta * np.exp(-theta * lam)
        gamma2 = 1 / (1 + theta) * theta ** 2 * lam * np.exp(-theta * lam)
        assert_allclose(z_probability(lam), gamma2 / (gamma1 + gamma2), rtol=1e-12)

    def test_adapted_acceptance_rates_stay_in_range(self):
        with self.assertLogs('safety_apps.crash_models.sampler', 'INFO') as logs:
            chains, _, _ = _fit(n_iter=3_000, burn_in=2_000)
        low, high = ACCEPTANCE_RANGE
        for chain in chains:
            self.assertIn('latents', chain.acceptance)
            for block, rate in chain.acceptance.items():
                self.assertTrue(low <= rate <= high, f'chain {chain.chain_id} {block}: {rate:.3f}')
        done = [line for line in logs.output if 'done; acceptance' in line]
        self.assertEqual(len(done), 2)
        self.assertFalse([line for line in logs.output if line.startswith('WARNING')])

    def test_off_target_acceptance_is_warned(self):
        with self.assertLogs('safety_apps.crash_models.sampler', 'WARNING') as logs:
            _fit(n_iter=1_500, burn_in=1_000, target_acceptance=0.9)
        self.assertTrue(any('acceptance outside' in line for line in logs.output))


class SamplerExactnessTests(TestCase):
    """Small problems whose posterior is known without MCMC."""

    def _micro_records(self, counts):
        base = _records(n_sites=10, seed=1)[:len(counts)]
        return [replace(r, kabco=int(y), kabc=0, kab=0) for r, y in zip(base, counts)]

    @staticmethod
    def _grid_posterior(y, theta, phi, grid):
        """Marginal posterior CDF of b0 on ``grid`` with λ integrated on a log grid."""
        s = np.linspace(-25.0, 4.0, 4001)
        ds = s[1] - s[0]
        log_prior_lam = lindley_logpdf(np.exp(s), theta) + s
        y = np.asarray(y, dtype=float)[:, None]
        log_post = np.empty(grid.size)
        for k, b0 in enumerate(grid):
            terms = nb_logpmf(y, np.exp(s + b0)[None, :], phi) + log_prior_lam[None, :]
            log_marginal = special.logsumexp(terms, axis=1) + math.log(ds)
            log_post[k] = log_marginal.sum() - 0.5 * b0 ** 2 / 1e4
        density = np.exp(log_post - log_post.max())
        cdf = integrate.cumulative_trapezoid(density, grid, initial=0.0)
        return cdf / cdf[-1]

    def test_intercept_posterior_matches_quadrature(self):
        counts, theta, phi = [0, 2, 5], 1.378, 2.0
        records = self._micro_records(counts)
        formula = Formula('kabco', ())
        cfg = McmcConfig(
            n_chains=2, n_iter=110_000, burn_in=10_000, thin=10, latent_thin=1000, seed=21,
            init_theta=theta, init_phi=phi, frozen=('theta', 'phi'),
        )
        spec = ModelSpec('NB-L', formula, PriorConfig.for_dataset(len(records)))
        design = build_design(records, formula)
        chains = sampler.run(spec, design, response_vector(records, 'kabco'), cfg)
        matrix = np.vstack([c.post(f'b:{INTERCEPT}') for c in chains])
        self.assertEqual(matrix.size, 20_000)

        grid = np.linspace(-4.0, 8.0, 1201)
        cdf = self._grid_posterior(counts, theta, phi, grid)
        statistic = stats.kstest(matrix.ravel(), lambda x: np.interp(x, grid, cdf)).statistic
        # KS p-value at the effective sample size of the autocorrelated draws
        err = mc_error(matrix)
        n_eff = int((err.posterior_sd / err.value) ** 2)
        self.assertGreater(n_eff, 500)
        self.assertGreater(stats.kstwo.sf(statistic, n_eff), 0.01)

    def test_prior_only_phi_matches_gamma_prior(self):
        records = self._micro_records([1, 0, 3])
        formula = Formula('kabco', ())
        priors = PriorConfig.for_dataset(len(records), dispersion_shape=2.0, dispersion_rate=1.0)
        spec = ModelSpec('NB-L', formula, priors)
        cfg = McmcConfig(
            n_chains=2, n_iter=60_000, burn_in=5_000, latent_thin=5_000, seed=8,
            use_likelihood=False, frozen=('coefficients', 'latents', 'theta'),
        )
        chains = sampler.run(spec, build_design(records, formula), response_vector(records, 'kabco'), cfg)
        draws = np.concatenate([c.post('phi') for c in chains])
        observed = np.quantile(draws, [0.01, 0.5, 0.99])
        expected = stats.gamma(2.0, scale=1.0).ppf([0.01, 0.5, 0.99])
        assert_allclose(observed, expected, rtol=0.1, atol=0.05)

    def test_prior_only_theta_matches_beta_prior(self):
        records = self._micro_records([1, 0, 3])
        formula = Formula('kabco', ())
        spec = ModelSpec('NB-L', formula, PriorConfig.for_dataset(len(records)))
        cfg = McmcConfig(
            n_chains=2, n_iter=60_000, burn_in=5_000, latent_thin=5_000, seed=12,
            use_likelihood=False, frozen=('coefficients', 'phi'),
        )
        chains = sampler.run(spec, build_design(records, formula), response_vector(records, 'kabco'), cfg)
        w = np.vstack([1.0 / (1.0 + c.post('theta')) for c in chains])
        prior = stats.beta(1.0, 1.5)
        self.assertAlmostEqual(prior.mean(), 0.4)
        self.assertLess(abs(w.mean() - prior.mean()), 4.0 * mc_error(w).value)
        assert_allclose(w.std(ddof=1), prior.std(), rtol=0.1)

    def test_prior_only_coefficients_match_normal_prior(self):
        records = self._micro_records([1, 0, 3])
        formula = Formula('kabco', (Term('aadt', 'log'),))
        spec = ModelSpec('NB-L', formula, PriorConfig.for_dataset(len(records)))
        cfg = McmcConfig(
            n_chains=2, n_iter=60_000, burn_in=10_000, latent_thin=10_000, seed=13,
            use_likelihood=False, frozen=('latents', 'theta', 'phi'),
        )
        chains = sampler.run(spec, build_design(records, formula), response_vector(records, 'kabco'), cfg)
        for name in (f'b:{INTERCEPT}', 'b:ln_aadt'):
            draws = np.vstack([c.post(name) for c in chains])
            self.assertLess(abs(draws.mean()), 4.0 * mc_error(draws).value, name)
            assert_allclose(draws.std(ddof=1), 100.0, rtol=0.1, err_msg=name)

    def test_z_redraws_match_conditional_probability(self):
        records = self._micro_records([1, 0, 3])
        formula = Formula('kabco', ())
        spec = ModelSpec('NB-L', formula, PriorConfig.for_dataset(len(records)))
        data = ModelData.from_design(build_design(records, formula), response_vector(records, 'kabco'), spec)
        chain = GibbsSampler(spec, data, McmcConfig(n_chains=2, n_iter=10, burn_in=0, seed=3))
        lam = np.array([0.05, 0.7, 2.5])
        chain.log_lam = np.log(lam)
        # zero step: every proposal equals the current λ, only z moves
        chain.scales['latents'].log_scale[:] = -np.inf
        chain.scales['latents'].freeze()

        n_redraws = 100_000
        ones = np.zeros(lam.size)
        for _ in range(n_redraws):
            chain.update_latents()
            ones += chain.z
        assert_array_equal(chain.log_lam, np.log(lam))
        p = z_probability(lam)
        frequency = ones / n_redraws
        tolerance = 3.0 * np.sqrt(p * (1.0 - p) / n_redraws)
        self.assertTrue(np.all(np.abs(frequency - p) < tolerance), f'{frequency} vs {p}')

    def test_large_theta_drives_z_to_zero(self):
        records = self._micro_records([1, 0, 3])
        formula = Formula('kabco', ())
        spec = ModelSpec('NB-L', formula, PriorConfig.for_dataset(len(records)))
        cfg = McmcConfig(
            n_chains=2, n_iter=3_000, burn_in=1_000, latent_thin=10, seed=14, init_theta=1e4,
            use_likelihood=False, frozen=('coefficients', 'theta', 'phi'),
        )
        chains = sampler.run(spec, build_design(records, formula), response_vector(records, 'kabco'), cfg)
        z = np.concatenate([c.site_draws['z'].ravel() for c in chains])
        self.assertLess(z.mean(), 0.01)
        self.assertTrue(all(np.all(c.scalars['theta'] == 1e4) for c in chains))

    def test_intercept_only_fit_recovers_sample_mean(self):
        rng = np.random.default_rng(40)
        base = _records(n_sites=400, seed=2)
        records = [replace(r, kabco=int(y), kabc=0, kab=0) for r, y in zip(base, rng.poisson(3.0, len(base)))]
        formula = Formula('kabco', ())
        spec = ModelSpec('NB-L', formula, PriorConfig.for_dataset(len(records)))
        cfg = McmcConfig(
            n_chains=2, n_iter=4_000, burn_in=1_000, latent_thin=1_000, seed=15,
            frozen=('latents', 'theta'),
        )
        y = response_vector(records, 'kabco')
        chains = sampler.run(spec, build_design(records, formula), y, cfg)
        b0 = np.concatenate([c.post(f'b:{INTERCEPT}') for c in chains])
        assert_allclose(np.exp(b0).mean(), y.mean(), rtol=0.05)

    def test_zero_random_sd_shrinks_towards_zero(self):
        formula = Formula('kabco', (Term('aadt', 'log'),), random_terms=('ln_aadt',))
        records, _ = synthesize(GeneratorConfig(
            n_sites=500, seed=17, formula=formula, mixing='ge', ge_a=1000.0, ge_b=7.5, phi=1000.0,
            coefficients={INTERCEPT: 3.5, 'ln_aadt': 0.3}, random_sd={'ln_aadt': 0.0},
        ))
        # near-flat precision prior so σ is free to approach zero
        priors = PriorConfig.for_dataset(len(records), rp_precision_rate=1e-6)
        spec = ModelSpec('RPNB-GE', formula, priors)
        cfg = McmcConfig(
            n_chains=2, n_iter=8_000, burn_in=3_000, latent_thin=1_000, seed=16,
            init_ge_a=1000.0, init_ge_b=7.5, init_phi=1000.0, frozen=('ge', 'phi'),
        )
        design = standardize(build_design(records, formula))
        chains = sampler.run(spec, design, response_vector(records, 'kabco'), cfg)
        sigma = np.concatenate([c.post('sigma:ln_aadt') for c in chains])
        self.assertLess(float(np.median(sigma)), 0.05)


# ── Draw storage ─────────────────────────────────────────────────────────────

class DrawsStoreTests(TestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.chains, _, _ = _fit(n_iter=120, burn_in=40)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def test_saved_chains_load_back_unchanged(self):
        save_fit(self.chains, self.dir)
        loaded = load_fit(self.dir)
        self.assertEqual(len(loaded), 2)
        for original, restored in zip(self.chains, loaded):
            self.assertEqual(restored.meta, original.meta)
            for name, values in original.scalars.items():
                assert_array_equal(restored.scalars[name], values)
            assert_array_equal(restored.site_draws['coef:ln_aadt'], original.site_draws['coef:ln_aadt'])
            assert_array_equal(restored.latent_means['lambda'], original.latent_means['lambda'])

    def test_rejects_foreign_bytes(self):
        with self.assertRaises(ValueError):
            decode_chain(b'NOTDRAWS' + b'\x00' * 16)

    def test_rejects_other_format_versions(self):
        blob = encode_chain(self.chains[0])
        marker = f'"version": {FORMAT_VERSION}'.encode()
        self.assertIn(marker, blob)
        with self.assertRaises(ValueError) as ctx:
            decode_chain(blob.replace(marker, b'"version": 9'))
        self.assertIn('version', str(ctx.exception))

    def test_rejects_truncated_file(self):
        with self.assertRaises(ValueError):
            decode_chain(encode_chain(self.chains[0])[:-8])

    def test_empty_directory(self):
        with self.assertRaises(ValueError):
            load_fit(self.dir)

    def test_chains_from_different_fits(self):
        other, _, _ = _fit(n_iter=120, burn_in=40, records=_records(seed=12))
        save_fit([self.chains[0], replace(other[1], chain_id=1)], self.dir)
        with self.assertRaises(ValueError):
            load_fit(self.dir)


# ── Inference ────────────────────────────────────────────────────────────────

class SummaryTests(TestCase):

    def test_standard_normal_interval(self):
        draws = np.random.default_rng(9).standard_normal((2, 500_000))
        row = summarize_arrays({'z': draws}).get('z')
        self.assertAlmostEqual(row.lower, -1.96, delta=0.02)
        self.assertAlmostEqual(row.upper, 1.96, delta=0.02)
        self.assertFalse(row.significant)
        self.assertLess(row.bgr, 1.01)
        self.assertTrue(row.mc_ok)

    def test_significance_when_interval_excludes_zero(self):
        draws = np.random.default_rng(10).normal(5.0, 1.0, (2, 2000))
        self.assertTrue(summarize_arrays({'b': draws}).get('b').significant)

    def test_too_few_draws_fail_the_mc_gate(self):
        summary = summarize_arrays({'b': np.random.default_rng(11).standard_normal((2, 30))})
        self.assertFalse(summary.get('b').mc_ok)
        self.assertEqual(summary.gate_failures(), ['b'])

    def test_retention_candidates(self):
        def row(name, lower, upper):
            return ParameterSummary(name, (lower + upper) / 2, 1.0, lower, upper, 1.0, 0.001, True)

        summary = PosteriorSummary(rows=(
            row(INTERCEPT, -0.1, 0.2), row('ln_aadt', 0.1, 0.6), row('area_mix', -0.3, 0.05),
        ))
        self.assertEqual(retention_candidates(summary, [INTERCEPT, 'ln_aadt', 'area_mix']), ['area_mix'])

    def test_truth_coverage(self):
        summary = PosteriorSummary(rows=(
            ParameterSummary('ln_aadt', 0.35, 0.05, 0.25, 0.45, 1.0, 0.001, True),
            ParameterSummary('theta', 1.2, 0.1, 1.0, 1.3, 1.0, 0.001, True),
        ))
        table = truth_coverage(summary, {'ln_aadt': 0.345, 'theta': 1.378, 'phi': 7.3}, {'ln_aadt': 0.21})
        self.assertEqual(list(table['parameter']), ['ln_aadt', 'theta'])
        self.assertEqual(list(table['covered']), [True, False])
        self.assertEqual(set(table['scale']), {'original'})
        self.assertEqual(table['truth_standardized'].iloc[0], 0.21)
        self.assertTrue(np.isnan(table['truth_standardized'].iloc[1]))


class FittedInferenceTests(TestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.chains, cls.design, cls.y = _fit()

    def test_summary_parameter_names(self):
        names = summarize(self.chains).names
        for name in (INTERCEPT, 'ln_aadt', 'speed_limit_ge_35', 'area_mix', 'sd:ln_aadt', 'phi', 'alpha', 'theta'):
            self.assertIn(name, names)

    def test_reported_coefficients_are_back_transformed(self):
        draws = parameter_draws(self.chains)
        sd = self.design.column_stats['ln_aadt'].sd
        expected = np.stack([c.post('b:ln_aadt') for c in self.chains]) / sd
        assert_allclose(draws['ln_aadt'], expected, rtol=1e-12)
        assert_allclose(draws['alpha'], 1.0 / draws['phi'])
        assert_allclose(draws['sd:ln_aadt'], np.stack([c.post('sigma:ln_aadt') for c in self.chains]) / sd)

    def test_dic_components(self):
        report = dic(self.chains, self.design, self.y)
        self.assertAlmostEqual(report.pd, report.dbar - report.d_at_mean, places=9)
        self.assertAlmostEqual(report.dic, report.dbar + report.pd, places=9)
        self.assertTrue(np.isfinite(report.dic))

    def test_stored_log_likelihood_can_be_recomputed(self):
        for chain in self.chains:
            recomputed = recompute_log_likelihood(chain, self.design, self.y)
            assert_allclose(recomputed, chain.scalars['loglik'][chain.site_records], rtol=1e-9)

    def test_dic_needs_log_likelihood_trace(self):
        stripped = [replace(c, scalars={k: v for k, v in c.scalars.items() if k != 'loglik'}) for c in self.chains]
        with self.assertRaises(ValueError):
            dic(stripped, self.design, self.y)

    def test_population_predictions_for_a_subset(self):
        full = population_predictions(self.chains, self.design)
        ids = self.design.site_ids[:10]
        assert_allclose(population_predictions(self.chains, self.design.subset(ids)), full[:10])
        self.assertTrue(np.all(full > 0))

    def test_continuous_marginal_effect_matches_finite_difference(self):
        effect = marginal_effects(self.chains, self.design, terms=['ln_aadt'])[0]
        j = self.design.column_index('ln_aadt')
        sd = self.design.column_stats['ln_aadt'].sd
        h = 1e-4

        def site_means(shift):
            values = np.array(self.design.values)
            values[:, j] += shift / sd
            draws = site_draws(self.chains, replace(self.design, values=values))
            return (np.exp(draws.eta_site) * draws.mix_mean[:, None]).mean(axis=0)

        numeric = (site_means(h) - site_means(-h)) / (2 * h)
        self.assertEqual(effect.kind, 'continuous')
        assert_allclose(effect.per_site, numeric, rtol=1e-3, atol=1e-8)

    def test_binary_marginal_effect_is_a_discrete_difference(self):
        effect = marginal_effects(self.chains, self.design, terms=['area_mix'])[0]
        j = self.design.column_index('area_mix')

        def site_means(level):
            values = np.array(self.design.values)
            values[:, j] = level
            draws = site_draws(self.chains, replace(self.design, values=values))
            return (np.exp(draws.eta_site) * draws.mix_mean[:, None]).mean(axis=0)

        self.assertEqual(effect.kind, 'binary')
        assert_allclose(effect.per_site, site_means(1.0) - site_means(0.0), rtol=1e-9, atol=1e-12)
        self.assertLessEqual(effect.lower, effect.upper)

    def test_marginal_effects_reject_unknown_terms(self):
        with self.assertRaises(ValueError):
            marginal_effects(self.chains, self.design, terms=['lane_count'])
        with self.assertRaises(ValueError):
            marginal_effects(self.chains, self.design, terms=[INTERCEPT])


class DicTests(TestCase):
    """DIC reporting arithmetic and model ranking."""

    def test_published_triples(self):
        for dbar, pd_, total in ((992.13, 201.1, 1193.23), (1114.06, 119.5, 1233.56), (1096.6, 144.8, 1241.4)):
            report = DicReport.from_components(dbar, pd_)
            self.assertAlmostEqual(report.dic, total, delta=1e-9)
            self.assertAlmostEqual(report.d_at_mean, dbar - pd_, delta=1e-9)

    def test_compare_models(self):
        table = compare_models({
            'NB-L': DicReport.from_components(1114.06, 119.5),
            'RPNB-L': DicReport.from_components(992.13, 201.1),
            'RPNB-GE': DicReport.from_components(1096.6, 144.8),
            'RPNB-L reduced': DicReport.from_components(994.0, 202.2),
        })
        self.assertEqual(list(table['model']), ['RPNB-L', 'RPNB-L reduced', 'NB-L', 'RPNB-GE'])
        self.assertEqual(list(table['verdict']), ['best', 'competitive', 'strongly worse', 'strongly worse'])
        self.assertAlmostEqual(table['delta_dic'].iloc[2], 40.33, places=6)


# ── Config ───────────────────────────────────────────────────────────────────

VALID_CONFIG = {
    'model': {
        'family': 'RPNB-L',
        'response': 'KABCO',
        'terms': [
            {'name': 'aadt', 'transform': 'log'},
            {'name': 'speed_limit', 'transform': 'indicator', 'threshold': 35},
            {'name': 'area', 'transform': 'categorical', 'level': 'mix'},
        ],
        'random_terms': ['ln_aadt'],
    },
    'priors': {'coef_variance': 1000},
    'mcmc': {'n_chains': 3, 'n_iter': 2000, 'burn_in': 500, 'seed': 4},
}


class SchemaTests(TestCase):

    def _config(self, **sections):
        data = {k: dict(v) for k, v in VALID_CONFIG.items()}
        for name, values in sections.items():
            data[name] = {**data.get(name, {}), **values}
        return data

    def test_valid_config(self):
        config = parse_model_config(VALID_CONFIG)
        self.assertEqual(config.family, 'RPNB-L')
        self.assertEqual(config.formula, SMALL_FORMULA)
        spec = config.model_spec(n_obs=90)
        self.assertEqual(spec.priors.coef_variance, 1000.0)
        self.assertAlmostEqual(spec.priors.lindley_a, 30.0)
        self.assertEqual(config.mcmc.n_chains, 3)

    def test_overrides_ignore_missing_values(self):
        config = parse_model_config(VALID_CONFIG).with_mcmc(n_iter=300, burn_in=None, seed=9)
        self.assertEqual((config.mcmc.n_iter, config.mcmc.burn_in, config.mcmc.seed), (300, 500, 9))

    def test_errors_name_the_offending_key(self):
        cases = [
            (self._config(model={'colour': 'red'}), 'colour'),
            (self._config(priors={'lindley_a': 3}), 'lindley_a'),
            (self._config(priors={'coef_variance': 'big'}), 'coef_variance'),
            (self._config(mcmc={'n_chains': 1}), 'n_chains'),
            (self._config(model={'random_terms': []}), 'random term'),
            ({k: v for k, v in VALID_CONFIG.items() if k != 'model'}, 'model'),
        ]
        for data, needle in cases:
            with self.assertRaises(ValueError, msg=needle) as ctx:
                parse_model_config(data)
            self.assertIn(needle, str(ctx.exception))

    def test_load_from_yaml_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'model.yaml'
            path.write_text(
                'model:\n  family: NB-GE\n  response: kab\n  terms:\n    - {name: aadt, transform: log}\n'
                'mcmc:\n  n_chains: 2\n',
                encoding='utf-8',
            )
            config = load_model_config(path)
            self.assertEqual(config.family, 'NB-GE')
            self.assertEqual(config.formula.response, 'kab')
            self.assertEqual(config.path, str(path))

            path.write_text('model: [unclosed\n', encoding='utf-8')
            with self.assertRaises(ValueError):
                load_model_config(path)
        with self.assertRaises(ValueError):
            load_model_config(Path(tmp) / 'missing.yaml')

    def test_shipped_configs(self):
        families = {}
        for path in sorted((settings.BASE_DIR / 'configs').glob('*.yaml')):
            if path.name != 'generator.yaml':
                config = load_model_config(path)
                families[config.family] = config
        self.assertEqual(set(families), {'NB-L', 'RPNB-L', 'NB-GE', 'RPNB-GE'})
        self.assertEqual(families['RPNB-L'].formula, rpnbl_formula())
        self.assertEqual(families['NB-L'].formula.random_terms, ())
        self.assertEqual(families['RPNB-GE'].mcmc.n_iter, 80000)


# ── Commands ─────────────────────────────────────────────────────────────────

FIT_CONFIG = """\
model:
  family: RPNB-L
  response: kabco
  terms:
    - {name: aadt, transform: log}
    - {name: speed_limit, transform: indicator, threshold: 35}
  random_terms: [ln_aadt]
mcmc:
  n_chains: 2
  n_iter: 60
  burn_in: 20
  latent_thin: 10
  seed: 3
"""


class FitCommandTests(TestCase):
    """fit / report / effects end to end on a tiny synthetic inventory."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        root = Path(self.tmp.name)
        self.config = root / 'model.yaml'
        self.config.write_text(FIT_CONFIG, encoding='utf-8')
        self.data = write_sites(_records(n_sites=60, seed=2), root / 'sites.csv')
        self.root = root

    def _fit(self, out, **options):
        call_command('fit', config=str(self.config), data=str(self.data), out=str(out),
                     stdout=StringIO(), **options)

    def test_short_run_fails_the_gate(self):
        with self.assertRaises(CommandError) as ctx:
            self._fit(self.root / 'run')
        self.assertEqual(ctx.exception.returncode, EXIT_GATE)
        run = RunManifest.objects.get()
        self.assertEqual(run.status, 'gate_failed')
        self.assertEqual(run.seed, 3)
        self.assertEqual(run.artifact_versions, {'draws': FORMAT_VERSION})
        self.assertFalse(all(flag['mc_error'] for flag in run.convergence_flags.values()))
        lines = (self.root / 'run' / 'manifest.jsonl').read_text().splitlines()
        self.assertEqual(len(lines), 1)
        self.assertTrue((self.root / 'run' / 'chain_1.draws').exists())

    def test_no_gate_completes_and_reruns_identically(self):
        self._fit(self.root / 'a', no_gate=True)
        self._fit(self.root / 'b', no_gate=True)
        self.assertEqual(
            (self.root / 'a' / 'chain_0.draws').read_bytes(),
            (self.root / 'b' / 'chain_0.draws').read_bytes(),
        )
        self.assertEqual(list(RunManifest.objects.values_list('status', flat=True)), ['completed', 'completed'])
        fit_json = read_json(self.root / 'a' / 'fit.json')
        self.assertEqual(fit_json['family'], 'RPNB-L')
        self.assertIn('dic', fit_json)

    def test_overrides_and_invalid_values(self):
        with self.assertRaises(CommandError) as ctx:
            self._fit(self.root / 'run', chains=1)
        self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)
        self.assertEqual(RunManifest.objects.get().status, 'failed')

    def test_missing_data_file(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('fit', config=str(self.config), data=str(self.root / 'nope.csv'),
                         out=str(self.root / 'run'), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)

    @override_settings(CRASHSAFE_THREADS=3)
    def test_thread_count_defaults_to_setting(self):
        result = MagicMock(gate_failures=[], paths=[], dic=DicReport.from_components(10.0, 2.0))
        result.summary.convergence_flags.return_value = {}
        result.summary.to_frame.return_value = pd.DataFrame({'parameter': []})
        with patch('safety_apps.crash_models.management.commands.fit.FitService') as service:
            service.return_value.fit.return_value = result
            service.return_value.bgr_max = settings.CONVERGENCE_BGR_MAX
            self._fit(self.root / 'run')
            self.assertEqual(service.call_args.kwargs['threads'], 3)
            self._fit(self.root / 'run', threads=2)
            self.assertEqual(service.call_args.kwargs['threads'], 2)

    def test_report_and_effects(self):
        run_dir = self.root / 'run'
        self._fit(run_dir, no_gate=True)

        out = StringIO()
        call_command('report', draws=str(run_dir), out=str(self.root / 'report'),
                     compare=[str(run_dir)], stdout=out)
        for name in ('summary.csv', 'dic.csv', 'retention.csv', 'comparison.csv'):
            self.assertTrue((self.root / 'report' / name).exists(), name)
        self.assertIn('DIC', out.getvalue())
        summary = pd.read_csv(self.root / 'report' / 'summary.csv')
        self.assertIn('sd:ln_aadt', set(summary['parameter']))

        call_command('effects', draws=str(run_dir), out=str(self.root / 'effects'), stdout=StringIO())
        table = pd.read_csv(self.root / 'effects' / 'marginal_effects.csv')
        self.assertEqual(list(table['term']), ['ln_aadt', 'speed_limit_ge_35'])
        by_site = pd.read_csv(self.root / 'effects' / 'marginal_effects_by_site.csv')
        self.assertEqual(len(by_site), 60)

        with self.assertRaises(CommandError):
            call_command('effects', draws=str(run_dir), out=str(self.root / 'effects'),
                         terms=['lane_count'], stdout=StringIO())
        with self.assertRaises(CommandError):
            call_command('report', draws=str(self.root / 'empty'), out=str(self.root / 'report'),
                         stdout=StringIO())

    def test_report_coverage_names_its_scale(self):
        run_dir = self.root / 'run'
        self._fit(run_dir, no_gate=True)
        _, truth = synthesize(GeneratorConfig(n_sites=60, seed=2))
        truth_file = write_truth(truth, self.data)

        out = StringIO()
        call_command('report', draws=str(run_dir), out=str(self.root / 'report'),
                     truth=str(truth_file), stdout=out)
        self.assertIn('original covariate scale', out.getvalue())
        table = pd.read_csv(self.root / 'report' / 'truth_coverage.csv').set_index('parameter')
        self.assertEqual(set(table['scale']), {'original'})
        self.assertAlmostEqual(table.loc['ln_aadt', 'truth'], truth.coefficients['ln_aadt'])
        self.assertAlmostEqual(table.loc['ln_aadt', 'truth_standardized'],
                               truth.coefficients_standardized['ln_aadt'])
        self.assertTrue(np.isnan(table.loc['phi', 'truth_standardized']))

    def test_seed_only_offered_where_it_is_used(self):
        draws, out = str(self.root / 'run'), str(self.root / 'out')
        required = {
            'report': {'draws': draws},
            'effects': {'draws': draws},
            'psi': {'draws': draws},
            'cure': {'draws': draws, 'covariate': 'aadt'},
            'evaluate': {'draws': draws, 'test': str(self.data)},
            'mh': {'strata': str(self.data)},
        }
        for name, options in required.items():
            with self.subTest(command=name), self.assertRaises(TypeError) as ctx:
                call_command(name, out=out, seed=1, stdout=StringIO(), **options)
            self.assertIn('seed', str(ctx.exception))
        self.assertFalse(RunManifest.objects.exists())
