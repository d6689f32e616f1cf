import math
import tempfile
from dataclasses import replace
from io import StringIO
from pathlib import Path
from unittest import skipUnless

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase
from numpy.testing import assert_allclose, assert_array_equal

from safety_apps.crash_models.inference import truth_coverage
from safety_apps.crash_models.model_spec import build_design, standardize
from safety_apps.crash_models.sampler import McmcConfig
from safety_apps.crash_models.schemas import ModelConfig
from safety_apps.crash_models.services import FitService
from safety_apps.run_manifest import EXIT_VALIDATION
from safety_apps.site_data.generator import GeneratorConfig, rpnbl_formula, synthesize
from safety_apps.site_data.records import load_sites

from .evaluation import cure, mae, rmse, train_test_split, write_cure_files
from .screening import (
    COLD,
    HOTSPOT,
    NORMAL,
    PsiResult,
    StratumTable,
    classify,
    corridor_aggregate,
    crude_odds_ratio,
    hotspot_threshold,
    load_strata,
    mh_analysis,
    mh_odds_ratio,
    mh_risk_ratio,
    results_frame,
)

TWO_STRATA = [
    StratumTable(a=5, b=5, c=10, d=20, label='near'),
    StratumTable(a=2, b=8, c=4, d=16, label='far'),
]


def _results(values):
    return [PsiResult(site_id=f'S{i:04d}', expected=float(v) + 1.0, predicted=1.0, psi=float(v))
            for i, v in enumerate(values)]


def _zones(results):
    return {r.site_id: r.zone for r in results}


def _true_means(records, cfg):
    """Site means under the generating model with the random terms integrated out."""
    design = build_design(records, cfg.formula)
    if cfg.standardize:
        design = standardize(design)
    b = np.array([cfg.coefficients[c] for c in design.columns])
    eta = design.values @ b
    for label, sd in cfg.random_sd.items():
        eta = eta + 0.5 * sd ** 2 * design.column(label) ** 2
    return np.exp(eta) * cfg.mixing_mean


# ── Metrics ──────────────────────────────────────────────────────────────────

class MetricTests(TestCase):

    def test_hand_vectors(self):
        self.assertEqual(mae([1, 2, 3], [2, 2, 5]), 1.0)
        self.assertAlmostEqual(rmse([1, 2, 3], [2, 2, 5]), math.sqrt(5 / 3))
        self.assertEqual(mae([4, 0], [4, 0]), 0.0)

    def test_rmse_never_below_mae(self):
        rng = np.random.default_rng(17)
        for _ in range(10000):
            n = int(rng.integers(1, 30))
            obs, pred = rng.poisson(2.0, n), rng.gamma(2.0, 1.0, n)
            self.assertGreaterEqual(rmse(obs, pred) + 1e-12, mae(obs, pred))

    def test_length_mismatch_and_empty_input(self):
        with self.assertRaises(ValueError):
            mae([1, 2], [1])
        with self.assertRaises(ValueError):
            rmse([], [])

    def test_split_is_a_seeded_floor_partition(self):
        records = list(range(50))
        train, test = train_test_split(records, 0.8, seed=2)
        self.assertEqual((len(train), len(test)), (40, 10))
        self.assertEqual(sorted(train + test), records)
        self.assertEqual(train_test_split(records, 0.8, seed=2), (train, test))
        self.assertNotEqual(train_test_split(records, 0.8, seed=3)[0], train)
        with self.assertRaises(ValueError):
            train_test_split(records, 0.0)
        with self.assertRaises(ValueError):
            train_test_split(records[:1], 0.5)


# ── CURE ─────────────────────────────────────────────────────────────────────

class CureTests(TestCase):

    def setUp(self):
        rng = np.random.default_rng(4)
        self.x = rng.uniform(0, 10, 200)
        self.pred = rng.gamma(2.0, 0.5, 200)
        self.obs = rng.poisson(self.pred)

    def test_terminal_value_is_the_residual_sum(self):
        curve = cure(self.obs, self.pred, self.x, name='x')
        self.assertAlmostEqual(curve.cumulative[-1], float(np.sum(self.obs - self.pred)), delta=1e-9)
        self.assertEqual(curve.band[-1], 0.0)
        self.assertTrue(np.all(np.diff(curve.values) >= 0))
        assert_array_equal(curve.lower, -curve.upper)

    def test_ties_are_ordered_by_site_id(self):
        curve = cure([1, 2, 3], [0, 0, 0], [1.0, 1.0, 0.0], site_ids=['b', 'a', 'c'])
        self.assertEqual(curve.site_ids, ('c', 'a', 'b'))
        assert_array_equal(curve.cumulative, [3.0, 5.0, 6.0])

    def test_tied_site_ids_sort_numerically(self):
        ids = ['S10', 'S2', 'S1', 'T1']
        curve = cure([1, 1, 1, 1], [0, 0, 0, 0], [5.0, 5.0, 5.0, 1.0], site_ids=ids)
        self.assertEqual(curve.site_ids, ('T1', 'S1', 'S2', 'S10'))
        self.assertEqual(list(curve.to_frame()['site_id']), ['T1', 'S1', 'S2', 'S10'])

    def test_monotone_transform_gives_the_same_curve(self):
        first = cure(self.obs, self.pred, self.x)
        second = cure(self.obs, self.pred, np.exp(self.x))
        assert_array_equal(first.cumulative, second.cumulative)
        assert_array_equal(first.band, second.band)

    def test_zero_residual_variance(self):
        with self.assertLogs('safety_apps.site_screening.evaluation', 'WARNING'):
            curve = cure([1, 2], [1, 2], [0.5, 0.1])
        assert_array_equal(curve.band, [0.0, 0.0])
        self.assertEqual(curve.fraction_outside(), 0.0)

    def test_bad_covariates(self):
        with self.assertRaises(ValueError):
            cure([1, 2], [1, 2], [0.0])
        with self.assertRaises(ValueError):
            cure([1, 2], [1, 2], [0.0, np.nan])

    def test_point_file_and_plot(self):
        curve = cure(self.obs, self.pred, self.x, name='aadt')
        with tempfile.TemporaryDirectory() as tmp:
            csv_path, svg_path = write_cure_files(curve, tmp)
            frame = pd.read_csv(csv_path)
            self.assertEqual(list(frame.columns),
                             ['site_id', 'aadt', 'residual', 'cumulative_residual', 'upper_band', 'lower_band'])
            self.assertEqual(len(frame), 200)
            self.assertTrue(svg_path.read_bytes().lstrip().startswith(b'<?xml'))
            first = svg_path.read_bytes()
            write_cure_files(curve, tmp)
            self.assertEqual(svg_path.read_bytes(), first)

    @skipUnless(settings.CRASHSAFE_SLOW_TESTS, 'set CRASHSAFE_SLOW_TESTS to run the CURE calibration')
    def test_true_model_stays_inside_the_bands(self):
        fractions = []
        for replicate in range(50):
            cfg = GeneratorConfig(n_sites=596, seed=1000 + replicate)
            records, _ = synthesize(cfg)
            observed = np.array([r.kabco for r in records], dtype=float)
            predicted = _true_means(records, cfg)
            predicted *= observed.sum() / predicted.sum()
            curve = cure(observed, predicted, [r.aadt for r in records],
                         site_ids=[r.site_id for r in records], name='aadt')
            fractions.append(curve.fraction_outside())
        self.assertLessEqual(float(np.mean(fractions)), 0.10)


# ── PSI ──────────────────────────────────────────────────────────────────────

class ClassifyTests(TestCase):

    def test_one_to_ten(self):
        zones = _zones(classify(_results(range(1, 11))))
        self.assertEqual([sid for sid, z in zones.items() if z == HOTSPOT], ['S0009'])
        self.assertEqual(list(zones.values()).count(NORMAL), 9)

    def test_all_negative(self):
        results = classify(_results([-3.0, -0.5, -1.2]))
        self.assertEqual({r.zone for r in results}, {COLD})
        self.assertIsNone(hotspot_threshold([r.psi for r in results]))

    def test_twenty_positive_sites(self):
        values = list(np.linspace(0.1, 2.0, 20)) + [-1.0, -2.0, 0.0]
        zones = list(_zones(classify(_results(values))).values())
        self.assertEqual(zones.count(HOTSPOT), 2)
        self.assertEqual(zones.count(COLD), 2)
        self.assertEqual(zones[-1], NORMAL)

    def test_matches_the_sorted_top_decile(self):
        rng = np.random.default_rng(23)
        for _ in range(1000):
            values = rng.normal(0.0, 1.0, int(rng.integers(1, 120)))
            positive = np.sort(values[values > 0])[::-1]
            expected = set(positive[:-(-positive.size // 10)].tolist())
            hot = {r.psi for r in classify(_results(values)) if r.zone == HOTSPOT}
            self.assertEqual(hot, expected)

    def test_hotspots_are_scale_equivariant(self):
        values = np.random.default_rng(5).normal(0.0, 1.0, 300)
        base = [r.zone for r in classify(_results(values))]
        scaled = [r.zone for r in classify(_results(values * 37.5))]
        self.assertEqual(base, scaled)

    def test_empty_input(self):
        with self.assertRaises(ValueError):
            classify([])

    def test_ranked_frame(self):
        frame = results_frame(classify(_results([0.5, 2.0, -1.0, 2.0])))
        self.assertEqual(list(frame['site_id']), ['S0001', 'S0003', 'S0000', 'S0002'])
        self.assertEqual(list(frame['rank']), [1, 2, 3, 4])
        assert_allclose(frame['psi'], frame['expected'] - frame['predicted'])


class CorridorTests(TestCase):

    def test_psi_is_conserved(self):
        values = np.random.default_rng(8).normal(0.0, 2.0, 500)
        results = classify(_results(values))
        corridors = {r.site_id: f'C{i % 7}' for i, r in enumerate(results) if i % 50}
        with self.assertLogs('safety_apps.site_screening.screening', 'WARNING'):
            report = corridor_aggregate(results, corridors)
        unassigned = sum(r.psi for r in results if r.site_id in report.unassigned)
        self.assertEqual(len(report.unassigned), 10)
        self.assertAlmostEqual(report.table['psi_sum'].sum() + unassigned, float(values.sum()), delta=1e-9)
        self.assertEqual(report.table['n_sites'].sum(), 490)

    def test_hotspot_corridor_ranks_first(self):
        results = classify(_results(range(1, 21)))
        corridors = {r.site_id: ('hot' if r.psi > 10 else 'quiet') for r in results}
        table = corridor_aggregate(results, corridors).table
        first = table.iloc[0]
        self.assertEqual((first['corridor'], first['hotspots'], first['rank']), ('hot', 2, 1))

    def test_no_assignments(self):
        report = corridor_aggregate(_results([1.0]), {})
        self.assertTrue(report.table.empty)
        self.assertEqual(report.unassigned, ('S0000',))


# ── Mantel-Haenszel ──────────────────────────────────────────────────────────

class MantelHaenszelTests(TestCase):

    def test_two_strata(self):
        expected = (5 * 20 / 40 + 2 * 16 / 30) / (5 * 10 / 40 + 8 * 4 / 30)
        self.assertAlmostEqual(mh_odds_ratio(TWO_STRATA), expected, places=12)
        self.assertAlmostEqual(mh_odds_ratio(TWO_STRATA), 1.5396, delta=1e-4)

    def test_single_stratum_is_the_crude_ratio(self):
        table = StratumTable(a=10, b=20, c=20, d=10)
        self.assertEqual(mh_odds_ratio([table]), 0.25)
        self.assertEqual(mh_odds_ratio([table]), crude_odds_ratio(table))

    def test_homogeneous_strata(self):
        tables = [StratumTable(2, 4, 3, 6), StratumTable(5, 5, 7, 7)]
        self.assertAlmostEqual(mh_odds_ratio(tables), 1.0, places=12)

    def test_doubling_every_stratum(self):
        doubled = [StratumTable(2 * t.a, 2 * t.b, 2 * t.c, 2 * t.d) for t in TWO_STRATA]
        self.assertEqual(mh_odds_ratio(doubled), mh_odds_ratio(TWO_STRATA))
        self.assertAlmostEqual(mh_odds_ratio(TWO_STRATA * 2), mh_odds_ratio(TWO_STRATA), places=12)

    def test_zero_denominator(self):
        with self.assertLogs('safety_apps.site_screening.screening', 'WARNING'):
            result = mh_analysis([StratumTable(3, 0, 0, 4)])
        self.assertIsNone(result.odds_ratio)
        self.assertIsNone(result.ci_lower)
        self.assertIsNone(result.risk_ratio)

    def test_risk_ratio_and_interval(self):
        expected = (5 * 30 / 40 + 2 * 20 / 30) / (10 * 10 / 40 + 4 * 10 / 30)
        self.assertAlmostEqual(mh_risk_ratio(TWO_STRATA), expected, places=12)
        result = mh_analysis(TWO_STRATA)
        self.assertLess(result.ci_lower, result.odds_ratio)
        self.assertGreater(result.ci_upper, result.odds_ratio)
        self.assertTrue(0.0 <= result.p_value <= 1.0)
        self.assertEqual(result.n_strata, 2)

    def test_invalid_cells(self):
        with self.assertRaises(ValueError):
            StratumTable(1, -1, 2, 3)
        with self.assertRaises(ValueError):
            StratumTable(0, 0, 0, 0)
        with self.assertRaises(ValueError):
            mh_odds_ratio([])

    def test_load_strata(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'strata.csv'
            path.write_text('stratum,a,b,c,d\nnear,5,5,10,20\nfar,2,8,4,16\n', encoding='utf-8')
            tables = load_strata(path)
            self.assertEqual([t.label for t in tables], ['near', 'far'])
            self.assertEqual(tables, TWO_STRATA)

            path.write_text('a,b,c,d\n1,2,3,4\n1,2.5,3,4\n', encoding='utf-8')
            with self.assertRaises(ValueError) as ctx:
                load_strata(path)
            self.assertIn('line 3', str(ctx.exception))


# ── Commands ─────────────────────────────────────────────────────────────────

PIPELINE_CONFIG = """\
model:
  family: NB-L
  response: kabco
  terms:
    - {name: aadt, transform: log}
    - {name: speed_limit, transform: indicator, threshold: 35}
mcmc:
  n_chains: 2
  n_iter: 80
  burn_in: 40
  latent_thin: 10
  seed: 4
"""


class PipelineCommandTests(TestCase):
    """simulate -> fit -> psi / cure / evaluate, plus mh, through call_command."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.config = self.root / 'model.yaml'
        self.config.write_text(PIPELINE_CONFIG, encoding='utf-8')

    def _call(self, name, **options):
        out = StringIO()
        call_command(name, stdout=out, **options)
        return out.getvalue()

    def _simulate_and_fit(self, n_sites=100):
        self._call('simulate', out=str(self.root / 'data'), seed=7, n_sites=n_sites)
        data = self.root / 'data' / 'sites.csv'
        self._call('fit', config=str(self.config), data=str(data), out=str(self.root / 'fit'), no_gate=True)
        return data

    def test_psi_and_corridors(self):
        data = self._simulate_and_fit()
        corridors = self.root / 'corridors.csv'
        site_ids = [r.site_id for r in load_sites(data)]
        pd.DataFrame({
            'site_id': site_ids[:-1],
            'corridor': [f'route_{i % 4}' for i in range(len(site_ids) - 1)],
        }).to_csv(corridors, index=False)

        output = self._call('psi', draws=str(self.root / 'fit'), corridors=str(corridors),
                            out=str(self.root / 'psi'))
        ranked = pd.read_csv(self.root / 'psi' / 'psi.csv')
        self.assertEqual(len(ranked), 100)
        assert_allclose(ranked['psi'], ranked['expected'] - ranked['predicted'], rtol=0, atol=1e-12)
        positive = int((ranked['psi'] > 0).sum())
        self.assertEqual(int((ranked['zone'] == HOTSPOT).sum()), math.ceil(positive / 10))
        self.assertIn('hotspot(s) among 100 sites', output)
        self.assertIn('without a corridor', output)
        table = pd.read_csv(self.root / 'psi' / 'corridors.csv')
        self.assertEqual(table['n_sites'].sum(), 99)

    def test_cure_command(self):
        self._simulate_and_fit(n_sites=60)
        self._call('cure', draws=str(self.root / 'fit'), covariate='aadt', out=str(self.root / 'cure'))
        frame = pd.read_csv(self.root / 'cure' / 'cure_aadt.csv')
        self.assertAlmostEqual(frame['cumulative_residual'].iloc[-1], frame['residual'].sum(), delta=1e-6)
        self.assertTrue((self.root / 'cure' / 'cure_aadt.svg').exists())

        with self.assertRaises(CommandError) as ctx:
            self._call('cure', draws=str(self.root / 'fit'), covariate='colour', out=str(self.root / 'cure'))
        self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)

    def test_evaluate_on_a_held_out_split(self):
        self._call('simulate', out=str(self.root / 'data'), seed=8, n_sites=80)
        self._call('split_sites', data=str(self.root / 'data' / 'sites.csv'), out=str(self.root / 'split'))
        train = self.root / 'split' / 'train.csv'
        test = self.root / 'split' / 'test.csv'
        self._call('fit', config=str(self.config), data=str(train), out=str(self.root / 'fit'), no_gate=True)

        self._call('evaluate', draws=str(self.root / 'fit'), test=str(test), out=str(self.root / 'eval'))
        metrics = pd.read_csv(self.root / 'eval' / 'metrics.csv').set_index('set')
        self.assertEqual(list(metrics['n_sites']), [64, 16])
        self.assertTrue((metrics['rmse'] >= metrics['mae']).all())
        predictions = pd.read_csv(self.root / 'eval' / 'predictions.csv')
        self.assertEqual(len(predictions), 16)
        self.assertTrue((predictions['predicted'] > 0).all())

        with self.assertRaises(CommandError) as ctx:
            self._call('evaluate', draws=str(self.root / 'fit'), test=str(train), out=str(self.root / 'eval'))
        self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)

    def test_mh_command(self):
        strata = self.root / 'strata.csv'
        strata.write_text('stratum,a,b,c,d\nnear,5,5,10,20\nfar,2,8,4,16\n', encoding='utf-8')
        output = self._call('mh', strata=str(strata), out=str(self.root / 'mh'))
        self.assertIn('Mantel-Haenszel odds ratio: 1.5396', output)
        report = pd.read_csv(self.root / 'mh' / 'mh.csv').set_index('statistic')
        self.assertAlmostEqual(report.loc['mh_odds_ratio', 'value'], 1.5396, delta=1e-4)
        per_stratum = pd.read_csv(self.root / 'mh' / 'strata.csv')
        assert_allclose(per_stratum['crude_odds_ratio'], [2.0, 1.0])

        strata.write_text('a,b,c,d\n3,0,0,4\n', encoding='utf-8')
        output = self._call('mh', strata=str(strata), out=str(self.root / 'mh0'))
        self.assertIn('Mantel-Haenszel odds ratio: undefined', output)


# ── Recovery ─────────────────────────────────────────────────────────────────

@skipUnless(settings.CRASHSAFE_SLOW_TESTS, 'set CRASHSAFE_SLOW_TESTS to run the recovery harness')
class RecoveryTests(TestCase):
    """RPNB-L fits on five synthetic inventories recover the generating truth."""

    def test_fixed_coefficients_are_recovered(self):
        mcmc = McmcConfig(n_chains=3, n_iter=20000, burn_in=8000, latent_thin=10)
        converged, covered = [], []
        for replicate in range(5):
            cfg = GeneratorConfig(seed=500 + replicate)
            records, truth = synthesize(cfg)
            config = ModelConfig(
                family='RPNB-L', formula=rpnbl_formula(), standardize=True,
                prior_overrides={}, mcmc=replace(mcmc, seed=10 * replicate),
            )
            with tempfile.TemporaryDirectory() as tmp:
                result = FitService(config, threads=3).fit_records(records, Path(tmp) / 'fit')
            columns = list(truth.columns)
            coverage = truth_coverage(result.summary, {c: truth.coefficients[c] for c in columns})
            converged.append(all(result.summary.get(c).converged(1.1) for c in columns))
            covered.append(coverage.set_index('parameter')['covered'])

        self.assertGreaterEqual(sum(converged), 4)
        hits = pd.concat(covered, axis=1).sum(axis=1)
        self.assertTrue((hits >= 4).all(), hits[hits < 4].to_dict())
