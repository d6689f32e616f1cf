import tempfile
from dataclasses import replace
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase
from numpy.testing import assert_allclose

from safety_apps.crash_models.model_spec import build_design, standardize
from safety_apps.crash_models.models import RunManifest
from safety_apps.crash_models.schemas import load_generator_config
from safety_apps.run_manifest import EXIT_VALIDATION

from .generator import (
    RPNBL_ALPHA,
    RPNBL_COEFFICIENTS,
    RPNBL_THETA,
    GeneratorConfig,
    read_truth,
    rpnbl_formula,
    synthesize,
    truth_path,
    write_truth,
)
from .records import (
    FIELD_NAMES,
    INVENTORY_DESCRIPTIVES,
    SiteDataError,
    load_sites,
    records_frame,
    validate_descriptives,
    write_sites,
)


class TempDirMixin:

    def setUp(self):
        super().setUp()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)


# ── Records ──────────────────────────────────────────────────────────────────

class SiteRecordTests(TestCase):

    def setUp(self):
        self.record = synthesize(GeneratorConfig(n_sites=10, seed=1))[0][0]

    def test_generated_record_is_valid(self):
        self.assertEqual(self.record.problems(), [])

    def test_severity_ordering(self):
        bad = replace(self.record, kabco=1, kabc=2, kab=0)
        self.assertTrue(any('severity ordering' in p for p in bad.problems()))

    def test_domain_checks(self):
        bad = replace(self.record, aadt=0.0, speed_limit=70, area='rural')
        problems = ' | '.join(bad.problems())
        self.assertIn('aadt must be > 0', problems)
        self.assertIn('speed_limit', problems)
        self.assertIn("'rural'", problems)

    def test_count_by_response(self):
        record = replace(self.record, kabco=4, kabc=2, kab=1)
        self.assertEqual(record.count('kabc'), 2)
        with self.assertRaises(ValueError):
            record.count('fatal')


class LoadSitesTests(TempDirMixin, TestCase):

    def setUp(self):
        super().setUp()
        self.records = synthesize(GeneratorConfig(n_sites=25, seed=2))[0]
        self.path = write_sites(self.records, self.root / 'sites.csv')

    def test_written_file_loads_back(self):
        self.assertEqual(load_sites(self.path), self.records)
        header = self.path.read_text(encoding='utf-8').splitlines()[0]
        self.assertEqual(header.split(','), list(FIELD_NAMES))

    def test_every_bad_row_is_reported(self):
        frame = records_frame(self.records).astype(object)
        frame.loc[1, 'kab'] = 99
        frame.loc[4, 'aadt'] = 'n/a'
        frame.loc[7, 'lighting'] = 'dim'
        frame.to_csv(self.path, index=False)
        with self.assertRaises(SiteDataError) as ctx:
            load_sites(self.path)
        lines = sorted({line for line, _ in ctx.exception.errors})
        self.assertEqual(lines, [3, 6, 9])
        self.assertIsInstance(ctx.exception, ValueError)

    def test_labels_are_case_insensitive(self):
        frame = records_frame(self.records)
        frame['cover'] = frame['cover'].str.upper()
        frame.to_csv(self.path, index=False)
        self.assertEqual(load_sites(self.path), self.records)

    def test_duplicate_site_ids(self):
        frame = records_frame(self.records)
        frame.loc[3, 'site_id'] = frame.loc[2, 'site_id']
        frame.to_csv(self.path, index=False)
        with self.assertRaises(SiteDataError) as ctx:
            load_sites(self.path)
        self.assertIn('duplicate', str(ctx.exception))

    def test_missing_column(self):
        records_frame(self.records).drop(columns=['cover']).to_csv(self.path, index=False)
        with self.assertRaises(SiteDataError) as ctx:
            load_sites(self.path)
        self.assertIn('cover', str(ctx.exception))

    def test_missing_file(self):
        with self.assertRaises(ValueError):
            load_sites(self.root / 'absent.csv')


class DescriptivesTests(TestCase):

    def test_columns_and_flags(self):
        records = synthesize(GeneratorConfig(n_sites=200, seed=3))[0]
        shifted = [replace(r, stop_count=r.stop_count + 10) for r in records]
        with self.assertLogs('safety_apps.site_data.records', 'WARNING'):
            report = validate_descriptives(shifted, reference=INVENTORY_DESCRIPTIVES)
        row = report.set_index('variable').loc['stop_count']
        self.assertTrue(row['flagged'])
        self.assertEqual(row['n'], 200)
        self.assertEqual(list(report.columns), ['variable', 'n', 'min', 'max', 'mean', 'sd', 'ref_mean', 'flagged'])

    def test_needs_records(self):
        with self.assertRaises(ValueError):
            validate_descriptives([])


# ── Generator ────────────────────────────────────────────────────────────────

class GeneratorTests(TempDirMixin, TestCase):
    """Synthetic inventories with the published RPNB-L truth."""

    def test_same_seed_same_dataset(self):
        first, _ = synthesize(GeneratorConfig(n_sites=50, seed=9))
        second, _ = synthesize(GeneratorConfig(n_sites=50, seed=9))
        third, _ = synthesize(GeneratorConfig(n_sites=50, seed=10))
        self.assertEqual(first, second)
        self.assertNotEqual(first, third)

    def test_records_satisfy_the_schema(self):
        records, _ = synthesize(GeneratorConfig(n_sites=300, seed=4))
        self.assertEqual([r.problems() for r in records if r.problems()], [])
        self.assertEqual(records[0].site_id, 'BS0001')
        self.assertTrue(all(r.kab <= r.kabc <= r.kabco for r in records))

    def test_default_truth(self):
        cfg = GeneratorConfig()
        self.assertEqual(cfg.n_sites, 596)
        self.assertEqual(cfg.coefficients['ln_aadt'], 0.345)
        _, truth = synthesize(replace(cfg, n_sites=100))
        values = truth.reporting_values()
        self.assertAlmostEqual(values['theta'], RPNBL_THETA)
        self.assertAlmostEqual(values['alpha'], RPNBL_ALPHA)
        self.assertEqual(truth.coefficients_standardized, RPNBL_COEFFICIENTS)

    def test_truth_on_the_original_scale(self):
        records, truth = synthesize(GeneratorConfig(n_sites=150, seed=6))
        raw = build_design(records, rpnbl_formula())
        scaled = standardize(raw)
        b_star = np.array([truth.coefficients_standardized[c] for c in raw.columns])
        b = np.array([truth.coefficients[c] for c in raw.columns])
        assert_allclose(raw.values @ b, scaled.values @ b_star, rtol=1e-10, atol=1e-10)
        sd = scaled.column_stats['ln_aadt'].sd
        self.assertAlmostEqual(truth.random_sd['ln_aadt'], 0.042 / sd)

        standardized = truth.standardized_values()
        self.assertEqual(set(standardized), set(truth.reporting_values()) - {'phi', 'alpha', 'theta'})
        self.assertEqual(standardized['ln_aadt'], truth.coefficients_standardized['ln_aadt'])
        self.assertEqual(standardized['sd:ln_aadt'], 0.042)

    def test_observed_mean_matches_analytic_mean(self):
        records, truth = synthesize(GeneratorConfig(n_sites=5000, seed=7))
        counts = np.array([r.kabco for r in records], dtype=float)
        se = counts.std(ddof=1) / np.sqrt(counts.size)
        self.assertAlmostEqual(truth.observed_mean, counts.mean())
        self.assertLess(abs(truth.observed_mean - truth.expected_mean), 5 * se)

    def test_ge_mixing(self):
        cfg = GeneratorConfig(n_sites=40, seed=5, mixing='ge', ge_a=2.0, ge_b=1.5)
        _, truth = synthesize(cfg)
        self.assertEqual(truth.mixing_params, {'ge_a': 2.0, 'ge_b': 1.5})

    def test_invalid_configs(self):
        with self.assertRaises(ValueError):
            GeneratorConfig(n_sites=5)
        with self.assertRaises(ValueError):
            GeneratorConfig(mixing='gamma')
        coefficients = dict(RPNBL_COEFFICIENTS)
        coefficients.pop('area_mix')
        with self.assertRaises(ValueError) as ctx:
            GeneratorConfig(coefficients=coefficients)
        self.assertIn('area_mix', str(ctx.exception))
        with self.assertRaises(ValueError):
            GeneratorConfig(random_sd={'ln_aadt': 0.042})

    def test_truth_sidecar(self):
        records, truth = synthesize(GeneratorConfig(n_sites=30, seed=8))
        data_path = write_sites(records, self.root / 'toy.csv')
        sidecar = write_truth(truth, data_path)
        self.assertEqual(sidecar, truth_path(data_path))
        self.assertEqual(sidecar.name, 'toy.truth.json')
        restored = read_truth(sidecar)
        self.assertEqual(restored.coefficients, truth.coefficients)
        self.assertEqual(restored.column_stats, truth.column_stats)
        self.assertEqual(restored.config, truth.config)

    def test_generator_yaml(self):
        path = self.root / 'generator.yaml'
        path.write_text(
            'n_sites: 80\n'
            'seed: 3\n'
            'model:\n'
            '  response: kabco\n'
            '  terms:\n'
            '    - {name: aadt, transform: log}\n'
            '    - {name: area, transform: categorical, level: mix}\n'
            'truth:\n'
            '  mixing: lindley\n'
            '  theta: 2.0\n'
            '  alpha: 0.25\n'
            '  coefficients: {intercept: -0.5, ln_aadt: 0.3, area_mix: -0.2}\n',
            encoding='utf-8',
        )
        cfg = load_generator_config(path, seed=11)
        self.assertEqual((cfg.n_sites, cfg.seed), (80, 11))
        self.assertAlmostEqual(cfg.phi, 4.0)
        self.assertEqual(cfg.random_sd, {})

        path.write_text('n_sites: 80\ncolour: red\n', encoding='utf-8')
        with self.assertRaises(ValueError):
            load_generator_config(path)

    def test_shipped_generator_config_is_the_default_truth(self):
        cfg = load_generator_config(settings.BASE_DIR / 'configs' / 'generator.yaml')
        self.assertEqual(cfg.to_dict(), GeneratorConfig().to_dict())


# ── Commands ─────────────────────────────────────────────────────────────────

class SimulateCommandTests(TempDirMixin, TestCase):

    def test_writes_dataset_truth_and_descriptives(self):
        out = StringIO()
        call_command('simulate', out=str(self.root), seed=3, n_sites=60, stdout=out)
        records = load_sites(self.root / 'sites.csv')
        self.assertEqual(len(records), 60)
        truth = read_truth(self.root / 'sites.truth.json')
        self.assertEqual(truth.config['seed'], 3)
        descriptives = pd.read_csv(self.root / 'descriptives.csv')
        self.assertIn('aadt', set(descriptives['variable']))
        self.assertIn('Done.', out.getvalue())
        run = RunManifest.objects.get()
        self.assertEqual((run.command, run.status, run.seed), ('simulate', 'completed', 3))

    def test_reruns_are_byte_identical(self):
        call_command('simulate', out=str(self.root / 'a'), seed=5, n_sites=40, stdout=StringIO())
        call_command('simulate', out=str(self.root / 'b'), seed=5, n_sites=40, stdout=StringIO())
        for name in ('sites.csv', 'sites.truth.json'):
            self.assertEqual((self.root / 'a' / name).read_bytes(), (self.root / 'b' / name).read_bytes())

    def test_invalid_site_count(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('simulate', out=str(self.root), n_sites=3, stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)


class SplitSitesCommandTests(TempDirMixin, TestCase):

    def test_floor_split_is_a_partition(self):
        records = synthesize(GeneratorConfig(n_sites=53, seed=2))[0]
        data = write_sites(records, self.root / 'sites.csv')
        call_command('split_sites', data=str(data), out=str(self.root / 'split'), seed=4, stdout=StringIO())
        train = load_sites(self.root / 'split' / 'train.csv')
        test = load_sites(self.root / 'split' / 'test.csv')
        self.assertEqual((len(train), len(test)), (42, 11))
        ids = [r.site_id for r in train] + [r.site_id for r in test]
        self.assertEqual(sorted(ids), sorted(r.site_id for r in records))

    def test_fraction_must_be_inside_the_unit_interval(self):
        data = write_sites(synthesize(GeneratorConfig(n_sites=20, seed=2))[0], self.root / 'sites.csv')
        with self.assertRaises(CommandError) as ctx:
            call_command('split_sites', data=str(data), out=str(self.root), fraction=1.0, stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_VALIDATION)
