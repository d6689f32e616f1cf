"""
Management command: python manage.py mh --strata strata.csv --out reports/mh

Options:
  --strata PATH      CSV with a, b, c, d per stratum (optional ``stratum`` label)

Writes mh.csv (pooled odds ratio, risk ratio, CI and CMH p-value) and
strata.csv (per-stratum crude odds ratios).
"""

from pathlib import Path

import pandas as pd

from safety_apps.run_manifest import ManifestCommand, write_frame
from safety_apps.site_screening.screening import crude_odds_ratio, load_strata, mh_analysis


def _fmt(value, digits=4) -> str:
    return 'undefined' if value is None else f'{value:.{digits}f}'


class Command(ManifestCommand):
    help = 'Mantel-Haenszel pooled odds ratio over 2x2 strata'
    takes_seed = False

    def add_command_arguments(self, parser):
        parser.add_argument('--strata', required=True, help='Strata CSV')

    def input_paths(self, options) -> list:
        return [options['strata']]

    def run_command(self, run, options):
        tables = load_strata(options['strata'])
        result = mh_analysis(tables)
        out_dir = Path(options['out'])
        write_frame(out_dir / 'mh.csv', result.to_frame())
        write_frame(out_dir / 'strata.csv', pd.DataFrame([
            {'stratum': t.label, 'a': t.a, 'b': t.b, 'c': t.c, 'd': t.d, 'n': t.n,
             'crude_odds_ratio': crude_odds_ratio(t)}
            for t in tables
        ]))

        self.stdout.write(f'Mantel-Haenszel odds ratio: {_fmt(result.odds_ratio)}')
        self.stdout.write(f'Mantel-Haenszel risk ratio: {_fmt(result.risk_ratio)}')
        if result.ci_lower is not None:
            self.stdout.write(f'95% CI: {_fmt(result.ci_lower)} - {_fmt(result.ci_upper)}')
        if result.p_value is not None:
            self.stdout.write(f'CMH test p-value: {_fmt(result.p_value)}')
        self.stdout.write(self.style.SUCCESS(f'Done. {result.n_strata} strata pooled; report in {out_dir}'))
