"""
Management command: python manage.py report --draws runs/rpnbl --out reports/rpnbl

Options:
  --draws DIR        Directory with chain_*.draws from ``fit``
  --data PATH        Site CSV the model was fitted on (default: path stored in the draws)
  --truth PATH       Generator truth sidecar; adds a coverage table
  --compare DIR ...  Further fits on the same data, ranked against this one by DIC

Writes summary.csv, dic.csv, retention.csv and, when requested,
truth_coverage.csv and comparison.csv.
"""

import logging
from pathlib import Path

import pandas as pd
from django.conf import settings

from safety_apps.crash_models.convergence import BGR_THRESHOLD
from safety_apps.crash_models.draws_store import FORMAT_VERSION, load_fit
from safety_apps.crash_models.inference import (
    compare_models,
    dic,
    retention_candidates,
    summarize,
    truth_coverage,
)
from safety_apps.crash_models.services import design_for
from safety_apps.run_manifest import ManifestCommand, write_frame
from safety_apps.site_data.generator import read_truth
from safety_apps.site_data.records import load_sites

logger = logging.getLogger(__name__)


class Command(ManifestCommand):
    help = 'Posterior summary, DIC and variable-retention report for a saved fit'
    takes_seed = False

    def add_command_arguments(self, parser):
        parser.add_argument('--draws', required=True, help='Directory with the saved chains')
        parser.add_argument('--data', help='Site CSV (default: the file the fit was run on)')
        parser.add_argument('--truth', help='Generator truth JSON for recovery checks')
        parser.add_argument('--compare', nargs='*', default=[], help='Other fit directories for DIC ranking')

    def input_paths(self, options) -> list:
        return [options['draws'], options.get('data'), options.get('truth'), *options.get('compare', [])]

    def run_command(self, run, options):
        out_dir = Path(options['out'])
        chains = load_fit(options['draws'])
        meta = chains[0].meta
        data_path = options['data'] or meta.data_path
        if not data_path:
            raise ValueError("no --data given and the draws do not record their data file")
        records = load_sites(data_path)
        bgr_max = getattr(settings, 'CONVERGENCE_BGR_MAX', BGR_THRESHOLD)
        run.seed = chains[0].seed
        run.artifact_versions = {'draws': FORMAT_VERSION}

        summary = summarize(chains)
        run.convergence_flags = summary.convergence_flags(bgr_max)
        write_frame(out_dir / 'summary.csv', summary.to_frame())

        design, y = design_for(chains, records)
        report = dic(chains, design, y)
        write_frame(out_dir / 'dic.csv', pd.DataFrame([report.to_dict()]))

        retention = retention_candidates(summary, meta.columns)
        write_frame(out_dir / 'retention.csv', pd.DataFrame({'drop_candidate': retention}))

        self.stdout.write(f'{meta.family} on {len(meta.site_ids)} sites, response {meta.response}')
        self.stdout.write(summary.to_frame().to_string(index=False, float_format=lambda v: f'{v:.4f}'))
        self.stdout.write(f'DIC {report.dic:.2f} (Dbar {report.dbar:.2f}, pD {report.pd:.2f})')
        if retention:
            self.stdout.write(f"95% CI covers zero (refit candidates): {', '.join(retention)}")

        if options['truth']:
            truth = read_truth(options['truth'])
            coverage = truth_coverage(summary, truth.reporting_values(), truth.standardized_values())
            write_frame(out_dir / 'truth_coverage.csv', coverage)
            self.stdout.write('Truth coverage (original covariate scale):')
            self.stdout.write(coverage.to_string(index=False, float_format=lambda v: f'{v:.4f}'))
            self.stdout.write(f"{int(coverage['covered'].sum())}/{len(coverage)} truth values inside their 95% CI")

        if options['compare']:
            reports = {f'{meta.family} ({options["draws"]})': report}
            for other_dir in options['compare']:
                other = load_fit(other_dir)
                other_design, other_y = design_for(other, records)
                reports[f'{other[0].meta.family} ({other_dir})'] = dic(other, other_design, other_y)
            comparison = compare_models(reports)
            write_frame(out_dir / 'comparison.csv', comparison)
            self.stdout.write(comparison.to_string(index=False, float_format=lambda v: f'{v:.2f}'))

        failures = summary.gate_failures(bgr_max)
        if failures:
            self.stdout.write(self.style.WARNING(f"Not converged: {', '.join(failures)}"))
        self.stdout.write(self.style.SUCCESS(f'Done. Report written to {out_dir}'))
