"""
Management command: python manage.py evaluate --draws runs/train --test data/split/test.csv --out reports/eval

Options:
  --draws DIR        Directory with chain_*.draws, fitted on the training sites
  --train PATH       Training CSV (default: path stored in the draws)
  --test PATH        Held-out site CSV

Writes metrics.csv (MAE and RMSE on the training and test sets) and
predictions.csv for the test sites.
"""

from pathlib import Path

import pandas as pd

from safety_apps.crash_models.draws_store import FORMAT_VERSION, load_fit
from safety_apps.crash_models.inference import population_predictions
from safety_apps.crash_models.services import design_for
from safety_apps.run_manifest import ManifestCommand, write_frame
from safety_apps.site_data.records import load_sites
from safety_apps.site_screening.evaluation import mae, rmse


class Command(ManifestCommand):
    help = 'Out-of-sample MAE/RMSE of a saved fit'
    takes_seed = False

    def add_command_arguments(self, parser):
        parser.add_argument('--draws', required=True, help='Directory with the saved chains')
        parser.add_argument('--train', help='Training site CSV (default: the file the fit was run on)')
        parser.add_argument('--test', required=True, help='Held-out site CSV')

    def input_paths(self, options) -> list:
        return [options['draws'], options.get('train'), options['test']]

    def run_command(self, run, options):
        chains = load_fit(options['draws'])
        train_path = options['train'] or chains[0].meta.data_path
        if not train_path:
            raise ValueError("no --train given and the draws do not record their data file")
        run.seed = chains[0].seed
        run.artifact_versions = {'draws': FORMAT_VERSION}

        train_design, train_y = design_for(chains, load_sites(train_path))
        test_records = load_sites(options['test'])
        overlap = set(train_design.site_ids) & {r.site_id for r in test_records}
        if overlap:
            raise ValueError(f"{len(overlap)} test site(s) were part of the fit, e.g. {sorted(overlap)[:3]}")
        test_design, test_y = design_for(chains, test_records, training=False)

        train_predicted = population_predictions(chains, train_design)
        test_predicted = population_predictions(chains, test_design)
        metrics = pd.DataFrame([
            {'set': split, 'n_sites': len(y), 'mae': mae(y, predicted), 'rmse': rmse(y, predicted)}
            for split, y, predicted in (
                ('train', train_y, train_predicted),
                ('test', test_y, test_predicted),
            )
        ])

        out_dir = Path(options['out'])
        write_frame(out_dir / 'metrics.csv', metrics)
        write_frame(out_dir / 'predictions.csv', pd.DataFrame({
            'site_id': list(test_design.site_ids), 'observed': test_y, 'predicted': test_predicted,
        }))

        self.stdout.write(metrics.to_string(index=False, float_format=lambda v: f'{v:.4f}'))
        self.stdout.write(self.style.SUCCESS(f'Done. Metrics written to {out_dir}'))
