"""
Management command: python manage.py effects --draws runs/rpnbl --out reports/rpnbl

Options:
  --draws DIR        Directory with chain_*.draws from ``fit``
  --data PATH        Site CSV the model was fitted on (default: path stored in the draws)
  --terms LABEL ...  Design columns to report (default: every non-intercept column)

Writes marginal_effects.csv (average effect and its 95% posterior interval)
and marginal_effects_by_site.csv.
"""

from pathlib import Path

import pandas as pd

from safety_apps.crash_models.draws_store import FORMAT_VERSION, load_fit
from safety_apps.crash_models.inference import marginal_effects
from safety_apps.crash_models.services import design_for
from safety_apps.run_manifest import ManifestCommand, write_frame
from safety_apps.site_data.records import load_sites


class Command(ManifestCommand):
    help = 'Average marginal effects of every formula term for a saved fit'
    takes_seed = False

    def add_command_arguments(self, parser):
        parser.add_argument('--draws', required=True, help='Directory with the saved chains')
        parser.add_argument('--data', help='Site CSV (default: the file the fit was run on)')
        parser.add_argument('--terms', nargs='*', help='Design column labels, e.g. ln_aadt area_mix')

    def input_paths(self, options) -> list:
        return [options['draws'], options.get('data')]

    def run_command(self, run, options):
        chains = load_fit(options['draws'])
        data_path = options['data'] or chains[0].meta.data_path
        if not data_path:
            raise ValueError("no --data given and the draws do not record their data file")
        design, _ = design_for(chains, load_sites(data_path))
        run.seed = chains[0].seed
        run.artifact_versions = {'draws': FORMAT_VERSION}

        effects = marginal_effects(chains, design, terms=options['terms'] or None)
        table = pd.DataFrame([e.to_dict() for e in effects])
        by_site = pd.DataFrame({'site_id': list(design.site_ids)})
        for effect in effects:
            by_site[effect.term] = effect.per_site

        out_dir = Path(options['out'])
        write_frame(out_dir / 'marginal_effects.csv', table)
        write_frame(out_dir / 'marginal_effects_by_site.csv', by_site)

        self.stdout.write(table.to_string(index=False, float_format=lambda v: f'{v:.4f}'))
        self.stdout.write(self.style.SUCCESS(f'Done. {len(effects)} marginal effect(s) written to {options["out"]}'))