"""
Management command: python manage.py psi --draws runs/rpnbl --out reports/psi

Options:
  --draws DIR        Directory with chain_*.draws from ``fit``
  --data PATH        Site CSV the model was fitted on (default: path stored in the draws)
  --corridors PATH   CSV of site_id,corridor; adds corridors.csv

Writes psi.csv: every fitted site ranked by PSI with its zone
(hotspot / normal / cold).
"""

from pathlib import Path

from safety_apps.crash_models.draws_store import FORMAT_VERSION, load_fit
from safety_apps.crash_models.services import design_for
from safety_apps.run_manifest import ManifestCommand, write_frame
from safety_apps.site_data.records import load_sites
from safety_apps.site_screening.screening import (
    HOTSPOT,
    classify,
    corridor_aggregate,
    load_corridors,
    psi_table,
    results_frame,
)


class Command(ManifestCommand):
    help = 'Rank fitted sites by potential for safety improvement'
    takes_seed = False

    def add_command_arguments(self, parser):
        parser.add_argument('--draws', required=True, help='Directory with the saved chains')
        parser.add_argument('--data', help='Site CSV (default: the file the fit was run on)')
        parser.add_argument('--corridors', help='CSV mapping site_id to corridor')

    def input_paths(self, options) -> list:
        return [options['draws'], options.get('data'), options.get('corridors')]

    def run_command(self, run, options):
        chains = load_fit(options['draws'])
        data_path = options['data'] or chains[0].meta.data_path
        if not data_path:
            raise ValueError("no --data given and the draws do not record their data file")
        design, _ = design_for(chains, load_sites(data_path))
        run.seed = chains[0].seed
        run.artifact_versions = {'draws': FORMAT_VERSION}

        results = classify(psi_table(chains, design))
        out_dir = Path(options['out'])
        ranked = results_frame(results)
        write_frame(out_dir / 'psi.csv', ranked)

        hotspots = ranked[ranked['zone'] == HOTSPOT]
        self.stdout.write(f'{len(hotspots)} hotspot(s) among {len(ranked)} sites')
        self.stdout.write(hotspots.to_string(index=False, float_format=lambda v: f'{v:.4f}'))

        if options['corridors']:
            report = corridor_aggregate(results, load_corridors(options['corridors']))
            write_frame(out_dir / 'corridors.csv', report.table)
            self.stdout.write(report.table.to_string(index=False, float_format=lambda v: f'{v:.4f}'))
            if report.unassigned:
                self.stdout.write(self.style.WARNING(
                    f'{len(report.unassigned)} site(s) without a corridor, e.g. {", ".join(report.unassigned[:5])}'
                ))

        self.stdout.write(self.style.SUCCESS(f'Done. PSI ranking written to {out_dir}'))
