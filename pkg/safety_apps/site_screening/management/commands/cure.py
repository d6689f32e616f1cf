"""
Management command: python manage.py cure --draws runs/rpnbl --covariate aadt --out reports/cure

Options:
  --draws DIR         Directory with chain_*.draws from ``fit``
  --data PATH         Site CSV the model was fitted on (default: path stored in the draws)
  --covariate NAME    A numeric site field (aadt, avg_on, ...) or a design column (ln_aadt, ...)

Writes cure_<covariate>.csv and cure_<covariate>.svg.
"""

from pathlib import Path

from safety_apps.crash_models.draws_store import FORMAT_VERSION, load_fit
from safety_apps.crash_models.inference import population_predictions
from safety_apps.crash_models.services import design_for
from safety_apps.run_manifest import ManifestCommand
from safety_apps.site_data.records import CONTINUOUS_FIELDS, INTEGER_FIELDS, load_sites
from safety_apps.site_screening.evaluation import cure, write_cure_files


class Command(ManifestCommand):
    help = 'Cumulative residual plot of a saved fit against one covariate'
    takes_seed = False

    def add_command_arguments(self, parser):
        parser.add_argument('--draws', required=True, help='Directory with the saved chains')
        parser.add_argument('--data', help='Site CSV (default: the file the fit was run on)')
        parser.add_argument('--covariate', required=True, help='Site field or design column')

    def input_paths(self, options) -> list:
        return [options['draws'], options.get('data')]

    def run_command(self, run, options):
        chains = load_fit(options['draws'])
        data_path = options['data'] or chains[0].meta.data_path
        if not data_path:
            raise ValueError("no --data given and the draws do not record their data file")
        records = load_sites(data_path)
        design, y = design_for(chains, records)
        run.seed = chains[0].seed
        run.artifact_versions = {'draws': FORMAT_VERSION}

        name = options['covariate']
        if name in CONTINUOUS_FIELDS + INTEGER_FIELDS:
            by_id = {r.site_id: r for r in records}
            values = [float(getattr(by_id[sid], name)) for sid in design.site_ids]
        elif name in design.columns:
            values = design.column(name)
        else:
            raise ValueError(
                f"unknown covariate {name!r}; use a numeric site field "
                f"{list(CONTINUOUS_FIELDS + INTEGER_FIELDS)} or a design column {list(design.columns)}"
            )

        predicted = population_predictions(chains, design)
        curve = cure(y, predicted, values, site_ids=design.site_ids, name=name)
        paths = write_cure_files(curve, Path(options['out']))

        self.stdout.write(
            f'CURE over {name}: terminal value {curve.cumulative[-1]:.4f}, '
            f'{curve.fraction_outside():.1%} of points outside the 95% band'
        )
        self.stdout.write(self.style.SUCCESS(f"Done. {', '.join(p.name for p in paths)} written to {options['out']}"))
