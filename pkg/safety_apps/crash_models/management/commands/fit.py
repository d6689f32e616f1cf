"""
Management command: python manage.py fit --config model.yaml --data sites.csv --out runs/rpnbl

Options:
  --config PATH      YAML model config (family, formula, priors, mcmc)
  --data PATH        Site CSV
  --out DIR          Output directory for draws, summary.csv, fit.json
  --seed N           Overrides mcmc.seed; chain k uses seed + k
  --threads N        Parallel chains (default: CRASHSAFE_THREADS)
  --chains N         Overrides mcmc.n_chains (must be >= 2)
  --iters N          Overrides mcmc.n_iter
  --burnin N         Overrides mcmc.burn_in
  --no-gate          Exit 0 even when BGR or MC-error gates fail

Exit status: 0 success, 2 invalid config or data, 3 convergence gate failed.
"""

import logging

from django.conf import settings
from django.core.management.base import CommandError

from safety_apps.crash_models.draws_store import FORMAT_VERSION
from safety_apps.crash_models.schemas import load_model_config
from safety_apps.crash_models.services import FitService
from safety_apps.run_manifest import EXIT_GATE, ManifestCommand

logger = logging.getLogger(__name__)


class Command(ManifestCommand):
    help = 'Fit an NB-L / RPNB-L / NB-GE / RPNB-GE model by MCMC and save the draws'

    def add_command_arguments(self, parser):
        parser.add_argument('--config', required=True, help='YAML model config')
        parser.add_argument('--data', required=True, help='Site CSV')
        parser.add_argument(
            '--threads', type=int, default=None,
            help='Chains run in parallel (default: CRASHSAFE_THREADS)',
        )
        parser.add_argument('--chains', type=int, help='Number of chains (>= 2)')
        parser.add_argument('--iters', type=int, help='Iterations per chain')
        parser.add_argument('--burnin', type=int, help='Burn-in iterations per chain')
        parser.add_argument(
            '--no-gate', action='store_true',
            help='Do not fail the run when convergence gates fail',
        )

    def input_paths(self, options) -> list:
        return [options['data']]

    def run_command(self, run, options):
        config = load_model_config(options['config']).with_mcmc(
            n_chains=options['chains'],
            n_iter=options['iters'],
            burn_in=options['burnin'],
            seed=options['seed'],
            check_domain=True if settings.DEBUG else None,
        )
        threads = options['threads'] or getattr(settings, 'CRASHSAFE_THREADS', 1)
        run.seed = config.mcmc.seed
        run.artifact_versions = {'draws': FORMAT_VERSION}

        self.stdout.write(
            f'Fitting {config.family}: {config.mcmc.n_chains} chains x {config.mcmc.n_iter} '
            f'iterations (burn-in {config.mcmc.burn_in}), seed {config.mcmc.seed}, {threads} thread(s)'
        )
        service = FitService(config, threads=threads)
        result = service.fit(options['data'], options['out'])
        run.convergence_flags = result.summary.convergence_flags(service.bgr_max)

        frame = result.summary.to_frame()
        self.stdout.write(frame.to_string(index=False, float_format=lambda v: f'{v:.4f}'))
        d = result.dic
        self.stdout.write(f'DIC {d.dic:.2f} (Dbar {d.dbar:.2f}, pD {d.pd:.2f})')

        if result.gate_failures:
            message = f"convergence gates failed for: {', '.join(result.gate_failures)}"
            if not options['no_gate']:
                raise CommandError(message, returncode=EXIT_GATE)
            self.stdout.write(self.style.WARNING(f'{message} (ignored: --no-gate)'))
            return
        self.stdout.write(self.style.SUCCESS(
            f'Done. {len(result.paths)} chain file(s) in {options["out"]}; all gates passed.'
        ))
