"""
Shared run plumbing for the batch commands.

Every command that produces artifacts goes through ``ManifestCommand``:

  1. A ``RunManifest`` row is opened with the command's inputs and seed.
  2. The command body runs (``run_command``).
  3. The row is closed exactly once (completed / gate_failed / failed) and the
     same record is appended as one JSON line to ``<out>/manifest.jsonl``.

Library ``ValueError``s become ``CommandError(returncode=2)``; commands raise
``CommandError(returncode=3)`` themselves for convergence-gate failures.

All artifact files are written atomically: a temp file in the destination
directory is renamed over the target, so readers never see partial output.
"""

import json
import logging
import os
import tempfile
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_GATE = 3

MANIFEST_FILE = 'manifest.jsonl'


# ── Atomic writes ────────────────────────────────────────────────────────────

def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f'.{path.name}.', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode('utf-8'))


def write_json(path, payload) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + '\n')


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise ValueError(f"missing artifact: {path}")
    with path.open(encoding='utf-8') as handle:
        return json.load(handle)


def write_frame(path, frame, float_format=None) -> Path:
    """CSV via pandas, written atomically."""
    text = frame.to_csv(index=False, lineterminator='\n', float_format=float_format)
    return atomic_write_text(path, text)


# ── Manifest lifecycle ───────────────────────────────────────────────────────

def append_manifest_line(out_dir, record: dict) -> Path:
    path = Path(out_dir) / MANIFEST_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('a', encoding='utf-8') as handle:
        handle.write(json.dumps(record, sort_keys=True) + '\n')
    return path


class ManifestCommand(BaseCommand):
    """
    Base class for artifact-producing commands.

    Subclasses implement ``run_command(run, options)`` and may override
    ``input_paths(options)``. ``--out`` is added here, and ``--seed`` for
    commands that draw random numbers (``takes_seed``).
    """

    takes_seed = True
    seed_default = None

    def add_arguments(self, parser):
        parser.add_argument('--out', required=True, help='Output directory for artifacts')
        if self.takes_seed:
            parser.add_argument(
                '--seed', type=int, default=self.seed_default,
                help='Seed for every random draw of the run',
            )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def input_paths(self, options) -> list:
        return []

    def run_command(self, run, options):
        raise NotImplementedError

    def handle(self, *args, **options):
        from safety_apps.crash_models.models import RunManifest

        out_dir = Path(options['out'])
        out_dir.mkdir(parents=True, exist_ok=True)
        run = RunManifest.objects.create(
            command=self._command_name(),
            config_path=str(options.get('config') or ''),
            input_paths=[str(p) for p in self.input_paths(options) if p],
            output_dir=str(out_dir),
            seed=options.get('seed'),
        )
        logger.info("=== %s run #%d started ===", run.command, run.id)

        try:
            self.run_command(run, options)
        except CommandError as exc:
            gate = getattr(exc, 'returncode', 1) == EXIT_GATE
            self._close(run, 'gate_failed' if gate else 'failed', str(exc))
            raise
        except ValueError as exc:
            self._close(run, 'failed', str(exc))
            raise CommandError(str(exc), returncode=EXIT_VALIDATION) from exc
        except Exception as exc:
            self._close(run, 'failed', str(exc))
            raise
        self._close(run, 'completed')

    def _close(self, run, status, error=''):
        run.status = status
        run.error_message = error
        run.completed_at = timezone.now()
        run.save()
        append_manifest_line(run.output_dir, run.to_record())
        logger.info("=== %s run #%d %s in %.1fs ===",
                    run.command, run.id, status, run.duration_seconds or 0.0)

    def _command_name(self) -> str:
        return self.__module__.rsplit('.', 1)[-1]
