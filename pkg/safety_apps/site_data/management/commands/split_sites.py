"""
Management command: python manage.py split_sites --data sites.csv --out data/split --seed 3

Options:
  --data PATH        Site CSV
  --fraction F       Training share in (0, 1) (default: 0.8, floor convention)
  --out DIR          Writes train.csv and test.csv
  --seed N           Partition seed (default: 0)
"""

from pathlib import Path

from safety_apps.run_manifest import ManifestCommand
from safety_apps.site_data.records import load_sites, write_sites
from safety_apps.site_screening.evaluation import train_test_split


class Command(ManifestCommand):
    help = 'Seeded train/test partition of a site file'
    seed_default = 0

    def add_command_arguments(self, parser):
        parser.add_argument('--data', required=True, help='Site CSV')
        parser.add_argument('--fraction', type=float, default=0.8, help='Training share (default: 0.8)')

    def input_paths(self, options) -> list:
        return [options['data']]

    def run_command(self, run, options):
        records = load_sites(options['data'])
        train, test = train_test_split(records, options['fraction'], seed=options['seed'])
        out_dir = Path(options['out'])
        write_sites(train, out_dir / 'train.csv')
        write_sites(test, out_dir / 'test.csv')
        self.stdout.write(self.style.SUCCESS(
            f'Done. {len(train)} training / {len(test)} test sites written to {out_dir}'
        ))
