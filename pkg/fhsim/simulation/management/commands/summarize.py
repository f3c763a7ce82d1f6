"""
Django management command that re-derives summary.json from results.csv.
"""

import json
from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from simulation.experiment import RESULTS_FILE, SUMMARY_FILE
from simulation.experiment_config import load_config
from simulation.management.base import FhsimCommand
from simulation.results import read_results_csv, summarize, summary_table, write_summary_json


def _previous_metadata(path: Path) -> dict:
    """Name and fingerprint kept from an earlier summary, if there is one"""
    try:
        document = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, ValueError):
        return {}
    return {k: v for k, v in document.items() if k != 'rows'}


class Command(FhsimCommand):
    help = 'Rebuild summary.json from an experiment results.csv'

    def add_arguments(self, parser):
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument(
            '--config',
            help='Experiment TOML file whose output directory to summarize'
        )
        source.add_argument(
            '--dir',
            help='Output directory holding results.csv'
        )

    def run_command(self, **options):
        metadata = {}
        if options['config']:
            config = load_config(options['config'], getattr(settings, 'FHSIM_RESULTS_ROOT', None))
            directory = Path(config.output_dir)
            metadata = {'name': config.name, 'fingerprint': config.fingerprint}
        else:
            directory = Path(options['dir'])
            metadata = _previous_metadata(directory / SUMMARY_FILE)

        results_path = directory / RESULTS_FILE
        if not results_path.exists():
            raise CommandError(f"{results_path} does not exist")
        summary = summarize(read_results_csv(results_path))
        write_summary_json(summary, directory / SUMMARY_FILE, metadata=metadata)

        table = summary_table(summary)
        if not table.empty:
            self.stdout.write(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
        self.stdout.write(self.style.SUCCESS(f"✅ {directory / SUMMARY_FILE} rebuilt from {len(summary)} cells"))
