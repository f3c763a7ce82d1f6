"""
Django management command that runs a configured experiment grid.
"""

import psutil
from django.conf import settings
from django.core.management.base import CommandError

from simulation.exceptions import FhsimError
from simulation.experiment import RESULTS_FILE, ExperimentRunner
from simulation.experiment_config import load_config
from simulation.management.base import FhsimCommand
from simulation.models import RunStatus
from simulation.registry import previous_runs, record_finish, record_start
from simulation.results import summary_table


def default_jobs() -> int:
    configured = getattr(settings, 'FHSIM_DEFAULT_JOBS', None)
    if configured:
        return int(configured)
    return psutil.cpu_count(logical=False) or 1


class Command(FhsimCommand):
    help = 'Run a federated learning experiment from a TOML config'

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            required=True,
            help='Experiment TOML file'
        )
        parser.add_argument(
            '--jobs',
            type=int,
            default=None,
            help='Worker threads (default: physical cores)'
        )
        parser.add_argument(
            '--force',
            action='store_true',
            help='Overwrite results in an existing output directory'
        )
        parser.add_argument(
            '--dry-run',
            action='store_true',
            help='Print the resolved plan without training'
        )

    def run_command(self, **options):
        config = load_config(options['config'], getattr(settings, 'FHSIM_RESULTS_ROOT', None))
        jobs = options['jobs'] or default_jobs()
        if jobs < 1:
            raise CommandError("--jobs must be at least 1")

        if options['dry_run']:
            runner = ExperimentRunner(config, jobs=jobs, write_outputs=False)
            for line in runner.describe():
                self.stdout.write(line)
            return

        if (config.output_dir / RESULTS_FILE).exists() and not options['force']:
            raise CommandError(f"{config.output_dir} already holds results; use --force to overwrite them")

        self.stdout.write(f"🚀 Running {config.name} ({config.fingerprint}) with {jobs} jobs...")
        earlier = previous_runs(config.fingerprint)
        if earlier:
            self.stdout.write(f"📋 This configuration already completed {len(earlier)} time(s), last on "
                              f"{earlier[0].finished_at or earlier[0].created_at:%Y-%m-%d %H:%M}")
        run = record_start(config, jobs)
        try:
            result = ExperimentRunner(config, jobs=jobs).run()
        except FhsimError as e:
            record_finish(run, RunStatus.FAILED, str(e))
            raise
        except Exception as e:
            record_finish(run, RunStatus.FAILED, repr(e))
            raise
        record_finish(run, RunStatus.COMPLETED)

        table = summary_table(result.summary)
        if not table.empty:
            self.stdout.write(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
        self.stdout.write(self.style.SUCCESS(f"✅ Results written to {config.output_dir}"))
