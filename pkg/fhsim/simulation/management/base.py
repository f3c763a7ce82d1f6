"""
Shared plumbing of the fhsim management commands.
"""

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from core.logging_config import level_from_verbosity, setup_logging

from ..exceptions import FhsimError


class FhsimCommand(BaseCommand):
    """
    Base command: configures logging from ``--verbosity`` and turns library
    errors into ``CommandError`` so the process exits nonzero.
    """

    def handle(self, *args, **options):
        self.logger = setup_logging(
            level=level_from_verbosity(options.get('verbosity', 1)),
            log_to_file=getattr(settings, 'FHSIM_LOG_TO_FILE', False),
            log_dir=getattr(settings, 'FHSIM_LOG_DIR', 'logs'),
        )
        try:
            return self.run_command(**options)
        except FhsimError as e:
            self.logger.error(f"❌ {e}")
            raise CommandError(str(e)) from e

    def run_command(self, **options):
        raise NotImplementedError
