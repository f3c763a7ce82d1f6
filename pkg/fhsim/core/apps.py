"""
Core app configuration: logging initialization.
"""

import logging

from django.apps import AppConfig
from django.conf import settings


class CoreConfig(AppConfig):
    """Core application configuration with logging setup"""

    default_auto_field = 'django.db.models.BigAutoField'
    name = 'core'

    def ready(self):
        """Attach the optional log file handler once Django has loaded settings"""
        if getattr(self, '_logging_initialized', False):
            return
        self._logging_initialized = True

        from .logging_config import setup_logging

        logger = setup_logging(
            level=logging.INFO,
            log_to_file=getattr(settings, 'FHSIM_LOG_TO_FILE', False),
            log_dir=getattr(settings, 'FHSIM_LOG_DIR', 'logs'),
        )
        logger.debug("🧭 fhsim logging initialized at Django startup")
