"""
Bookkeeping of ``run`` invocations in the ``ExperimentRun`` table.

The registry is optional: when the database is missing or unmigrated every
call logs a warning and returns None, and the experiment carries on.
"""

from typing import Optional

from django.db import DatabaseError
from django.utils import timezone

from core.logging_config import get_logger

from .experiment_config import ExperimentConfig
from .models import ExperimentRun, RunStatus

logger = get_logger(__name__)


def record_start(config: ExperimentConfig, jobs: int) -> Optional[ExperimentRun]:
    try:
        run = ExperimentRun.objects.create(
            name=config.name,
            fingerprint=config.fingerprint,
            config_path=str(config.source or ''),
            output_dir=str(config.output_dir),
            status=RunStatus.RUNNING,
            seeds=list(config.seeds),
            cell_count=len(config.cells()),
            jobs=jobs,
        )
    except DatabaseError as e:
        logger.warning(f"⚠️ Run registry unavailable ({e}); run 'python manage.py migrate' to enable it")
        return None
    logger.debug(f"🔍 Registered run #{run.pk} for {config.name}")
    return run


def record_finish(run: Optional[ExperimentRun], status: str, error: str = '') -> None:
    if run is None:
        return
    run.status = status
    run.last_error = error
    run.finished_at = timezone.now()
    try:
        run.save(update_fields=['status', 'last_error', 'finished_at', 'updated_at'])
    except DatabaseError as e:
        logger.warning(f"⚠️ Could not update run #{run.pk}: {e}")


def previous_runs(fingerprint: str):
    """Completed runs of the same configuration, newest first"""
    try:
        return list(ExperimentRun.objects.filter(fingerprint=fingerprint, status=RunStatus.COMPLETED))
    except DatabaseError:
        return []
