from django.db import models


class RunStatus(models.TextChoices):
    PENDING = 'pending', 'Pending'
    RUNNING = 'running', 'Running'
    COMPLETED = 'completed', 'Completed'
    FAILED = 'failed', 'Failed'


class ExperimentRun(models.Model):
    """One invocation of the ``run`` command"""
    name = models.CharField(max_length=200)
    fingerprint = models.CharField(max_length=32, db_index=True)
    config_path = models.CharField(max_length=500, blank=True)
    output_dir = models.CharField(max_length=500)
    status = models.CharField(
        max_length=20,
        choices=RunStatus.choices,
        default=RunStatus.PENDING
    )
    seeds = models.JSONField(default=list)
    cell_count = models.IntegerField(default=0)
    jobs = models.IntegerField(default=1)
    last_error = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.name} [{self.fingerprint}] ({self.status})"
