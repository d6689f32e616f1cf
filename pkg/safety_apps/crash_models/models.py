from django.db import models


class RunManifest(models.Model):
    """
    Audit trail for every batch command run.

    One row per invocation; rows are written when the command starts and
    closed once when it finishes. They are never edited afterwards.
    """

    STATUS_CHOICES = [
        ('started', 'Started'),
        ('completed', 'Completed'),
        ('gate_failed', 'Convergence Gate Failed'),
        ('failed', 'Failed'),
    ]

    command = models.CharField(max_length=40)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='started')

    config_path = models.CharField(max_length=500, blank=True)
    input_paths = models.JSONField(default=list)
    output_dir = models.CharField(max_length=500, blank=True)
    seed = models.BigIntegerField(null=True, blank=True)

    # Artifact format versions written or read by the run
    artifact_versions = models.JSONField(default=dict)

    # Per-parameter gate outcomes, e.g. {"ln_aadt": {"bgr": true, "mc_error": true}}
    convergence_flags = models.JSONField(default=dict)

    # Timing
    started_at = models.DateTimeField(auto_now_add=True)
    completed_at = models.DateTimeField(null=True, blank=True)
    duration_seconds = models.FloatField(null=True, blank=True)

    # Error tracking
    error_message = models.TextField(blank=True)

    def save(self, *args, **kwargs):
        if self.completed_at and self.started_at:
            self.duration_seconds = (
                self.completed_at - self.started_at
            ).total_seconds()
        super().save(*args, **kwargs)

    def to_record(self) -> dict:
        return {
            'id': self.id,
            'command': self.command,
            'status': self.status,
            'config_path': self.config_path,
            'input_paths': self.input_paths,
            'output_dir': self.output_dir,
            'seed': self.seed,
            'artifact_versions': self.artifact_versions,
            'convergence_flags': self.convergence_flags,
            'started_at': self.started_at.isoformat() if self.started_at else None,
            'completed_at': self.completed_at.isoformat() if self.completed_at else None,
            'duration_seconds': self.duration_seconds,
            'error_message': self.error_message,
        }

    def __str__(self):
        return f"RunManifest [{self.command}] {self.status} @ {self.started_at}"

    class Meta:
        db_table = 'run_manifests'
        ordering = ['-started_at']
