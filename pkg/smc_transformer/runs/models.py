# runs/models.py
from django.db import models


class ExperimentRun(models.Model):
    """One CLI invocation. The CSVs in output_dir are the results; this row only indexes them."""

    class Command(models.TextChoices):
        GENERATE = 'generate', 'Generate'
        TRAIN = 'train', 'Train'
        EVAL = 'eval', 'Evaluate'
        FORECAST = 'forecast', 'Forecast'
        DIAGNOSE = 'diagnose', 'Diagnose'

    class Status(models.TextChoices):
        RUNNING = 'running', 'Running'
        SUCCEEDED = 'succeeded', 'Succeeded'
        FAILED = 'failed', 'Failed'

    command = models.CharField(max_length=20, choices=Command.choices)
    seed = models.BigIntegerField()
    status = models.CharField(max_length=20, choices=Status.choices, default=Status.RUNNING)
    output_dir = models.CharField(max_length=500)

    # Fully resolved configuration, as written to manifest.json
    config = models.JSONField(default=dict)
    message = models.TextField(blank=True)

    # Timestamps
    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.command} seed={self.seed} ({self.status})"
