from django.db import models


class ExperimentRun(models.Model):
    """
    One invocation of a lab command: its configuration, output directory and
    outcome.
    """

    STATUS_PENDING = "PENDING"
    STATUS_RUNNING = "RUNNING"
    STATUS_DONE = "DONE"
    STATUS_FAILED = "FAILED"

    STATUS_CHOICES = [
        (STATUS_PENDING, "Pending"),
        (STATUS_RUNNING, "Running"),
        (STATUS_DONE, "Done"),
        (STATUS_FAILED, "Failed"),
    ]

    command = models.CharField(max_length=32)
    config_hash = models.CharField(max_length=64, db_index=True)
    config = models.JSONField(default=dict)
    seed = models.BigIntegerField()
    version = models.CharField(max_length=32)
    output_dir = models.CharField(max_length=1024, blank=True)
    status = models.CharField(
        max_length=20, choices=STATUS_CHOICES, default=STATUS_PENDING
    )
    # Empty until a check-producing command finishes; "pass" or "fail" after.
    verdict = models.CharField(max_length=8, blank=True)
    log = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    def __str__(self) -> str:
        return f"{self.command} {self.config_hash[:12]}"


class RunArtifact(models.Model):
    """A file written by a run, relative to its output directory."""

    run = models.ForeignKey(
        ExperimentRun,
        on_delete=models.CASCADE,
        related_name="artifacts",
    )
    path = models.CharField(max_length=1024)
    kind = models.CharField(max_length=32)
    created_at = models.DateTimeField(auto_now_add=True)

    def __str__(self) -> str:
        return self.path
