"""
Best-effort persistence of command runs as ExperimentRun rows.

A missing or unmigrated database never fails a run: errors are logged and
recording is switched off for the rest of the invocation.
"""

import logging
from pathlib import Path
from typing import Optional

from django.conf import settings
from django.db import DatabaseError

from ..models import ExperimentRun, RunArtifact
from .experiment import RunManifest

logger = logging.getLogger(__name__)


class RunRecorder:
    def __init__(self, manifest: RunManifest, output_dir: Path, enabled: Optional[bool] = None):
        self.manifest = manifest
        self.output_dir = output_dir
        self.enabled = settings.DEPO_LAB_RECORD_RUNS if enabled is None else enabled
        self.run: Optional[ExperimentRun] = None
        self.log_lines: list[str] = []

    def _guard(self, action, *args):
        if not self.enabled:
            return None
        try:
            return action(*args)
        except DatabaseError:
            logger.warning("Run recording disabled: database unavailable", exc_info=True)
            self.enabled = False
            return None

    def note(self, line: str) -> None:
        self.log_lines.append(line)

    def start(self) -> None:
        def _create():
            self.run = ExperimentRun.objects.create(
                command=self.manifest.command,
                config_hash=self.manifest.config_hash,
                config=self.manifest.config,
                seed=self.manifest.seed,
                version=self.manifest.version,
                output_dir=str(self.output_dir),
                status=ExperimentRun.STATUS_RUNNING,
                log="Starting run...\n",
            )

        self._guard(_create)

    def finish(self, verdict: Optional[bool] = None) -> None:
        if self.run is None:
            return

        def _update():
            self.run.status = ExperimentRun.STATUS_DONE
            if verdict is not None:
                self.run.verdict = "pass" if verdict else "fail"
            self.run.log = "\n".join(self.log_lines)
            self.run.save()
            RunArtifact.objects.bulk_create(
                [RunArtifact(run=self.run, path=a["path"], kind=a["kind"]) for a in self.manifest.artifacts]
            )

        self._guard(_update)

    def fail(self, exc: BaseException) -> None:
        if self.run is None:
            return

        def _update():
            self.run.status = ExperimentRun.STATUS_FAILED
            self.run.log = "\n".join(self.log_lines + [f"Run failed: {exc}"])
            self.run.save()

        self._guard(_update)
