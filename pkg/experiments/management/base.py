"""
Shared plumbing for the lab's management commands: the common flags, config
resolution, run recording and the exit-code contract.

Exit codes: 0 when every check passes, 1 when a check fails, 2 for
configuration, IO and domain errors raised before a check could run.
"""

import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from django.core.management.base import BaseCommand, CommandError

from ..services.errors import ConfigError, DepositionLabError
from ..services.experiment import (
    Experiment,
    ExperimentConfig,
    RunManifest,
    build_config,
    load_config_file,
    output_directory,
)
from ..services.recording import RunRecorder

logger = logging.getLogger(__name__)

EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2


class ExperimentCommand(BaseCommand):
    """
    Base class for commands that run one experiment configuration.

    Subclasses implement ``run(experiment, context)`` and return None, or a
    bool verdict for commands that perform checks.
    """

    command_name = ""

    def add_arguments(self, parser):
        parser.add_argument("--config", help="JSON experiment configuration")
        parser.add_argument("--graph", help="Graph file or built-in name (P3, K4, C5, ...)")
        parser.add_argument("--driver", help="Driver: iid[:p0,p1,..], markov, layer:k=2,rho=0.3")
        parser.add_argument("--depth-bound", type=int, dest="depth_bound")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--horizon", type=int)
        parser.add_argument("--replicas", type=int)
        parser.add_argument("--threads", type=int)
        parser.add_argument("--out", help="Output directory")
        parser.add_argument("--plots", action="store_true", default=None, help="Write PNG figures")
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def config_overrides(self, options) -> dict:
        keys = ("graph", "driver", "depth_bound", "seed", "horizon", "replicas", "threads", "out", "plots")
        return {key: options.get(key) for key in keys}

    def load_config(self, options) -> ExperimentConfig:
        document = load_config_file(options["config"]) if options.get("config") else None
        return build_config(document, self.config_overrides(options))

    def handle(self, *args, **options):
        try:
            config = self.load_config(options)
            experiment = Experiment(config)
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=EXIT_CONFIG_ERROR) from exc

        out_dir = output_directory(config, self.command_name)
        out_dir.mkdir(parents=True, exist_ok=True)
        context = RunContext(self, experiment, RunManifest.start(self.command_name, config), out_dir)
        context.recorder.start()
        context.note(f"Graph {config.graph} ({experiment.graph.n} vertices), driver {experiment.driver.kind}")

        try:
            verdict = self.run(experiment, context, **options)
        except (DepositionLabError, OSError) as exc:
            context.recorder.fail(exc)
            raise CommandError(str(exc), returncode=EXIT_CONFIG_ERROR) from exc
        except Exception as exc:  # noqa: BLE001
            logger.exception("%s run failed unexpectedly", self.command_name)
            context.recorder.fail(exc)
            raise CommandError(f"Unexpected error: {exc}", returncode=EXIT_CONFIG_ERROR) from exc

        context.write_manifest()
        context.recorder.finish(verdict)
        self.stdout.write(f"Outputs written to {out_dir}")
        if verdict is False:
            raise CommandError("One or more checks failed", returncode=EXIT_CHECK_FAILED)

    def run(self, experiment: Experiment, context: "RunContext", **options) -> Optional[bool]:
        raise NotImplementedError


class RunContext:
    """Output directory, manifest and run log for one command invocation."""

    def __init__(self, command: BaseCommand, experiment: Experiment, manifest: RunManifest, out_dir: Path):
        self.command = command
        self.experiment = experiment
        self.manifest = manifest
        self.out_dir = out_dir
        self.recorder = RunRecorder(manifest, out_dir)

    def note(self, line: str) -> None:
        logger.info(line)
        self.recorder.note(line)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    @contextmanager
    def timed(self, label: str):
        started = time.perf_counter()
        try:
            yield
        finally:
            self.manifest.timings[label] = round(time.perf_counter() - started, 4)

    def write_manifest(self) -> Path:
        if self.experiment.certificate_built:
            self.manifest.certificate = self.experiment.certificate.as_json()
        path = self.path("manifest.json")
        path.write_text(json.dumps(self.manifest.as_json(), indent=2, sort_keys=True) + "\n")
        return path
