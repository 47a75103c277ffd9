"""
Experiment configuration, graph and driver ingestion, and run manifests.

One JSON document describes an experiment. Command-line flags override its
fields; ``DEPO_LAB_THREADS`` is consulted for the thread count only.
"""

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from django.conf import settings

import depo_lab

from .chain import CommunicationCertificate, communicating_set, default_depth_bound
from .deposition import (
    DriverSpec,
    iid_driver,
    layer_driver,
    markov_driver,
    uniform_markov_driver,
)
from .errors import ConfigError, DepositionLabError, GraphError
from .graph import (
    DirectedDriverGraph,
    Graph,
    named_graph,
    undirected_arcs,
    validate_driver_graph,
    validate_graph,
)

logger = logging.getLogger(__name__)

BUILTIN_GRAPH = re.compile(r"^[PKCpkc]\d+$")

# Fields that do not change numeric payloads stay out of the config hash.
UNHASHED_FIELDS = {"out", "threads", "plots"}


@dataclass
class ExperimentConfig:
    graph: str
    driver: Union[str, dict] = "iid"
    seed: Optional[int] = None
    depth_bound: Optional[int] = None
    horizon: int = 1000
    replicas: int = 1000
    cycles: int = 100_000
    pairs: int = 50
    runs: int = 200
    anchor: int = 0
    threads: Optional[int] = None
    out: Optional[str] = None
    plots: bool = False
    certificate_scale: float = 1.0

    def as_json(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.as_json().items() if k not in UNHASHED_FIELDS}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


COUNT_FIELDS = ("horizon", "replicas", "cycles", "pairs", "runs")


def load_config_file(path: Union[str, Path]) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError({"config": f"file not found: {path}"}) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError({"config": f"invalid JSON: {exc}"}) from exc


def build_config(document: Optional[dict], overrides: dict[str, Any]) -> ExperimentConfig:
    """
    Merge defaults, the JSON document and non-None overrides, then validate.

    Every problem is collected and raised together as one ConfigError.
    """
    merged: dict[str, Any] = {}
    known = set(ExperimentConfig.__dataclass_fields__)
    errors: dict[str, str] = {}
    for key, value in (document or {}).items():
        if key not in known:
            errors[key] = "unknown field"
        else:
            merged[key] = value
    merged.update({k: v for k, v in overrides.items() if v is not None and k in known})

    if "graph" not in merged:
        errors["graph"] = "required"
    elif not BUILTIN_GRAPH.match(str(merged["graph"])) and not Path(merged["graph"]).is_file():
        errors["graph"] = f"file not found: {merged['graph']}"
    if merged.get("seed") is None:
        errors["seed"] = "required; runs never draw entropy implicitly"
    for name in COUNT_FIELDS:
        if name in merged and (not isinstance(merged[name], int) or merged[name] < 1):
            errors[name] = f"must be a positive integer, got {merged[name]!r}"
    if merged.get("depth_bound") is not None and int(merged["depth_bound"]) < 0:
        errors["depth_bound"] = "must be nonnegative"
    if merged.get("threads") is not None and int(merged["threads"]) < 1:
        errors["threads"] = "must be at least 1"
    scale = merged.get("certificate_scale", 1.0)
    if not isinstance(scale, (int, float)) or scale <= 0:
        errors["certificate_scale"] = "must be a positive number"
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(**merged)


def resolve_threads(config: ExperimentConfig) -> int:
    if config.threads:
        return int(config.threads)
    env_threads = getattr(settings, "DEPO_LAB_THREADS", None)
    if env_threads:
        return int(env_threads)
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Graph and driver ingestion
# ---------------------------------------------------------------------------


def parse_graph_text(text: str) -> tuple[Graph, Optional[DirectedDriverGraph]]:
    """
    JSON ``{"n": .., "edges": [[u, v], ..], "arcs": [..], "labels": [..]}``
    or plain text: the vertex count on the first line, then one ``u v`` edge
    per line. Blank lines and ``#`` comments are ignored.
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        data = json.loads(stripped)
        g = validate_graph(data.get("edges", []), int(data["n"]), data.get("labels"))
        arcs = data.get("arcs")
        if arcs is None:
            return g, None
        return g, validate_driver_graph(arcs, g.n)
    lines = [ln.split("#", 1)[0].strip() for ln in stripped.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise GraphError("Graph file is empty")
    n = int(lines[0])
    edges = [tuple(int(tok) for tok in ln.split()[:2]) for ln in lines[1:]]
    return validate_graph(edges, n), None


def load_graph(source: str) -> tuple[Graph, Optional[DirectedDriverGraph]]:
    if BUILTIN_GRAPH.match(source):
        return named_graph(source), None
    return parse_graph_text(Path(source).read_text())


def _parse_floats(raw: str) -> list[float]:
    return [float(tok) for tok in raw.split(",") if tok.strip()]


def parse_driver(
    spec: Union[str, dict], g: Graph, arcs: Optional[DirectedDriverGraph] = None
) -> DriverSpec:
    """
    Driver strings: ``iid``, ``iid:0.98,0.01,0.01``, ``markov`` (uniform over
    the graph file's arcs, or over edges plus self-loops), ``layer:k=2,rho=0.3``.
    The JSON form is ``{"kind": ..., <parameters>}``.
    """
    if isinstance(spec, str):
        kind, _, params = spec.partition(":")
        kind = kind.strip().lower()
        if kind == "iid":
            return iid_driver(g, _parse_floats(params) if params else None)
        if kind == "markov":
            return uniform_markov_driver(g, arcs or undirected_arcs(g))
        if kind == "layer":
            values = dict(item.split("=", 1) for item in params.split(",") if "=" in item)
            q = values.get("q")
            return layer_driver(
                g,
                k=int(values.get("k", 2)),
                rho=float(values.get("rho", 0.3)),
                q=_parse_floats(q.replace(";", ",")) if q else None,
            )
        raise ConfigError({"driver": f"unknown driver kind {kind!r}"})

    kind = str(spec.get("kind", "")).lower()
    if kind == "iid":
        return iid_driver(g, spec.get("p"))
    if kind == "markov":
        if "matrix" in spec:
            return markov_driver(g, spec["matrix"])
        return uniform_markov_driver(g, arcs or undirected_arcs(g))
    if kind == "layer":
        return layer_driver(g, k=spec.get("k", 2), rho=spec.get("rho", 0.3), q=spec.get("q"))
    raise ConfigError({"driver": f"unknown driver kind {kind!r}"})


# ---------------------------------------------------------------------------
# Experiment context and manifest
# ---------------------------------------------------------------------------


class Experiment:
    """Resolved graph, driver and certificate for one configuration."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        try:
            self.graph, self.arcs = load_graph(config.graph)
        except (GraphError, ValueError, KeyError) as exc:
            raise ConfigError({"graph": str(exc)}) from exc
        try:
            self.driver = parse_driver(config.driver, self.graph, self.arcs)
        except ConfigError:
            raise
        except (DepositionLabError, ValueError) as exc:
            raise ConfigError({"driver": str(exc)}) from exc
        if not 0 <= config.anchor < self.graph.n:
            raise ConfigError({"anchor": f"vertex {config.anchor} outside 0..{self.graph.n - 1}"})
        self._core = None
        self._certificate = None

    @property
    def threads(self) -> int:
        return resolve_threads(self.config)

    def _build_core(self) -> None:
        started = time.perf_counter()
        self._core, cert = communicating_set(self.graph, self.driver)
        self._certificate = cert
        logger.info(
            "Communicating set for %s driver built in %.2fs (s=%d, alpha'=%.3e)",
            cert.driver_kind, time.perf_counter() - started, cert.s, cert.alpha_prime,
        )

    @property
    def core(self) -> list:
        if self._core is None:
            self._build_core()
        return self._core

    @property
    def certificate(self) -> CommunicationCertificate:
        """The derived certificate, with alpha' scaled for negative controls."""
        if self._certificate is None:
            self._build_core()
        if self.config.certificate_scale != 1.0:
            return self._certificate.scaled(self.config.certificate_scale)
        return self._certificate

    @property
    def certificate_built(self) -> bool:
        return self._certificate is not None

    @property
    def depth_bound(self) -> int:
        if self.config.depth_bound is not None:
            return int(self.config.depth_bound)
        return default_depth_bound(self.graph, self.certificate)

    @property
    def anchor_state(self):
        return self.core[self.config.anchor]


@dataclass
class RunManifest:
    command: str
    config_hash: str
    version: str
    seed: int
    config: dict
    artifacts: list[dict] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    certificate: Optional[dict] = None

    @classmethod
    def start(cls, command: str, config: ExperimentConfig) -> "RunManifest":
        return cls(
            command=command,
            config_hash=config.config_hash(),
            version=depo_lab.__version__,
            seed=int(config.seed),
            config=config.as_json(),
        )

    def add_artifact(self, path: Path, kind: str, root: Path) -> None:
        self.artifacts.append({"path": str(path.relative_to(root)), "kind": kind})

    def as_json(self) -> dict:
        return asdict(self)


def output_directory(config: ExperimentConfig, command: str) -> Path:
    if config.out:
        return Path(config.out)
    return Path(settings.DEPO_LAB_OUTPUT_ROOT) / f"{command}-{config.config_hash()[:12]}"
