"""
Replica engine: seeded chunk scheduling and a vectorised ensemble of
relative-height chains.

Work is always split into the same number of chunks, each with its own child
seed, whatever the thread count. Results come back in chunk order, so output
only depends on the seed.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence, TypeVar, Union

import numpy as np

from .deposition import DriverSpec, IIDDriver, LayerDriver, MarkovDriver
from .errors import DriverSpecError
from .graph import Graph

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_CHUNKS = 32
UNIFORM_BLOCK = 4096

SeedLike = Union[int, np.random.SeedSequence]


def seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def spawn_generators(seed: SeedLike, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(child) for child in seed_sequence(seed).spawn(count)]


def split_counts(total: int, chunks: int) -> list[int]:
    chunks = max(1, min(chunks, total))
    base, extra = divmod(total, chunks)
    return [base + (1 if idx < extra else 0) for idx in range(chunks)]


def run_chunked(
    task: Callable[[int, np.random.Generator, int], T],
    total: int,
    seed: SeedLike,
    threads: int = 1,
    chunks: int = DEFAULT_CHUNKS,
) -> list[T]:
    """
    Call ``task(size, rng, chunk_index)`` for each chunk and return the
    results in chunk order.
    """
    sizes = split_counts(total, chunks)
    rngs = spawn_generators(seed, len(sizes))
    if threads <= 1 or len(sizes) == 1:
        return [task(size, rng, idx) for idx, (size, rng) in enumerate(zip(sizes, rngs))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(task, sizes, rngs, range(len(sizes))))


class UniformStream:
    """Hands out uniform triples from pre-drawn blocks."""

    def __init__(self, rng: np.random.Generator, block: int = UNIFORM_BLOCK):
        self.rng = rng
        self.block = block
        self._buffer = rng.random((block, 3))
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos == self.block:
            self._buffer = self.rng.random((self.block, 3))
            self._pos = 0
        row = self._buffer[self._pos]
        self._pos += 1
        return row


class ReplicaEnsemble:
    """
    R independent relative-height chains stored as an (R, n) integer array.

    Each step consumes an (R, 3) array of uniforms; only column 0 is used by
    the IID and Markov drivers. ``max_height`` counts how often each
    replica's maximum rose.
    """

    def __init__(
        self,
        g: Graph,
        driver: DriverSpec,
        profiles: np.ndarray,
        vertices: Optional[np.ndarray] = None,
    ):
        if isinstance(driver, LayerDriver):
            raise DriverSpecError("Layer drivers run on the scalar kernel path, not the ensemble")
        self.g = g
        self.driver = driver
        self.profiles = np.array(profiles, dtype=np.int64, copy=True)
        self.replicas = self.profiles.shape[0]
        self.max_height = np.zeros(self.replicas, dtype=np.int64)
        self.vertices = None
        if isinstance(driver, MarkovDriver):
            self.vertices = (
                np.zeros(self.replicas, dtype=np.int64)
                if vertices is None
                else np.array(vertices, dtype=np.int64, copy=True)
            )
            self._cumulative = np.cumsum(driver.array, axis=1)
        elif isinstance(driver, IIDDriver):
            self._cumulative = np.cumsum(driver.weights)
        else:
            raise DriverSpecError(f"Unsupported driver {driver!r}")

        width = max(len(nb) for nb in g.closed_neighborhoods)
        self._neighborhoods = np.array(
            [list(nb) + [nb[0]] * (width - len(nb)) for nb in g.closed_neighborhoods],
            dtype=np.int64,
        )
        self._rows = np.arange(self.replicas)

    @classmethod
    def replicate(cls, g: Graph, driver: DriverSpec, state, replicas: int) -> "ReplicaEnsemble":
        """Every replica starts from the same kernel state."""
        if isinstance(driver, MarkovDriver):
            profile, vertex = state
            return cls(
                g, driver,
                np.tile(np.asarray(profile, dtype=np.int64), (replicas, 1)),
                np.full(replicas, vertex, dtype=np.int64),
            )
        return cls(g, driver, np.tile(np.asarray(state, dtype=np.int64), (replicas, 1)))

    def pick_sites(self, u: np.ndarray) -> np.ndarray:
        n = self.g.n
        if self.vertices is None:
            sites = np.searchsorted(self._cumulative, u, side="right")
        else:
            sites = (self._cumulative[self.vertices] <= u[:, None]).sum(axis=1)
        return np.minimum(sites, n - 1)

    def step(self, uniforms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Advance every replica once; returns (dropped sites, max rose flags)."""
        sites = self.pick_sites(uniforms[:, 0])
        neighborhood = self._neighborhoods[sites]
        landed = self.profiles[self._rows[:, None], neighborhood].max(axis=1) + 1
        self.profiles[self._rows, sites] = landed
        rose = landed > 0
        self.profiles[rose] -= 1
        self.max_height += rose
        if self.vertices is not None:
            self.vertices = sites
        return sites, rose

    def run(self, steps: int, rng: np.random.Generator) -> None:
        for _ in range(steps):
            self.step(rng.random((self.replicas, 3)))

    def states(self) -> list:
        profiles = [tuple(int(v) for v in row) for row in self.profiles]
        if self.vertices is None:
            return profiles
        return list(zip(profiles, (int(v) for v in self.vertices)))


def stack_states(states: Sequence, driver: DriverSpec) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Kernel states to the (profiles, vertices) arrays the ensemble uses."""
    if isinstance(driver, MarkovDriver):
        return (
            np.array([s[0] for s in states], dtype=np.int64),
            np.array([s[1] for s in states], dtype=np.int64),
        )
    return np.array(states, dtype=np.int64), None
