"""
Height profiles, the screening operator and the three dropping drivers.

Profiles are plain integer tuples so they hash and compare by value. A
relative profile ``x`` is a height profile seen from its maximum: every entry
is <= 0 and at least one entry is 0.

Rules of the screening deposit T_i:
- the new particle at ``i`` lands one above the highest particle in the
  closed neighbourhood of ``i``;
- every other coordinate is left alone.
"""

import logging
from bisect import bisect_right
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DriverSpecError, NotIrreducible, NotLazy, VertexOutOfRange
from .graph import DirectedDriverGraph, Graph, check_driver_graph, validate_driver_graph

logger = logging.getLogger(__name__)

HeightProfile = tuple[int, ...]
RelativeProfile = tuple[int, ...]
MarkovState = tuple[RelativeProfile, int]

PROBABILITY_TOLERANCE = 1e-12


def deposit(h: Sequence[int], g: Graph, i: int) -> HeightProfile:
    if not 0 <= i < g.n:
        raise VertexOutOfRange(f"Drop site {i} outside 0..{g.n - 1}")
    out = list(h)
    out[i] = max(h[w] for w in g.closed_neighborhoods[i]) + 1
    return tuple(out)


def relativize(h: Sequence[int]) -> RelativeProfile:
    top = max(h)
    return tuple(int(v) - top for v in h)


def relative_deposit(x: Sequence[int], g: Graph, i: int) -> RelativeProfile:
    """T_i on shift classes; equals relativize(deposit(h, i)) for any lift h."""
    landed = max(x[w] for w in g.closed_neighborhoods[i]) + 1
    if landed > 0:
        # The particle became the new unique maximum.
        out = [v - landed for v in x]
        out[i] = 0
        return tuple(out)
    out = list(x)
    out[i] = landed
    return tuple(out)


def apply_string(x: Sequence[int], g: Graph, sites: Sequence[int]) -> RelativeProfile:
    out = tuple(x)
    for v in sites:
        out = relative_deposit(out, g, v)
    return out


def flat_profile(n: int) -> RelativeProfile:
    return (0,) * n


def changed_coordinates(x: Sequence[int], y: Sequence[int]) -> int:
    return sum(1 for a, b in zip(x, y) if a != b)


def encode_profile(x: Sequence[int]) -> bytes:
    """Negated depths, most-significant vertex first, two bytes each."""
    return b"".join((-v).to_bytes(2, "big") for v in x)


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IIDDriver:
    """Independent drops with site probabilities ``p``."""

    p: tuple[float, ...]
    kind: str = field(default="iid", init=False)

    @cached_property
    def weights(self) -> np.ndarray:
        return _frozen_array(self.p)

    def describe(self) -> dict:
        return {"kind": self.kind, "p": list(self.p)}


@dataclass(frozen=True)
class MarkovDriver:
    """Drop sites follow a lazy, irreducible Markov chain with matrix A."""

    matrix: tuple[tuple[float, ...], ...]
    arcs: DirectedDriverGraph = field(compare=False)
    kind: str = field(default="markov", init=False)

    @cached_property
    def array(self) -> np.ndarray:
        return _frozen_array(self.matrix)

    def row(self, v: int) -> tuple[float, ...]:
        return self.matrix[v]

    def stationary(self) -> np.ndarray:
        """Stationary law of A, used to draw the initial driver vertex."""
        a = self.array
        vec = np.full(a.shape[0], 1.0 / a.shape[0])
        for _ in range(100_000):
            nxt = vec @ a
            if np.abs(nxt - vec).sum() < 1e-14:
                return nxt
            vec = nxt
        return vec

    def describe(self) -> dict:
        return {"kind": self.kind, "matrix": [list(r) for r in self.matrix]}


@dataclass(frozen=True)
class LayerDriver:
    """
    Concrete depth-k layer rule.

    Site ``v`` is chosen with weight ``q[v]``. With probability ``1 - rho``
    (or always, when no feasible vacancy exists) the particle is screened to
    the top; otherwise it fills a uniformly chosen feasible vacancy in the
    k-window below the top of ``v``.
    """

    k: int
    rho: float
    q: tuple[float, ...]
    kind: str = field(default="layer", init=False)

    @property
    def epsilon(self) -> float:
        """Uniform lower bound on the screening probability at every site."""
        return min(self.q) * (1.0 - self.rho)

    def describe(self) -> dict:
        return {"kind": self.kind, "k": self.k, "rho": self.rho, "q": list(self.q)}


DriverSpec = Union[IIDDriver, MarkovDriver, LayerDriver]


def _frozen_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    arr.setflags(write=False)
    return arr


def _check_probability_vector(values: Sequence[float], n: int, name: str) -> tuple[float, ...]:
    if len(values) != n:
        raise DriverSpecError(f"{name} has {len(values)} entries, graph has {n} vertices")
    vec = tuple(float(v) for v in values)
    if any(not np.isfinite(v) or v <= 0.0 for v in vec):
        raise DriverSpecError(f"{name} must be strictly positive, got {list(vec)}")
    total = sum(vec)
    if abs(total - 1.0) > PROBABILITY_TOLERANCE:
        raise DriverSpecError(f"{name} sums to {total!r}, expected 1")
    return vec


def iid_driver(g: Graph, p: Optional[Sequence[float]] = None) -> IIDDriver:
    if p is None:
        p = [1.0 / g.n] * g.n
    return IIDDriver(p=_check_probability_vector(p, g.n, "Site probability vector"))


def markov_driver(g: Graph, matrix: Sequence[Sequence[float]]) -> MarkovDriver:
    """Validate A (row-stochastic, lazy, irreducible support) and wrap it."""
    a = np.asarray(matrix, dtype=float)
    if a.shape != (g.n, g.n):
        raise DriverSpecError(f"Transition matrix has shape {a.shape}, expected {(g.n, g.n)}")
    if (a < 0).any() or not np.isfinite(a).all():
        raise DriverSpecError("Transition matrix entries must be finite and nonnegative")
    row_sums = a.sum(axis=1)
    bad = np.flatnonzero(np.abs(row_sums - 1.0) > PROBABILITY_TOLERANCE)
    if bad.size:
        raise DriverSpecError(f"Rows {bad.tolist()} of the transition matrix do not sum to 1")

    arcs = validate_driver_graph(np.argwhere(a > 0).tolist(), g.n)
    report = check_driver_graph(arcs)
    if not report.lazy:
        missing = [v for v in range(g.n) if a[v, v] <= 0]
        raise NotLazy(f"Driver chain is not lazy: A(v,v) = 0 for v in {missing}")
    if not report.irreducible:
        raise NotIrreducible("Driver chain support is not strongly connected")
    return MarkovDriver(matrix=tuple(tuple(float(v) for v in r) for r in a), arcs=arcs)


def uniform_markov_driver(g: Graph, arcs: DirectedDriverGraph) -> MarkovDriver:
    """A uniform over each vertex's out-arcs (self-loops included)."""
    a = np.zeros((g.n, g.n))
    for v in range(g.n):
        out = arcs.successors[v]
        if not out:
            raise NotIrreducible(f"Vertex {v} has no outgoing arcs")
        a[v, list(out)] = 1.0 / len(out)
    return markov_driver(g, a)


def layer_driver(
    g: Graph, k: int, rho: float, q: Optional[Sequence[float]] = None
) -> LayerDriver:
    if int(k) != k or k < 1:
        raise DriverSpecError(f"Layer depth k must be a positive integer, got {k!r}")
    if k > 16:
        raise DriverSpecError(f"Layer depth k={k} exceeds the supported window width 16")
    if not 0.0 <= rho < 1.0:
        raise DriverSpecError(f"rho must lie in [0, 1) so screening stays non-null, got {rho!r}")
    if q is None:
        q = [1.0 / g.n] * g.n
    return LayerDriver(
        k=int(k), rho=float(rho), q=_check_probability_vector(q, g.n, "Site weight vector")
    )


# ---------------------------------------------------------------------------
# Depth-k layer configurations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerConfig:
    """
    Relative top profile plus one k-bit occupancy window per vertex.

    Bit ``b`` of ``windows[v]`` marks the slot ``b`` levels below the top of
    ``v``. Bit 0 is always set: it is the particle realising the top.
    """

    top: RelativeProfile
    windows: tuple[int, ...]
    k: int

    @classmethod
    def flat(cls, n: int, k: int) -> "LayerConfig":
        return cls(top=flat_profile(n), windows=(1,) * n, k=k)

    @classmethod
    def settled(cls, g: Graph, k: int) -> "LayerConfig":
        """
        Start state: k sweeps of screening drops over 0..n-1 from the flat
        ground, so the ground row has left every window.
        """
        config = cls.flat(g.n, k)
        for _ in range(k):
            for v in range(g.n):
                config = config.screen(g, v)
        return config

    @property
    def n(self) -> int:
        return len(self.top)

    def occupied(self, v: int, b: int) -> bool:
        return bool((self.windows[v] >> b) & 1)

    def occupied_heights(self, v: int) -> list[int]:
        return [self.top[v] - b for b in range(self.k) if self.occupied(v, b)]

    def satisfies_exclusion(self, g: Graph) -> bool:
        for v in range(self.n):
            if not self.occupied(v, 0):
                return False
            for y in self.occupied_heights(v):
                for w in g.neighbors[v]:
                    bw = self.top[w] - y
                    if 0 <= bw < self.k and self.occupied(w, bw):
                        return False
        return True

    def feasible_slots(self, g: Graph, v: int) -> tuple[int, ...]:
        """
        Vacant slots b in 1..k-1 of v's window whose height no neighbour
        occupies. Heights below a neighbour's window are unknown and treated
        as infeasible.
        """
        slots = []
        for b in range(1, self.k):
            if self.occupied(v, b):
                continue
            y = self.top[v] - b
            ok = True
            for w in g.neighbors[v]:
                bw = self.top[w] - y
                if bw < 0:
                    continue
                if bw >= self.k or self.occupied(w, bw):
                    ok = False
                    break
            if ok:
                slots.append(b)
        return tuple(slots)

    def screen(self, g: Graph, v: int) -> "LayerConfig":
        landed = max(self.top[w] for w in g.closed_neighborhoods[v]) + 1
        shift = landed - self.top[v]
        mask = (1 << self.k) - 1
        window = ((self.windows[v] << shift) | 1) & mask
        top = list(self.top)
        top[v] = landed
        peak = max(top)
        windows = list(self.windows)
        windows[v] = window
        return LayerConfig(top=tuple(t - peak for t in top), windows=tuple(windows), k=self.k)

    def fill(self, v: int, b: int) -> "LayerConfig":
        windows = list(self.windows)
        windows[v] |= 1 << b
        return LayerConfig(top=self.top, windows=tuple(windows), k=self.k)

    def encoding(self) -> bytes:
        return encode_profile(self.top) + b"".join(w.to_bytes(2, "big") for w in self.windows)

    def as_json(self) -> dict:
        return {
            "top": list(self.top),
            "windows": [[(w >> b) & 1 for b in range(self.k)] for w in self.windows],
        }


def layer_equivalent(phi1: LayerConfig, phi2: LayerConfig, k: int) -> bool:
    """Same top profile and same k-deep occupancy below it."""
    if phi1.n != phi2.n:
        return False
    mask = (1 << k) - 1
    return phi1.top == phi2.top and all(
        (a & mask) == (b & mask) for a, b in zip(phi1.windows, phi2.windows)
    )


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------


def step_iid(
    x: RelativeProfile, g: Graph, spec: IIDDriver, rng: np.random.Generator
) -> tuple[RelativeProfile, int]:
    dropped = int(rng.choice(g.n, p=spec.weights))
    return relative_deposit(x, g, dropped), dropped


def step_markov(
    state: MarkovState, g: Graph, spec: MarkovDriver, rng: np.random.Generator
) -> tuple[MarkovState, int]:
    x, v = state
    nxt = int(rng.choice(g.n, p=spec.array[v]))
    return (relative_deposit(x, g, nxt), nxt), nxt


def step_layer(
    psi: LayerConfig, g: Graph, spec: LayerDriver, rng: np.random.Generator
) -> tuple[LayerConfig, int]:
    v = int(rng.choice(g.n, p=np.asarray(spec.q)))
    nxt, _ = _layer_move(psi, g, spec, v, rng.random(), rng.random())
    return nxt, v


def _layer_move(
    psi: LayerConfig, g: Graph, spec: LayerDriver, v: int, u_branch: float, u_slot: float
) -> tuple[LayerConfig, bool]:
    """One layer move; the flag is true when the particle was screened to the top."""
    slots = psi.feasible_slots(g, v)
    if slots and u_branch < spec.rho:
        return psi.fill(v, slots[min(int(u_slot * len(slots)), len(slots) - 1)]), False
    return psi.screen(g, v), True


# ---------------------------------------------------------------------------
# Transition kernels
# ---------------------------------------------------------------------------


class TransitionKernel:
    """
    One-step law of the relative-height chain for a particular driver.

    ``law(state)`` lists ``(probability, next_state, dropped_vertex)``
    triples; duplicate targets are allowed and summed by consumers.
    ``advance(state, u)`` is the same law driven by three uniforms, so two
    chains fed the same uniforms move identically.
    """

    driver: DriverSpec

    def __init__(self, g: Graph, driver: DriverSpec):
        self.g = g
        self.driver = driver

    def law(self, state) -> list[tuple[float, object, int]]:
        raise NotImplementedError

    def advance(self, state, u: Sequence[float]) -> tuple[object, int, bool]:
        """Next state, dropped vertex and whether the maximal height rose."""
        raise NotImplementedError

    def profile(self, state) -> RelativeProfile:
        raise NotImplementedError

    def encode(self, state) -> bytes:
        raise NotImplementedError

    def depth(self, state) -> int:
        return -min(self.profile(state))

    def sample(self, state, rng: np.random.Generator):
        raise NotImplementedError


def _pick(cumulative: Sequence[float], u: float) -> int:
    return min(bisect_right(cumulative, u), len(cumulative) - 1)


def _screen_with_rise(x: RelativeProfile, g: Graph, v: int) -> tuple[RelativeProfile, bool]:
    rose = max(x[w] for w in g.closed_neighborhoods[v]) >= 0
    return relative_deposit(x, g, v), rose


class IIDKernel(TransitionKernel):
    def __init__(self, g, driver):
        super().__init__(g, driver)
        self._cumulative = np.cumsum(driver.p).tolist()

    def law(self, state):
        return [
            (pv, relative_deposit(state, self.g, v), v)
            for v, pv in enumerate(self.driver.p)
        ]

    def advance(self, state, u):
        v = _pick(self._cumulative, u[0])
        nxt, rose = _screen_with_rise(state, self.g, v)
        return nxt, v, rose

    def profile(self, state):
        return state

    def encode(self, state):
        return encode_profile(state)

    def sample(self, state, rng):
        return step_iid(state, self.g, self.driver, rng)


class MarkovKernel(TransitionKernel):
    def __init__(self, g, driver):
        super().__init__(g, driver)
        self._cumulative = [np.cumsum(row).tolist() for row in driver.matrix]

    def law(self, state):
        x, v = state
        return [
            (pw, (relative_deposit(x, self.g, w), w), w)
            for w, pw in enumerate(self.driver.row(v))
            if pw > 0
        ]

    def advance(self, state, u):
        x, v = state
        w = _pick(self._cumulative[v], u[0])
        nxt, rose = _screen_with_rise(x, self.g, w)
        return (nxt, w), w, rose

    def profile(self, state):
        return state[0]

    def encode(self, state):
        return encode_profile(state[0]) + state[1].to_bytes(2, "big")

    def sample(self, state, rng):
        return step_markov(state, self.g, self.driver, rng)


class LayerKernel(TransitionKernel):
    def __init__(self, g, driver):
        super().__init__(g, driver)
        self._cumulative = np.cumsum(driver.q).tolist()

    def law(self, state):
        out = []
        rho = self.driver.rho
        for v, qv in enumerate(self.driver.q):
            slots = state.feasible_slots(self.g, v)
            if not slots:
                out.append((qv, state.screen(self.g, v), v))
                continue
            out.append((qv * (1.0 - rho), state.screen(self.g, v), v))
            share = qv * rho / len(slots)
            out.extend((share, state.fill(v, b), v) for b in slots)
        return out

    def advance(self, state, u):
        v = _pick(self._cumulative, u[0])
        peak = max(state.top[w] for w in self.g.closed_neighborhoods[v])
        nxt, screened = _layer_move(state, self.g, self.driver, v, u[1], u[2])
        return nxt, v, screened and peak >= 0

    def profile(self, state):
        return state.top

    def encode(self, state):
        return state.encoding()

    def sample(self, state, rng):
        return step_layer(state, self.g, self.driver, rng)


def kernel_for(g: Graph, driver: DriverSpec) -> TransitionKernel:
    if isinstance(driver, IIDDriver):
        return IIDKernel(g, driver)
    if isinstance(driver, MarkovDriver):
        return MarkovKernel(g, driver)
    if isinstance(driver, LayerDriver):
        return LayerKernel(g, driver)
    raise DriverSpecError(f"Unsupported driver {driver!r}")


def initial_state(g: Graph, driver: DriverSpec, start: Optional[Sequence[int]] = None):
    """
    Default starting state for trajectories: the flat profile (IID), the flat
    profile with the driver at vertex 0 (Markov), or the settled layer
    configuration.
    """
    x = relativize(start) if start is not None else flat_profile(g.n)
    if isinstance(driver, MarkovDriver):
        return (x, 0)
    if isinstance(driver, LayerDriver):
        if start is not None:
            return LayerConfig(top=x, windows=(1,) * g.n, k=driver.k)
        return LayerConfig.settled(g, driver.k)
    return x
