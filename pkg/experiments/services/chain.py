"""
Truncated relative-height chain: communicating sets, certificates, state
enumeration and sparse transition assembly.

The communicating set S1 holds one state per vertex, each grown from a
profile with its maximum at that vertex by a fixed dropping string. The
certificate records how fast every state reaches every S1 state
(communication time ``s`` and constant ``alpha_prime``) and how fast the
complement is killed into S1 (``killing_time`` and ``alpha``).
"""

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .deposition import (
    DriverSpec,
    IIDDriver,
    LayerConfig,
    LayerDriver,
    MarkovDriver,
    RelativeProfile,
    TransitionKernel,
    apply_string,
    flat_profile,
    kernel_for,
)
from .errors import (
    CertificateViolation,
    DepthBoundTooSmall,
    DriverSpecError,
    NotIrreducible,
    NotLazy,
    StateCapExceeded,
)
from .graph import (
    DirectedDriverGraph,
    Graph,
    build_i_ordering,
    check_driver_graph,
    directed_distances,
    shortest_connecting_string,
)

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-12


@dataclass(frozen=True)
class CommunicationCertificate:
    driver_kind: str
    s: int
    alpha: float
    alpha_prime: float
    killing_time: int
    core_depth: int
    construction_log: tuple[dict, ...] = field(default=(), compare=False)

    def scaled(self, factor: float) -> "CommunicationCertificate":
        """Copy with alpha_prime inflated by ``factor`` (capped at 1)."""
        return replace(self, alpha_prime=min(1.0, self.alpha_prime * factor))

    def as_json(self) -> dict:
        return {
            "driver_kind": self.driver_kind,
            "s": self.s,
            "alpha": self.alpha,
            "alpha_prime": self.alpha_prime,
            "killing_time": self.killing_time,
            "core_depth": self.core_depth,
            "construction_log": list(self.construction_log),
        }


@dataclass(frozen=True)
class MarkovCoreEntry:
    """Per-root data of the driver-aware communicating set."""

    root: int
    ordering: tuple[int, ...]
    string: tuple[int, ...]
    sigma: int
    profile: RelativeProfile

    @property
    def s(self) -> int:
        return len(self.string)

    @property
    def state(self) -> tuple[RelativeProfile, int]:
        return (self.profile, self.string[-1])


@dataclass(frozen=True)
class MarkovCore:
    entries: tuple[MarkovCoreEntry, ...]

    @property
    def states(self) -> list[tuple[RelativeProfile, int]]:
        return [e.state for e in self.entries]

    @property
    def s_bar(self) -> int:
        return 3 * max(2 * (e.s + e.sigma) for e in self.entries)


# ---------------------------------------------------------------------------
# Independent drops
# ---------------------------------------------------------------------------


def build_s1_iid(g: Graph) -> list[RelativeProfile]:
    """x^(i): drops along the i-ordering applied to any profile in S^(i)."""
    flat = flat_profile(g.n)
    return [apply_string(flat, g, build_i_ordering(g, i).sequence) for i in range(g.n)]


def _iid_string(g: Graph, i: int, j: int) -> tuple[int, ...]:
    return (
        build_i_ordering(g, i).sequence
        + (j,) * (g.n - 1)
        + build_i_ordering(g, j).sequence
    )


def certificate_iid(g: Graph, p: Sequence[float]) -> CommunicationCertificate:
    orderings = [build_i_ordering(g, i).sequence for i in range(g.n)]
    alpha = min(float(np.prod([p[a] for a in seq])) for seq in orderings)

    log = []
    alpha_prime = 1.0
    for i in range(g.n):
        for j in range(g.n):
            string = _iid_string(g, i, j)
            prob = float(np.prod([p[a] for a in string]))
            alpha_prime = min(alpha_prime, prob)
            log.append({"from": i, "to": j, "string": list(string), "probability": prob})

    core_depth = max(-min(x) for x in build_s1_iid(g))
    return CommunicationCertificate(
        driver_kind="iid",
        s=3 * (g.n - 1),
        alpha=alpha,
        alpha_prime=alpha_prime,
        killing_time=g.n - 1,
        core_depth=core_depth,
        construction_log=tuple(log),
    )


# ---------------------------------------------------------------------------
# Markov-driven drops
# ---------------------------------------------------------------------------


def _check_driver(d: DirectedDriverGraph) -> None:
    report = check_driver_graph(d)
    if not report.lazy:
        raise NotLazy("Driver graph needs a self-loop at every vertex")
    if not report.irreducible:
        raise NotIrreducible("Driver graph is not strongly connected")


def _markov_string(g: Graph, d: DirectedDriverGraph, i: int) -> tuple[int, ...]:
    ordering = build_i_ordering(g, i).sequence
    if not ordering:
        return (i,)
    stops = (i,) + ordering
    string: list[int] = []
    for v, w in zip(stops, stops[1:]):
        string.extend(shortest_connecting_string(d, v, w).path)
    string.append(ordering[-1])
    return tuple(string)


def build_s1bar_markov(g: Graph, d: DirectedDriverGraph) -> MarkovCore:
    """
    Per root i: the connecting strings stitched along the i-ordering, applied
    after s(i) drops at i. The resulting profile no longer depends on the
    starting profile in S^(i).
    """
    _check_driver(d)
    flat = flat_profile(g.n)
    distances = directed_distances(d)
    entries = []
    for i in range(g.n):
        string = _markov_string(g, d, i)
        profile = apply_string(flat, g, (i,) * len(string) + string)
        reach = int(distances[:, i].max())
        entries.append(
            MarkovCoreEntry(
                root=i,
                ordering=build_i_ordering(g, i).sequence,
                string=string,
                sigma=2 * (reach + 1),
                profile=profile,
            )
        )
    return MarkovCore(entries=tuple(entries))


def replay_markov_core(
    g: Graph, core: MarkovCore, rng: np.random.Generator, representatives: int = 20, depth: int = 6
) -> list[dict]:
    """
    Apply each root's (i,)*s(i) + string to random profiles carrying their
    maximum at i and report whether every replay lands on the core profile.
    """
    report = []
    for entry in core.entries:
        i = entry.root
        mismatches = 0
        for _ in range(representatives):
            raw = -rng.integers(0, depth + 1, size=g.n)
            x = tuple(int(v) for v in raw - raw.max())
            while x[i] != 0:
                x = apply_string(x, g, (i,))
            replayed = apply_string(x, g, (i,) * entry.s + entry.string)
            mismatches += replayed != entry.profile
        report.append({"root": i, "representatives": representatives, "mismatches": mismatches})
    return report


def markov_witness(
    g: Graph, d: DirectedDriverGraph, core: MarkovCore, v: int, i: int, j: int
) -> tuple[int, ...]:
    """
    Drop sites leading from any (x, v) with x in S^(i) to the core state of
    root j in exactly s_bar steps.
    """
    entry_i, entry_j = core.entries[i], core.entries[j]
    to_root = shortest_connecting_string(d, v, i).path
    stage_one = to_root + (i,) * (entry_i.sigma - len(to_root))
    stage_two = (i,) * entry_i.s + entry_i.string

    handoff = list(shortest_connecting_string(d, entry_i.string[-1], j).path)
    x = apply_string(entry_i.profile, g, handoff)
    while x[j] != 0:
        x = apply_string(x, g, (j,))
        handoff.append(j)
    stage_four = (j,) * entry_j.s + entry_j.string

    used = len(stage_one) + len(stage_two) + len(handoff) + len(stage_four)
    padding = core.s_bar - used
    if padding < 0:
        raise CertificateViolation(
            f"Witness path ({v}, {i}, {j}) needs {used} steps, more than s_bar={core.s_bar}"
        )
    return stage_one + (i,) * padding + stage_two + tuple(handoff) + stage_four


def _path_probability(driver: MarkovDriver, start: int, path: Sequence[int]) -> float:
    prob = 1.0
    prev = start
    for site in path:
        prob *= driver.matrix[prev][site]
        prev = site
    return prob


def certificate_markov(g: Graph, driver: MarkovDriver) -> CommunicationCertificate:
    core = build_s1bar_markov(g, driver.arcs)
    alpha_prime = 1.0
    worst = None
    for v in range(g.n):
        for i in range(g.n):
            for j in range(g.n):
                path = markov_witness(g, driver.arcs, core, v, i, j)
                prob = _path_probability(driver, v, path)
                if prob < alpha_prime or worst is None:
                    alpha_prime = min(alpha_prime, prob)
                    worst = {"driver": v, "from": i, "to": j, "string": list(path), "probability": prob}

    log = [
        {"root": e.root, "ordering": list(e.ordering), "string": list(e.string), "s": e.s, "sigma": e.sigma}
        for e in core.entries
    ]
    log.append({"witness": worst})
    logger.info("Markov core built: s_bar=%d, alpha_prime=%.3e", core.s_bar, alpha_prime)
    return CommunicationCertificate(
        driver_kind="markov",
        s=core.s_bar,
        alpha=alpha_prime,
        alpha_prime=alpha_prime,
        killing_time=core.s_bar,
        core_depth=max(-min(e.profile) for e in core.entries),
        construction_log=tuple(log),
    )


# ---------------------------------------------------------------------------
# Depth-k layer model
# ---------------------------------------------------------------------------


def _layer_string(g: Graph, k: int, i: int, j: int) -> tuple[int, ...]:
    cover = tuple(range(g.n)) * k
    return _iid_string(g, i, j) + cover


def _screen_along(config: LayerConfig, g: Graph, sites: Sequence[int]) -> LayerConfig:
    for v in sites:
        config = config.screen(g, v)
    return config


def build_s1_layer(g: Graph, k: int) -> list[LayerConfig]:
    """
    Psi_j: screening drops along the argmax ordering, n-1 drops at j, the
    j-ordering and k sweeps over every vertex. The final sweeps push every
    pre-existing particle out of the k-windows.
    """
    start = LayerConfig.settled(g, k)
    root = start.top.index(0)
    return [_screen_along(start, g, _layer_string(g, k, root, j)) for j in range(g.n)]


def certificate_layer(g: Graph, driver: LayerDriver) -> CommunicationCertificate:
    screen_prob = [qv * (1.0 - driver.rho) for qv in driver.q]
    alpha_prime = 1.0
    log = []
    for i in range(g.n):
        for j in range(g.n):
            string = _layer_string(g, driver.k, i, j)
            prob = float(np.prod([screen_prob[a] for a in string]))
            alpha_prime = min(alpha_prime, prob)
            log.append({"from": i, "to": j, "string": list(string), "probability": prob})
    s = 3 * (g.n - 1) + driver.k * g.n
    return CommunicationCertificate(
        driver_kind="layer",
        s=s,
        alpha=alpha_prime,
        alpha_prime=alpha_prime,
        killing_time=s,
        core_depth=max(-min(c.top) for c in build_s1_layer(g, driver.k)),
        construction_log=tuple(log),
    )


def communicating_set(g: Graph, driver: DriverSpec) -> tuple[list, CommunicationCertificate]:
    """S1 states (one per root vertex) and the matching certificate."""
    if isinstance(driver, IIDDriver):
        return build_s1_iid(g), certificate_iid(g, driver.p)
    if isinstance(driver, MarkovDriver):
        return build_s1bar_markov(g, driver.arcs).states, certificate_markov(g, driver)
    if isinstance(driver, LayerDriver):
        return build_s1_layer(g, driver.k), certificate_layer(g, driver)
    raise DriverSpecError(f"Unsupported driver {driver!r}")


def default_depth_bound(g: Graph, cert: CommunicationCertificate) -> int:
    return max(4 * (g.n - 1), 2 * cert.core_depth)


# ---------------------------------------------------------------------------
# Truncated state space
# ---------------------------------------------------------------------------


@dataclass
class StateSpace:
    """
    States reachable from S1 whose depth stays within ``depth_bound``.

    Index ``len(states)`` is the tail bookkeeping class for deeper states.
    """

    states: list
    encodings: list[bytes]
    depth_bound: int
    core_indices: tuple[int, ...]
    kernel: TransitionKernel
    index: dict[bytes, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {enc: idx for idx, enc in enumerate(self.encodings)}

    def __len__(self) -> int:
        return len(self.states)

    @property
    def tail_index(self) -> int:
        return len(self.states)

    @property
    def depths(self) -> np.ndarray:
        return np.array([self.kernel.depth(s) for s in self.states], dtype=int)

    @property
    def rest_indices(self) -> np.ndarray:
        mask = np.ones(len(self.states), dtype=bool)
        mask[list(self.core_indices)] = False
        return np.flatnonzero(mask)

    def index_of(self, state) -> Optional[int]:
        return self.index.get(self.kernel.encode(state))


def enumerate_states(
    g: Graph,
    driver: DriverSpec,
    depth_bound: int,
    core: Optional[Sequence] = None,
    cap: Optional[int] = None,
) -> StateSpace:
    """Breadth-first closure of S1; states deeper than ``depth_bound`` go to the tail."""
    kernel = kernel_for(g, driver)
    if core is None:
        core, _ = communicating_set(g, driver)
    deepest = max(kernel.depth(c) for c in core)
    if deepest > depth_bound:
        raise DepthBoundTooSmall(
            f"Communicating set reaches depth {deepest}, bound is {depth_bound}"
        )

    seen: dict[bytes, object] = {}
    queue = deque()
    for state in core:
        enc = kernel.encode(state)
        if enc not in seen:
            seen[enc] = state
            queue.append(state)
    while queue:
        state = queue.popleft()
        for _, nxt, _ in kernel.law(state):
            if kernel.depth(nxt) > depth_bound:
                continue
            enc = kernel.encode(nxt)
            if enc in seen:
                continue
            seen[enc] = nxt
            queue.append(nxt)
            if cap is not None and len(seen) > cap:
                raise StateCapExceeded(
                    f"More than {cap} states within depth {depth_bound}; "
                    "use the regenerative estimator (regen) instead"
                )

    encodings = sorted(seen)
    states = [seen[enc] for enc in encodings]
    lookup = {enc: idx for idx, enc in enumerate(encodings)}
    core_indices = tuple(dict.fromkeys(lookup[kernel.encode(c)] for c in core))
    logger.info("Enumerated %d states within depth %d", len(states), depth_bound)
    return StateSpace(
        states=states,
        encodings=encodings,
        depth_bound=depth_bound,
        core_indices=core_indices,
        kernel=kernel,
    )


@dataclass
class TransitionModel:
    """
    Sparse transition matrix on the truncated space.

    ``matrix`` is substochastic: mass leaving the truncation is recorded in
    ``leak``. ``redistributed`` spreads that mass proportionally over each
    row's in-range targets.
    """

    space: StateSpace
    matrix: sparse.csr_matrix
    leak: np.ndarray
    redistributed: sparse.csr_matrix

    @property
    def driver(self) -> DriverSpec:
        return self.space.kernel.driver

    def blocks(self, redistributed: bool = True):
        """(M11, M12, M21, M22) split by S1 membership."""
        m = self.redistributed if redistributed else self.matrix
        core = np.asarray(self.space.core_indices)
        rest = self.space.rest_indices
        return (
            m[core][:, core],
            m[core][:, rest],
            m[rest][:, core],
            m[rest][:, rest],
        )

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel() + self.leak


def assemble_transitions(space: StateSpace) -> TransitionModel:
    kernel = space.kernel
    size = len(space)
    rows, cols, vals = [], [], []
    leak = np.zeros(size)
    for r, state in enumerate(space.states):
        for prob, nxt, _ in kernel.law(state):
            c = space.index.get(kernel.encode(nxt)) if kernel.depth(nxt) <= space.depth_bound else None
            if c is None:
                leak[r] += prob
            else:
                rows.append(r)
                cols.append(c)
                vals.append(prob)
    matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(size, size))
    matrix.sum_duplicates()

    sums = np.asarray(matrix.sum(axis=1)).ravel()
    bad = np.flatnonzero(np.abs(sums + leak - 1.0) > ROW_SUM_TOLERANCE)
    if bad.size:
        raise DriverSpecError(f"Transition rows {bad[:5].tolist()} are not stochastic")

    # Rows with every target beyond the bound restart uniformly on S1.
    stranded = sums <= 0
    scale = np.divide(1.0, sums, out=np.zeros_like(sums), where=~stranded)
    redistributed = sparse.diags(scale) @ matrix
    if stranded.any():
        idx = np.flatnonzero(stranded)
        core = np.asarray(space.core_indices)
        restart = sparse.csr_matrix(
            (
                np.full(idx.size * core.size, 1.0 / core.size),
                (np.repeat(idx, core.size), np.tile(core, idx.size)),
            ),
            shape=(size, size),
        )
        redistributed = redistributed + restart
        logger.warning("%d truncated rows have no in-range target; restarting them on S1", idx.size)
    logger.info(
        "Assembled %d x %d transition matrix, %d nonzeros, max leak %.3e",
        size, size, matrix.nnz, float(leak.max(initial=0.0)),
    )
    return TransitionModel(
        space=space, matrix=matrix, leak=leak, redistributed=sparse.csr_matrix(redistributed)
    )


# ---------------------------------------------------------------------------
# Certificate check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CertificateCheck:
    s: int
    alpha_prime: float
    min_entry: float
    worst_start: int
    worst_target: int
    interior_states: int

    @property
    def passed(self) -> bool:
        return self.min_entry >= self.alpha_prime

    def as_json(self) -> dict:
        return {
            "s": self.s,
            "alpha_prime": self.alpha_prime,
            "min_entry": self.min_entry,
            "worst_start": self.worst_start,
            "worst_target": self.worst_target,
            "interior_states": self.interior_states,
            "passed": self.passed,
        }


def verify_certificate(
    model: TransitionModel, cert: CommunicationCertificate
) -> CertificateCheck:
    """
    min over interior x and x' in S1 of M^s(x, x') against alpha_prime.

    Interior states sit at most ``depth_bound - s`` deep, so no s-step path
    from them leaves the truncation. Leaked mass counts as failure.
    """
    space = model.space
    interior = np.flatnonzero(space.depths <= space.depth_bound - cert.s)
    if interior.size == 0:
        raise DepthBoundTooSmall(
            f"No state lies {cert.s} steps inside depth bound {space.depth_bound}"
        )
    core = np.asarray(space.core_indices)
    # Column c of M^s via s matrix-vector products from the indicator of c.
    columns = np.zeros((len(space), core.size))
    columns[core, np.arange(core.size)] = 1.0
    for _ in range(cert.s):
        columns = model.matrix @ columns
    entries = columns[interior]
    flat_idx = int(np.argmin(entries))
    r, c = np.unravel_index(flat_idx, entries.shape)
    check = CertificateCheck(
        s=cert.s,
        alpha_prime=cert.alpha_prime,
        min_entry=float(entries[r, c]),
        worst_start=int(interior[r]),
        worst_target=int(core[c]),
        interior_states=int(interior.size),
    )
    if not check.passed:
        raise CertificateViolation(
            f"min M^{cert.s}(x, x') = {check.min_entry:.3e} below alpha' = {cert.alpha_prime:.3e}",
            check=check,
        )
    return check


def neumann_killing_norm(model: TransitionModel, killing_time: int) -> float:
    """
    ||M22^killing_time||_inf on the absorbing (leaky) matrix.

    M22 is nonnegative, so the norm is the largest entry of M22^t applied to
    the ones vector.
    """
    *_, m22 = model.blocks(redistributed=False)
    if m22.shape[0] == 0:
        return 0.0
    mass = np.ones(m22.shape[0])
    for _ in range(killing_time):
        mass = m22 @ mass
    return float(mass.max())
