"""
Combinatorial scaffolding: adhesion graphs, driver graphs, i-orderings and
connecting strings.

Vertices are dense integer ids ``0..n-1``. External labels are mapped to ids
when a graph is ingested and kept on the graph for reporting.
"""

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import (
    DisconnectedGraph,
    DuplicateEdge,
    EmptyVertexSet,
    NotReachable,
    SelfLoop,
    VertexOutOfRange,
)


@dataclass(frozen=True)
class Graph:
    """Undirected, connected adhesion graph (V, E)."""

    n: int
    edges: frozenset[tuple[int, int]]
    labels: tuple[str, ...] = ()
    neighbors: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    closed_neighborhoods: tuple[tuple[int, ...], ...] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self):
        adjacency: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            adjacency[u].append(v)
            adjacency[v].append(u)
        neighbors = tuple(tuple(sorted(adj)) for adj in adjacency)
        object.__setattr__(self, "neighbors", neighbors)
        object.__setattr__(
            self,
            "closed_neighborhoods",
            tuple(tuple(sorted((v, *neighbors[v]))) for v in range(self.n)),
        )
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(v) for v in range(self.n)))

    def adjacent(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self.edges

    def label(self, v: int) -> str:
        return self.labels[v]

    def max_degree(self) -> int:
        return max((len(nb) for nb in self.neighbors), default=0)

    def adjacency(self) -> sparse.csr_matrix:
        return _adjacency(self.n, self.edges)


@dataclass(frozen=True)
class DirectedDriverGraph:
    """Allowed-transition graph (V, E_A) of the driving Markov chain."""

    n: int
    arcs: frozenset[tuple[int, int]]
    successors: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        out: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.arcs:
            out[u].append(v)
        object.__setattr__(self, "successors", tuple(tuple(sorted(o)) for o in out))

    def is_lazy(self) -> bool:
        return all((v, v) in self.arcs for v in range(self.n))

    def adjacency(self) -> sparse.csr_matrix:
        return _adjacency(self.n, self.arcs)


@dataclass(frozen=True)
class Ordering:
    """An i-ordering: V minus the root, grown by nearest-neighbour additions."""

    root: int
    sequence: tuple[int, ...]


@dataclass(frozen=True)
class ConnectingString:
    """Shortest directed path c(v, w), listed without its endpoint w."""

    source: int
    target: int
    path: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.path)


@dataclass(frozen=True)
class DriverGraphReport:
    irreducible: bool
    lazy: bool
    diameter: Optional[int]


def validate_graph(
    raw_edges: Iterable[Sequence[int]],
    n: int,
    labels: Optional[Sequence[str]] = None,
) -> Graph:
    """
    Build a Graph from an edge list, checking every structural invariant.

    Raises EmptyVertexSet, VertexOutOfRange, SelfLoop, DuplicateEdge or
    DisconnectedGraph.
    """
    if n < 1:
        raise EmptyVertexSet("A graph needs at least one vertex")
    if labels is not None and len(labels) != n:
        raise VertexOutOfRange(f"Expected {n} labels, got {len(labels)}")

    edges: set[tuple[int, int]] = set()
    for raw in raw_edges:
        u, v = (int(raw[0]), int(raw[1]))
        for endpoint in (u, v):
            if not 0 <= endpoint < n:
                raise VertexOutOfRange(f"Vertex {endpoint} outside 0..{n - 1}")
        if u == v:
            raise SelfLoop(f"Self-loop at vertex {u}")
        key = (min(u, v), max(u, v))
        if key in edges:
            raise DuplicateEdge(f"Duplicate edge {key}")
        edges.add(key)

    graph = Graph(n=n, edges=frozenset(edges), labels=tuple(labels or ()))
    count, component = csgraph.connected_components(graph.adjacency(), directed=False)
    if count > 1:
        missing = np.flatnonzero(component != component[0]).tolist()
        raise DisconnectedGraph(
            f"Graph is disconnected: vertices {missing} not reachable from 0"
        )
    return graph


def validate_driver_graph(raw_arcs: Iterable[Sequence[int]], n: int) -> DirectedDriverGraph:
    """Build a DirectedDriverGraph; arcs must reference vertices in range."""
    if n < 1:
        raise EmptyVertexSet("A driver graph needs at least one vertex")
    arcs: set[tuple[int, int]] = set()
    for raw in raw_arcs:
        u, v = (int(raw[0]), int(raw[1]))
        for endpoint in (u, v):
            if not 0 <= endpoint < n:
                raise VertexOutOfRange(f"Vertex {endpoint} outside 0..{n - 1}")
        arcs.add((u, v))
    return DirectedDriverGraph(n=n, arcs=frozenset(arcs))


def path_graph(n: int) -> Graph:
    return validate_graph([(v, v + 1) for v in range(n - 1)], n)


def complete_graph(n: int) -> Graph:
    return validate_graph([(u, v) for u in range(n) for v in range(u + 1, n)], n)


def cycle_graph(n: int) -> Graph:
    if n < 3:
        return path_graph(n)
    return validate_graph([(v, (v + 1) % n) for v in range(n)], n)


def named_graph(name: str) -> Graph:
    """
    Resolve a builtin graph name: ``P<n>`` (path), ``K<n>`` (complete) or
    ``C<n>`` (cycle).
    """
    family, size = name[:1].upper(), name[1:]
    if not size.isdigit():
        raise VertexOutOfRange(f"Unknown graph name {name!r}")
    builders = {"P": path_graph, "K": complete_graph, "C": cycle_graph}
    if family not in builders:
        raise VertexOutOfRange(f"Unknown graph family {family!r} in {name!r}")
    return builders[family](int(size))


def undirected_arcs(g: Graph) -> DirectedDriverGraph:
    """Driver graph allowing moves along every edge plus staying put."""
    arcs = {(v, v) for v in range(g.n)}
    for u, v in g.edges:
        arcs.add((u, v))
        arcs.add((v, u))
    return DirectedDriverGraph(n=g.n, arcs=frozenset(arcs))


def build_i_ordering(g: Graph, i: int) -> Ordering:
    """
    Grow V from ``i`` one adjacent vertex at a time.

    Among all vertices at distance 1 from the grown prefix the smallest id is
    taken next, so the ordering is deterministic.
    """
    if not 0 <= i < g.n:
        raise VertexOutOfRange(f"Root {i} outside 0..{g.n - 1}")
    grown = {i}
    frontier = set(g.neighbors[i])
    sequence: list[int] = []
    while frontier:
        nxt = min(frontier)
        frontier.discard(nxt)
        grown.add(nxt)
        sequence.append(nxt)
        frontier.update(w for w in g.neighbors[nxt] if w not in grown)
    return Ordering(root=i, sequence=tuple(sequence))


def is_valid_ordering(g: Graph, ordering: Ordering) -> bool:
    """Check the permutation property and d(a_k, prefix) = 1 at every step."""
    expected = set(range(g.n)) - {ordering.root}
    if set(ordering.sequence) != expected or len(ordering.sequence) != len(expected):
        return False
    prefix = {ordering.root}
    for v in ordering.sequence:
        if not any(w in prefix for w in g.neighbors[v]):
            return False
        prefix.add(v)
    return True


def shortest_connecting_string(d: DirectedDriverGraph, v: int, w: int) -> ConnectingString:
    """
    Shortest directed path from v to w in E_A, with w dropped from the list.

    BFS expands successors in increasing id order, so ties resolve to the
    lexicographically smallest path.
    """
    if v == w:
        return ConnectingString(source=v, target=w, path=())
    parent = {v: v}
    queue = deque([v])
    while queue:
        u = queue.popleft()
        for nxt in d.successors[u]:
            if nxt in parent:
                continue
            parent[nxt] = u
            if nxt == w:
                path = [u]
                while path[-1] != v:
                    path.append(parent[path[-1]])
                return ConnectingString(source=v, target=w, path=tuple(reversed(path)))
            queue.append(nxt)
    raise NotReachable(f"No directed path from {v} to {w}")


def directed_distances(d: DirectedDriverGraph) -> np.ndarray:
    """All-pairs hop counts in E_A; ``inf`` where no directed path exists."""
    return csgraph.shortest_path(d.adjacency(), directed=True, unweighted=True)


def check_driver_graph(d: DirectedDriverGraph) -> DriverGraphReport:
    """Irreducibility, laziness and directed diameter of E_A."""
    count, _ = csgraph.connected_components(d.adjacency(), directed=True, connection="strong")
    irreducible = count == 1
    diameter = int(directed_distances(d).max()) if irreducible else None
    return DriverGraphReport(irreducible=irreducible, lazy=d.is_lazy(), diameter=diameter)


def _adjacency(n: int, pairs: Iterable[tuple[int, int]]) -> sparse.csr_matrix:
    pairs = list(pairs)
    rows = np.fromiter((u for u, _ in pairs), dtype=np.int64, count=len(pairs))
    cols = np.fromiter((v for _, v in pairs), dtype=np.int64, count=len(pairs))
    return sparse.csr_matrix((np.ones(len(pairs)), (rows, cols)), shape=(n, n))
