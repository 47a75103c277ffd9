"""Graphs and driver graphs shared by the test modules."""

from experiments.services.graph import validate_driver_graph, validate_graph

# Ordering example: root "i" is vertex 0, labels 1..14 keep their ids.
ORDERING_EXAMPLE_EDGES = [
    (0, 1), (0, 2), (0, 3),
    (1, 4), (1, 5),
    (2, 6), (2, 7), (6, 7), (5, 6),
    (3, 13), (3, 14),
    (4, 8), (8, 9), (9, 10), (9, 11), (10, 11), (10, 12),
]
ORDERING_EXAMPLE_LABELS = ["i"] + [str(v) for v in range(1, 15)]

# Four vertices, edges 1-2, 2-3, 1-3, 3-4 (ids shifted down by one) with a
# driver that cannot move between every pair of neighbours in one step.
FOUR_VERTEX_EDGES = [(0, 1), (1, 2), (0, 2), (2, 3)]
FOUR_VERTEX_ARCS = [
    (1, 2), (1, 0), (0, 3), (0, 2), (2, 3), (2, 1), (3, 1),
    (0, 0), (1, 1), (2, 2), (3, 3),
]

# Path 0-1-2-3 driven around 0 -> 2 -> 1 -> 3 -> 0.
P4_ROTATION_ARCS = [(0, 2), (1, 3), (2, 1), (3, 0), (0, 0), (1, 1), (2, 2), (3, 3)]


def ordering_example_graph():
    return validate_graph(ORDERING_EXAMPLE_EDGES, 15, ORDERING_EXAMPLE_LABELS)


def four_vertex_graph():
    return validate_graph(FOUR_VERTEX_EDGES, 4)


def four_vertex_arcs():
    return validate_driver_graph(FOUR_VERTEX_ARCS, 4)


def rotation_arcs():
    return validate_driver_graph(P4_ROTATION_ARCS, 4)


def cycle_arcs(n: int, lazy: bool = True):
    arcs = [(v, (v + 1) % n) for v in range(n)]
    if lazy:
        arcs += [(v, v) for v in range(n)]
    return validate_driver_graph(arcs, n)


def complete_arcs(n: int):
    return validate_driver_graph([(u, v) for u in range(n) for v in range(n)], n)
