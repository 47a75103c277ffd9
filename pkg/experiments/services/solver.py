"""
Invariant distribution of the relative-height chain.

Two routes:
- exact: block elimination onto S1 on the truncated space, the inverse of
  (1 - M22) applied through its Neumann series, and a Perron vector of the
  reduced S1 matrix;
- regenerative: excursions from an anchor state in S1, with batch-means
  confidence intervals.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse, stats
from scipy.sparse.linalg import splu

from .chain import (
    CommunicationCertificate,
    TransitionModel,
    communicating_set,
    neumann_killing_norm,
)
from .deposition import DriverSpec, LayerDriver, changed_coordinates, kernel_for
from .ensemble import DEFAULT_CHUNKS, SeedLike, UniformStream, run_chunked
from .errors import ConfigError, CycleTimeout, NeumannDivergence, PerronFailure, SmallGraph
from .graph import Graph

logger = logging.getLogger(__name__)

NEUMANN_TOLERANCE = 1e-14
NEUMANN_MAX_TERMS = 100_000
PERRON_TOLERANCE = 1e-12
PERRON_MAX_ITERATIONS = 100_000


@dataclass
class InvariantDistribution:
    """Probabilities indexed by canonical state encodings."""

    encodings: list[bytes]
    probs: np.ndarray
    tail_bound: float
    method: str
    diagnostics: dict = field(default_factory=dict)
    stderr: Optional[np.ndarray] = None
    absorbing: Optional[np.ndarray] = None

    def __post_init__(self):
        self._lookup = {enc: idx for idx, enc in enumerate(self.encodings)}

    def prob(self, encoding: bytes) -> float:
        idx = self._lookup.get(encoding)
        return 0.0 if idx is None else float(self.probs[idx])

    def as_vector(self, space) -> np.ndarray:
        """Project onto the ordering of ``space``; states absent here get 0."""
        return np.array([self.prob(enc) for enc in space.encodings])

    def mass_outside(self, space) -> float:
        return float(max(0.0, 1.0 - self.as_vector(space).sum()))


@dataclass
class RegenerationRecord:
    anchor: bytes
    cycles: int
    total_steps: int
    mean_return_time: float
    return_time_halfwidth: float
    longest_cycle: int
    visit_counts: dict[bytes, float]


# ---------------------------------------------------------------------------
# Exact truncated solve
# ---------------------------------------------------------------------------


def neumann_apply(
    m22: sparse.csr_matrix, rhs: np.ndarray, left: bool = False
) -> tuple[np.ndarray, int]:
    """
    (1 - M22)^-1 rhs (or rhs (1 - M22)^-1 when ``left``) by summing the
    Neumann series until the summand's sup norm drops below 1e-14.

    Falls back to a sparse LU solve if the series is still running after
    NEUMANN_MAX_TERMS terms.
    """
    term = np.array(rhs, dtype=float)
    total = term.copy()
    op = m22.T.tocsr() if left else m22
    if left:
        term = term.T
        total = total.T
    for iteration in range(1, NEUMANN_MAX_TERMS + 1):
        term = op @ term
        total += term
        size = float(np.abs(term).max(initial=0.0))
        if size < NEUMANN_TOLERANCE:
            return (total.T if left else total), iteration

    logger.warning(
        "Neumann series not below %.0e after %d terms (last %.3e); solving by LU",
        NEUMANN_TOLERANCE, NEUMANN_MAX_TERMS, size,
    )
    system = sparse.identity(m22.shape[0], format="csc") - op.tocsc()
    try:
        solved = splu(system).solve(np.asarray(rhs.T if left else rhs, dtype=float))
    except RuntimeError as exc:
        raise NeumannDivergence(f"(1 - M22) is singular: {exc}", norm=size) from exc
    return (solved.T if left else solved), NEUMANN_MAX_TERMS


def perron_vector(reduced: np.ndarray) -> tuple[np.ndarray, float, int]:
    """
    Left Perron vector of a nonnegative square matrix by power iteration on
    (R + I)/2 with 1-norm renormalisation.

    Returns (vector, eigenvalue of R, iterations).
    """
    size = reduced.shape[0]
    lazy = 0.5 * (reduced + np.eye(size))
    vec = np.full(size, 1.0 / size)
    for iteration in range(1, PERRON_MAX_ITERATIONS + 1):
        nxt = vec @ lazy
        scale = nxt.sum()
        if scale <= 0:
            raise PerronFailure("Reduced matrix annihilated the iterate")
        nxt /= scale
        if np.abs(nxt - vec).sum() < PERRON_TOLERANCE:
            eigenvalue = float((nxt @ reduced).sum())
            return nxt, eigenvalue, iteration
        vec = nxt
    raise PerronFailure(
        f"Power iteration did not converge in {PERRON_MAX_ITERATIONS} iterations"
    )


def _block_solve(model: TransitionModel, redistributed: bool) -> dict:
    m11, m12, m21, m22 = model.blocks(redistributed=redistributed)
    core = np.asarray(model.space.core_indices)
    rest = model.space.rest_indices
    if m22.shape[0] == 0:
        reduced = m11.toarray()
        neumann_terms = 0
    else:
        absorbed, neumann_terms = neumann_apply(m22, m21.toarray())
        reduced = m11.toarray() + m12 @ absorbed

    pi1, eigenvalue, perron_iterations = perron_vector(reduced)
    if m22.shape[0]:
        pi2, more_terms = neumann_apply(m22, (m12.T @ pi1)[None, :], left=True)
        pi2 = np.asarray(pi2).ravel()
        neumann_terms = max(neumann_terms, more_terms)
    else:
        pi2 = np.zeros(0)

    probs = np.zeros(len(model.space))
    probs[core] = pi1
    probs[rest] = pi2
    probs = np.clip(probs, 0.0, None)
    probs /= probs.sum()
    return {
        "probs": probs,
        "reduced": reduced,
        "eigenvalue": eigenvalue,
        "perron_iterations": perron_iterations,
        "neumann_terms": neumann_terms,
    }


def solve_invariant_exact(
    model: TransitionModel, cert: Optional[CommunicationCertificate] = None
) -> InvariantDistribution:
    """
    Stationary law on the truncated space.

    The reported ``probs`` come from the redistributed chain; the absorbing
    (quasi-stationary) solution is kept alongside and their TV distance goes
    into the diagnostics.
    """
    space = model.space
    if cert is None:
        _, cert = communicating_set(space.kernel.g, space.kernel.driver)

    killing_norm = neumann_killing_norm(model, cert.killing_time)
    limit = 1.0 - cert.alpha
    if killing_norm > limit + 1e-12:
        raise NeumannDivergence(
            f"||M22^{cert.killing_time}||_inf = {killing_norm:.6g} exceeds 1 - alpha = {limit:.6g}",
            norm=killing_norm,
        )

    redistributed = _block_solve(model, redistributed=True)
    absorbing = _block_solve(model, redistributed=False)
    probs = redistributed["probs"]

    residual = float(np.abs(probs @ model.redistributed - probs).sum())
    reduced_row_error = float(np.abs(redistributed["reduced"].sum(axis=1) - 1.0).max())
    if cert.killing_time == 0:
        tail_bound = 0.0
    else:
        blocks = max(0, (space.depth_bound - cert.core_depth) // cert.killing_time)
        tail_bound = float((1.0 - cert.alpha) ** blocks)

    diagnostics = {
        "residual": residual,
        "reduced_row_sum_error": reduced_row_error,
        "killing_norm": killing_norm,
        "killing_limit": limit,
        "tv_discrepancy": tv_distance(probs, absorbing["probs"]),
        "leakage_rate": float(probs @ model.leak),
        "absorbing_eigenvalue": absorbing["eigenvalue"],
        "neumann_terms": redistributed["neumann_terms"],
        "perron_iterations": redistributed["perron_iterations"],
        "states": len(space),
        "depth_bound": space.depth_bound,
    }
    logger.info(
        "Exact solve: %d states, residual %.2e, Neumann terms %d, Perron iterations %d",
        len(space), residual, diagnostics["neumann_terms"], diagnostics["perron_iterations"],
    )
    return InvariantDistribution(
        encodings=list(space.encodings),
        probs=probs,
        tail_bound=tail_bound,
        method="exact_truncated",
        diagnostics=diagnostics,
        absorbing=absorbing["probs"],
    )


# ---------------------------------------------------------------------------
# Regenerative estimator
# ---------------------------------------------------------------------------


def _regeneration_chunk(kernel, anchor, cycles: int, rng, cap: int) -> dict:
    stream = UniformStream(rng)
    anchor_key = kernel.encode(anchor)
    visits: dict[bytes, int] = {}
    lengths = []
    for _ in range(cycles):
        state = anchor
        length = 0
        while True:
            key = kernel.encode(state)
            visits[key] = visits.get(key, 0) + 1
            state, _, _ = kernel.advance(state, stream.next())
            length += 1
            if kernel.encode(state) == anchor_key:
                break
            if length >= cap:
                raise CycleTimeout(
                    f"Regeneration cycle exceeded {cap} steps without returning to the anchor"
                )
        lengths.append(length)
    return {"visits": visits, "lengths": lengths}


def solve_invariant_regenerative(
    driver: DriverSpec,
    g: Graph,
    anchor,
    n_cycles: int,
    seed: SeedLike,
    cap: int = 10_000_000,
    threads: int = 1,
    chunks: int = DEFAULT_CHUNKS,
    core: Optional[Sequence] = None,
) -> tuple[InvariantDistribution, RegenerationRecord]:
    """
    Estimate pi from ``n_cycles`` excursions started at ``anchor``.

    pi(y) is the total number of visits to y over the total number of steps.
    Chunks double as batches for the batch-means confidence intervals. The
    anchor must belong to S1 (``core``, built from the driver when omitted).
    """
    kernel = kernel_for(g, driver)
    if core is None:
        core, _ = communicating_set(g, driver)
    if kernel.encode(anchor) not in {kernel.encode(x) for x in core}:
        raise ConfigError({"anchor": f"state {anchor!r} is not in the communicating set"})

    def task(size, rng, _idx):
        return _regeneration_chunk(kernel, anchor, size, rng, cap)

    batches = run_chunked(task, n_cycles, seed, threads=threads, chunks=chunks)
    encodings = sorted({enc for b in batches for enc in b["visits"]})
    index = {enc: i for i, enc in enumerate(encodings)}
    counts = np.zeros((len(batches), len(encodings)))
    steps = np.zeros(len(batches))
    all_lengths = []
    for row, batch in enumerate(batches):
        for enc, c in batch["visits"].items():
            counts[row, index[enc]] = c
        steps[row] = sum(batch["lengths"])
        all_lengths.extend(batch["lengths"])

    total_steps = float(steps.sum())
    probs = counts.sum(axis=0) / total_steps
    batch_estimates = counts / steps[:, None]
    if len(batches) > 1:
        quantile = stats.t.ppf(0.975, df=len(batches) - 1)
        stderr = batch_estimates.std(axis=0, ddof=1) / np.sqrt(len(batches))
        lengths = np.asarray(all_lengths, dtype=float)
        halfwidth = float(
            stats.t.ppf(0.975, df=lengths.size - 1) * lengths.std(ddof=1) / np.sqrt(lengths.size)
        ) if lengths.size > 1 else 0.0
    else:
        quantile = 0.0
        stderr = np.zeros(len(encodings))
        halfwidth = 0.0

    anchor_key = kernel.encode(anchor)
    record = RegenerationRecord(
        anchor=anchor_key,
        cycles=n_cycles,
        total_steps=int(total_steps),
        mean_return_time=total_steps / n_cycles,
        return_time_halfwidth=halfwidth,
        longest_cycle=int(max(all_lengths)),
        visit_counts={enc: float(counts[:, i].sum() / n_cycles) for i, enc in enumerate(encodings)},
    )
    logger.info(
        "Regeneration: %d cycles, %d steps, mean return time %.4f",
        n_cycles, int(total_steps), record.mean_return_time,
    )
    dist = InvariantDistribution(
        encodings=encodings,
        probs=probs,
        tail_bound=0.0,
        method="regenerative",
        diagnostics={
            "cycles": n_cycles,
            "batches": len(batches),
            "t_quantile": float(quantile),
            "mean_return_time": record.mean_return_time,
            "return_time_halfwidth": halfwidth,
            "anchor_identity": float(probs[index[anchor_key]] * record.mean_return_time),
        },
        stderr=stderr,
    )
    return dist, record


# ---------------------------------------------------------------------------
# Growth rate and distances
# ---------------------------------------------------------------------------


def max_unchanged(x: Sequence[int], y: Sequence[int], layered: bool = False) -> bool:
    """
    Whether a one-step move left the maximal height alone, read off the
    relative profiles. Layer moves may also change nothing at all.
    """
    changed = changed_coordinates(x, y)
    return changed <= 1 if layered else changed == 1


def lln_rate(pi: InvariantDistribution, model: TransitionModel) -> float:
    """
    Growth rate of the maximal height: 1 minus the stationary probability
    that a step leaves the maximum unchanged.
    """
    kernel = model.space.kernel
    if kernel.g.n <= 2:
        raise SmallGraph(
            f"The max-unchanged indicator needs more than two vertices, graph has {kernel.g.n}"
        )
    layered = isinstance(kernel.driver, LayerDriver)
    probs = pi.as_vector(model.space)
    stay = 0.0
    for idx, state in enumerate(model.space.states):
        if probs[idx] == 0.0:
            continue
        x = kernel.profile(state)
        for p, nxt, _ in kernel.law(state):
            if max_unchanged(x, kernel.profile(nxt), layered):
                stay += probs[idx] * p
    return 1.0 - stay


def tv_distance(
    mu: np.ndarray, nu: np.ndarray, tail_mu: float = 0.0, tail_nu: float = 0.0
) -> float:
    """Half the L1 distance, plus the unresolved tail mass of both sides."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    return float(min(1.0, 0.5 * np.abs(mu - nu).sum() + 0.5 * (tail_mu + tail_nu)))


def align(first: InvariantDistribution, second: InvariantDistribution) -> tuple[np.ndarray, np.ndarray]:
    """Both distributions on the union of their supports."""
    keys = sorted(set(first.encodings) | set(second.encodings))
    return (
        np.array([first.prob(k) for k in keys]),
        np.array([second.prob(k) for k in keys]),
    )
