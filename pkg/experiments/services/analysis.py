"""
Path-level analysis: product couplings, the coupling matrix, the maximal
height as an additive functional, concentration tails and the bias bound.

Monte Carlo checks compare an empirical quantity against a certified bound
and pass when the estimate stays below the bound plus three standard errors.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .chain import CommunicationCertificate, StateSpace, TransitionModel
from .deposition import (
    DriverSpec,
    LayerConfig,
    LayerDriver,
    MarkovDriver,
    changed_coordinates,
    initial_state,
    kernel_for,
)
from .ensemble import (
    ReplicaEnsemble,
    SeedLike,
    UniformStream,
    run_chunked,
    seed_sequence,
    stack_states,
)
from .errors import BoundViolationBeyondNoise, SmallGraph
from .graph import Graph
from .solver import InvariantDistribution, max_unchanged, tv_distance

logger = logging.getLogger(__name__)

NEVER = -1
NOISE_SIGMAS = 3.0


def confidence_interval(data: Sequence[float], confidence: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width; the half-width is NaN below two samples."""
    values = np.asarray(data, dtype=float).ravel()
    mean = float(values.mean()) if values.size else float("nan")
    if values.size < 2:
        return mean, float("nan")
    tcrit = float(stats.t.ppf(0.5 + confidence / 2.0, df=values.size - 1))
    return mean, tcrit * float(values.std(ddof=1)) / math.sqrt(values.size)


# ---------------------------------------------------------------------------
# Couplings
# ---------------------------------------------------------------------------


@dataclass
class CouplingRun:
    start_pair: tuple
    meet_time: int
    trajectory_pair: Optional[tuple[list, list]] = None

    @property
    def met(self) -> bool:
        return self.meet_time != NEVER


def run_product_coupling(
    a,
    b,
    driver: DriverSpec,
    g: Graph,
    cap: int,
    rng: np.random.Generator,
    record: bool = False,
) -> CouplingRun:
    """
    Independent copies until their states agree, then identical moves.

    ``meet_time`` is NEVER when the copies are still apart after ``cap`` steps.
    """
    kernel = kernel_for(g, driver)
    first, second = UniformStream(rng), UniformStream(rng)
    left, right = a, b
    path_a, path_b = [a], [b]
    meet = 0 if kernel.encode(a) == kernel.encode(b) else NEVER
    if meet == 0 and not record:
        return CouplingRun(start_pair=(a, b), meet_time=0)
    for t in range(1, cap + 1):
        u = first.next()
        left, _, _ = kernel.advance(left, u)
        right, _, _ = kernel.advance(right, u if meet != NEVER else second.next())
        if record:
            path_a.append(left)
            path_b.append(right)
        if meet == NEVER and kernel.encode(left) == kernel.encode(right):
            meet = t
            if not record:
                break
    return CouplingRun(
        start_pair=(a, b),
        meet_time=meet,
        trajectory_pair=(path_a, path_b) if record else None,
    )


def coupling_bound(lag: int, cert: CommunicationCertificate, n: int) -> float:
    """(1 - alpha'^2 |V|)^floor(lag / s)."""
    if cert.s == 0:
        return 1.0 if lag == 0 else 0.0
    base = max(0.0, 1.0 - cert.alpha_prime**2 * n)
    return base ** (lag // cert.s)


def coupling_matrix_bound(horizon: int, cert: CommunicationCertificate, n: int) -> np.ndarray:
    """Upper-triangular D[u, u'] bound for 0 <= u <= u' <= horizon."""
    lags = np.arange(horizon + 1)
    bound = np.array([coupling_bound(int(l), cert, n) for l in lags])
    gap = lags[None, :] - lags[:, None]
    return np.where(gap >= 0, bound[np.clip(gap, 0, None)], 0.0)


def random_start(g: Graph, driver: DriverSpec, rng: np.random.Generator, depth: int):
    """
    A start state far from S1: independent depths in [-depth, 0] with one
    vertex pinned to 0. Layer starts are grown by random screening runs.
    """
    if isinstance(driver, LayerDriver):
        kernel = kernel_for(g, driver)
        state = LayerConfig.settled(g, driver.k)
        for _ in range(int(rng.integers(depth, 4 * depth + 1))):
            state, _, _ = kernel.advance(state, rng.random(3))
        return state
    x = rng.integers(-depth, 1, size=g.n)
    x[rng.integers(g.n)] = 0
    x -= x.max()
    profile = tuple(int(v) for v in x)
    if isinstance(driver, MarkovDriver):
        return (profile, int(rng.integers(g.n)))
    return profile


@dataclass
class CouplingMatrixEstimate:
    horizon: int
    d_hat: np.ndarray
    bound: np.ndarray
    sigma: np.ndarray
    pairs: int
    runs: int
    meet_times: list[int] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return bool(np.all(self.d_hat <= self.bound + NOISE_SIGMAS * self.sigma))

    def rows(self) -> list[dict]:
        return [
            {"lag": lag, "d_hat": float(d), "bound": float(b), "sigma": float(s)}
            for lag, (d, b, s) in enumerate(zip(self.d_hat, self.bound, self.sigma))
        ]


def _coupling_chunk_ensemble(g, driver, starts, runs, horizon, rng) -> np.ndarray:
    """Uncoupled indicator per (pair, lag), averaged over runs."""
    a_states = [s for s, _ in starts for _ in range(runs)]
    b_states = [s for _, s in starts for _ in range(runs)]
    a = ReplicaEnsemble(g, driver, *stack_states(a_states, driver))
    b = ReplicaEnsemble(g, driver, *stack_states(b_states, driver))

    def together() -> np.ndarray:
        same = (a.profiles == b.profiles).all(axis=1)
        if a.vertices is not None:
            same &= a.vertices == b.vertices
        return same

    met = together()
    apart = np.zeros((len(a_states), horizon + 1))
    apart[:, 0] = ~met
    for lag in range(1, horizon + 1):
        ua = rng.random((a.replicas, 3))
        ub = rng.random((a.replicas, 3))
        ub[met] = ua[met]
        a.step(ua)
        b.step(ub)
        met |= together()
        apart[:, lag] = ~met
    return apart.reshape(len(starts), runs, horizon + 1).mean(axis=1)


def _coupling_chunk_scalar(g, driver, starts, runs, horizon, rng) -> np.ndarray:
    out = np.zeros((len(starts), horizon + 1))
    for idx, (a, b) in enumerate(starts):
        for _ in range(runs):
            run = run_product_coupling(a, b, driver, g, horizon, rng)
            first_together = run.meet_time if run.met else horizon + 1
            out[idx, :first_together] += 1.0
    return out / runs


def estimate_coupling_matrix(
    driver: DriverSpec,
    g: Graph,
    cert: CommunicationCertificate,
    sample_pairs: int,
    horizon: int,
    seed: SeedLike,
    runs: int = 100,
    start_depth: Optional[int] = None,
    threads: int = 1,
    strict: bool = True,
) -> CouplingMatrixEstimate:
    """
    d_hat(lag): the worst sampled start pair's probability of still being
    apart after ``lag`` steps, against the certified geometric bound.
    """
    depth = start_depth or max(2, 2 * (g.n - 1))
    layered = isinstance(driver, LayerDriver)

    def task(size, rng, _idx):
        starts = [
            (random_start(g, driver, rng, depth), random_start(g, driver, rng, depth))
            for _ in range(size)
        ]
        runner = _coupling_chunk_scalar if layered else _coupling_chunk_ensemble
        return runner(g, driver, starts, runs, horizon, rng)

    per_pair = np.vstack(run_chunked(task, sample_pairs, seed, threads=threads))
    d_hat = per_pair.max(axis=0)
    bound = np.array([coupling_bound(lag, cert, g.n) for lag in range(horizon + 1)])
    worst = np.maximum(d_hat, bound)
    sigma = np.sqrt(worst * (1.0 - worst) / runs)
    estimate = CouplingMatrixEstimate(
        horizon=horizon, d_hat=d_hat, bound=bound, sigma=sigma,
        pairs=sample_pairs, runs=runs,
    )
    if strict and not estimate.passed:
        lag = int(np.argmax(d_hat - bound - NOISE_SIGMAS * sigma))
        raise BoundViolationBeyondNoise(
            f"Uncoupled fraction {d_hat[lag]:.4f} at lag {lag} exceeds bound {bound[lag]:.4f} "
            f"by more than {NOISE_SIGMAS:g} sigma"
        )
    return estimate


# ---------------------------------------------------------------------------
# Maximal height
# ---------------------------------------------------------------------------


def argmax_change_indicator(x: Sequence[int], x_next: Sequence[int]) -> bool:
    """True iff exactly one coordinate changed, i.e. the maximum stayed put."""
    if len(x) <= 2:
        raise SmallGraph(f"Indicator is ambiguous on {len(x)} vertices")
    return changed_coordinates(x, x_next) == 1


def reconstruct_dropped_site(x: Sequence[int], x_next: Sequence[int]) -> Optional[int]:
    """
    Drop site recovered from two consecutive relative profiles: the single
    changed coordinate, or the new unique maximum when the maximum rose.
    """
    changed = [j for j, (a, b) in enumerate(zip(x, x_next)) if a != b]
    if len(changed) == 1:
        return changed[0]
    tops = [j for j, v in enumerate(x_next) if v == 0]
    if len(changed) > 1 and len(tops) == 1:
        return tops[0]
    return None


@dataclass
class MaxHeightTrajectory:
    additive: np.ndarray
    direct: np.ndarray
    dropped: np.ndarray
    states: Optional[list] = None

    @property
    def consistent(self) -> bool:
        return bool(np.array_equal(self.additive, self.direct))


def simulate_max_height(
    driver: DriverSpec,
    g: Graph,
    steps: int,
    rng: np.random.Generator,
    start=None,
    record: bool = False,
) -> MaxHeightTrajectory:
    """
    m_V(t) for t = 0..steps, two ways: counting rises of the tracked maximum,
    and summing the max-unchanged indicator of the relative profiles.
    """
    kernel = kernel_for(g, driver)
    state = initial_state(g, driver, start)
    stream = UniformStream(rng)
    layered = isinstance(driver, LayerDriver)
    use_indicator = g.n > 2

    additive = np.zeros(steps + 1, dtype=np.int64)
    direct = np.zeros(steps + 1, dtype=np.int64)
    dropped = np.zeros(steps, dtype=np.int64)
    states = [state] if record else None
    for t in range(steps):
        before = kernel.profile(state)
        state, site, rose = kernel.advance(state, stream.next())
        dropped[t] = site
        direct[t + 1] = direct[t] + int(rose)
        if use_indicator:
            stayed = max_unchanged(before, kernel.profile(state), layered)
        else:
            stayed = not rose
        additive[t + 1] = additive[t] + (0 if stayed else 1)
        if record:
            states.append(state)
    return MaxHeightTrajectory(additive=additive, direct=direct, dropped=dropped, states=states)


def _final_heights(
    g: Graph, driver: DriverSpec, starts: list, steps: int, rng: np.random.Generator
) -> np.ndarray:
    """m_V(steps) for each start; vectorised unless the driver is layered."""
    if isinstance(driver, LayerDriver):
        kernel = kernel_for(g, driver)
        out = np.zeros(len(starts), dtype=np.int64)
        for idx, state in enumerate(starts):
            stream = UniformStream(rng)
            for _ in range(steps):
                state, _, rose = kernel.advance(state, stream.next())
                out[idx] += rose
        return out
    ensemble = ReplicaEnsemble(g, driver, *stack_states(starts, driver))
    ensemble.run(steps, rng)
    return ensemble.max_height.copy()


def sample_heights(
    driver: DriverSpec,
    g: Graph,
    steps: int,
    replicas: int,
    seed: SeedLike,
    start_sampler: Optional[Callable[[np.random.Generator, int], list]] = None,
    threads: int = 1,
) -> np.ndarray:
    """m_V(steps) over replicas; starts default to the driver's initial state."""

    def task(size, rng, _idx):
        if start_sampler is None:
            starts = [initial_state(g, driver)] * size
        else:
            starts = start_sampler(rng, size)
        return _final_heights(g, driver, starts, steps, rng)

    return np.concatenate(run_chunked(task, replicas, seed, threads=threads))


def sample_states(
    pi: InvariantDistribution, space: StateSpace
) -> Callable[[np.random.Generator, int], list]:
    """Start sampler drawing from pi restricted to ``space``."""
    weights = pi.as_vector(space)
    weights = weights / weights.sum()

    def draw(rng: np.random.Generator, count: int) -> list:
        picks = rng.choice(len(space), size=count, p=weights)
        return [space.states[i] for i in picks]

    return draw


def burn_in_sampler(
    g: Graph, driver: DriverSpec, burn_in: int
) -> Callable[[np.random.Generator, int], list]:
    """Start sampler running the chain ``burn_in`` steps from its initial state."""
    kernel = kernel_for(g, driver)

    def draw(rng: np.random.Generator, count: int) -> list:
        out = []
        for _ in range(count):
            state = initial_state(g, driver)
            stream = UniformStream(rng)
            for _ in range(burn_in):
                state, _, _ = kernel.advance(state, stream.next())
            out.append(state)
        return out

    return draw


def concentration_constant(cert: CommunicationCertificate, n: int) -> float:
    """c = |V|^2 alpha'^4 / s^2."""
    if cert.s == 0:
        return math.inf
    return n**2 * cert.alpha_prime**4 / cert.s**2


@dataclass
class ConcentrationReport:
    horizon: int
    replicas: int
    mean: float
    constant: float
    rows: list[dict]

    @property
    def passed(self) -> bool:
        return all(row["passed"] for row in self.rows)


def concentration_report(
    driver: DriverSpec,
    g: Graph,
    cert: CommunicationCertificate,
    horizon: int,
    replicas: int,
    seed: SeedLike,
    start_sampler=None,
    threads: int = 1,
) -> ConcentrationReport:
    """Empirical P(|m_V(t) - mean| > y) against 2 exp(-c y^2 / 2t) on y = sqrt(t) j/4."""
    heights = sample_heights(driver, g, horizon, replicas, seed, start_sampler, threads)
    mean = float(heights.mean())
    c = concentration_constant(cert, g.n)
    rows = []
    for j in range(1, 9):
        y = math.sqrt(horizon) * j / 4.0
        empirical = float(np.mean(np.abs(heights - mean) > y))
        bound = 2.0 * math.exp(-c * y * y / (2.0 * horizon)) if math.isfinite(c) else 0.0
        sigma = math.sqrt(max(empirical, 1.0 / replicas) * (1.0 - empirical) / replicas)
        rows.append(
            {
                "y": y,
                "empirical": empirical,
                "bound": bound,
                "sigma": sigma,
                "passed": empirical <= bound + NOISE_SIGMAS * sigma,
            }
        )
    return ConcentrationReport(horizon=horizon, replicas=replicas, mean=mean, constant=c, rows=rows)


@dataclass
class BiasReport:
    horizon: int
    stationary_mean: float
    flat_mean: float
    gap: float
    standard_error: float
    bound: float

    @property
    def margin(self) -> float:
        return NOISE_SIGMAS * self.standard_error

    @property
    def passed(self) -> bool:
        return self.gap <= self.bound + self.margin

    def as_json(self) -> dict:
        return {
            "horizon": self.horizon,
            "stationary_mean": self.stationary_mean,
            "flat_mean": self.flat_mean,
            "gap": self.gap,
            "standard_error": self.standard_error,
            "bound": self.bound,
            "passed": self.passed,
        }


def bias_bound(cert: CommunicationCertificate, n: int) -> float:
    """s / (|V| alpha'^2)."""
    return cert.s / (n * cert.alpha_prime**2)


def bias_check(
    driver: DriverSpec,
    g: Graph,
    cert: CommunicationCertificate,
    horizon: int,
    replicas: int,
    seed: SeedLike,
    stationary_sampler,
    threads: int = 1,
) -> BiasReport:
    """|E_pi m_V(t) - E_0 m_V(t)| against s / (|V| alpha'^2)."""
    stationary_seed, flat_seed = seed_sequence(seed).spawn(2)
    from_pi = sample_heights(driver, g, horizon, replicas, stationary_seed, stationary_sampler, threads)
    from_flat = sample_heights(driver, g, horizon, replicas, flat_seed, None, threads)
    se = math.sqrt(from_pi.var(ddof=1) / replicas + from_flat.var(ddof=1) / replicas) if replicas > 1 else 0.0
    return BiasReport(
        horizon=horizon,
        stationary_mean=float(from_pi.mean()),
        flat_mean=float(from_flat.mean()),
        gap=abs(float(from_pi.mean() - from_flat.mean())),
        standard_error=se,
        bound=bias_bound(cert, g.n),
    )


def bias_stable(first: BiasReport, second: BiasReport) -> bool:
    """Two gap estimates agree within three combined standard errors."""
    spread = math.hypot(first.standard_error, second.standard_error)
    return abs(first.gap - second.gap) <= NOISE_SIGMAS * spread + 1e-12


# ---------------------------------------------------------------------------
# General path observables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathObservable:
    """
    Additive functional sum_u f(x(u), x(u+1)) with a declared bound on how
    much it can move when one state of the path is replaced.
    """

    name: str
    increment: Callable[[object, object], float]
    variation_bound: float

    def evaluate(self, path: Sequence) -> float:
        return float(sum(self.increment(a, b) for a, b in zip(path, path[1:])))

    def oscillation(self, path: Sequence, u: int, replacement) -> float:
        lo, hi = max(0, u - 1), min(len(path), u + 2)
        window = list(path[lo:hi])
        before = self.evaluate(window)
        window[u - lo] = replacement
        return abs(self.evaluate(window) - before)


def max_height_observable(kernel) -> PathObservable:
    layered = isinstance(kernel.driver, LayerDriver)
    return PathObservable(
        name="max_height",
        increment=lambda a, b: 0.0
        if max_unchanged(kernel.profile(a), kernel.profile(b), layered)
        else 1.0,
        variation_bound=2.0,
    )


def core_occupation_observable(kernel, core: Sequence) -> PathObservable:
    keys = {kernel.encode(c) for c in core}
    return PathObservable(
        name="core_occupation",
        increment=lambda a, _b: 1.0 if kernel.encode(a) in keys else 0.0,
        variation_bound=1.0,
    )


def observed_variation(
    observable: PathObservable, paths: Sequence[Sequence], rng: np.random.Generator, probes: int = 200
) -> float:
    """Largest oscillation seen when swapping one path state for another sampled state."""
    pool = [state for path in paths for state in path]
    worst = 0.0
    for _ in range(probes):
        path = paths[int(rng.integers(len(paths)))]
        u = int(rng.integers(len(path)))
        worst = max(worst, observable.oscillation(path, u, pool[int(rng.integers(len(pool)))]))
    return worst


def path_concentration_bound(delta: Sequence[float], coupling: np.ndarray, y: float) -> float:
    """2 exp(-2 y^2 / ||D delta||^2) for a variation vector delta."""
    spread = coupling @ np.asarray(delta, dtype=float)
    norm_sq = float(spread @ spread)
    if norm_sq == 0.0:
        return 0.0 if y > 0 else 2.0
    return 2.0 * math.exp(-2.0 * y * y / norm_sq)


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------


def tv_decay_profile(
    model: TransitionModel, pi: np.ndarray, start: int, horizon: int
) -> np.ndarray:
    """TV(M^t(x, .), pi) for t = 0..horizon, from the redistributed matrix."""
    row = np.zeros(len(model.space))
    row[start] = 1.0
    out = np.zeros(horizon + 1)
    transposed = model.redistributed.T.tocsr()
    for t in range(horizon + 1):
        out[t] = tv_distance(row, pi)
        row = transposed @ row
    return out


@dataclass
class MarkovOrderResult:
    tests: int
    min_p_value: float
    level: float
    statistics: list[dict]

    @property
    def rejects(self) -> bool:
        """Order-1 property rejected after a Bonferroni correction."""
        return self.tests > 0 and self.min_p_value < self.level / self.tests


def markov_order_test(
    sequence: Sequence, level: float = 0.01, min_count: int = 50
) -> MarkovOrderResult:
    """
    For each middle state b, a chi-square test of independence between the
    predecessor and the successor of b.
    """
    triples: dict = {}
    for a, b, c in zip(sequence, sequence[1:], sequence[2:]):
        triples.setdefault(b, []).append((a, c))
    results = []
    for middle, pairs in triples.items():
        if len(pairs) < min_count:
            continue
        before = sorted({a for a, _ in pairs}, key=repr)
        after = sorted({c for _, c in pairs}, key=repr)
        if len(before) < 2 or len(after) < 2:
            continue
        row = {a: i for i, a in enumerate(before)}
        col = {c: i for i, c in enumerate(after)}
        table = np.zeros((len(before), len(after)))
        for a, c in pairs:
            table[row[a], col[c]] += 1
        statistic, p_value, dof, _ = stats.chi2_contingency(table)
        results.append({"state": repr(middle), "statistic": float(statistic), "dof": int(dof), "p_value": float(p_value)})
    return MarkovOrderResult(
        tests=len(results),
        min_p_value=min((r["p_value"] for r in results), default=1.0),
        level=level,
        statistics=results,
    )


def empirical_tv_horizon(
    driver: DriverSpec,
    g: Graph,
    start_a,
    start_b,
    replicas: int,
    max_horizon: int,
    rng: np.random.Generator,
    threshold: float = 0.05,
) -> tuple[Optional[int], np.ndarray]:
    """
    First t at which the laws of the state from two starts are within
    ``threshold`` in TV; None when that is not shown by ``max_horizon``.

    Pairs are coupled synchronously (both copies consume the same uniforms),
    so the fraction of pairs not yet coalesced bounds the TV distance from
    above. Returns the hit time and that fraction for t = 0..hit.
    """
    kernel = kernel_for(g, driver)
    left = [start_a] * replicas
    right = [start_b] * replicas
    profile = np.ones(max_horizon + 1)
    for t in range(max_horizon + 1):
        apart = sum(1 for a, b in zip(left, right) if kernel.encode(a) != kernel.encode(b))
        profile[t] = apart / replicas
        if profile[t] < threshold:
            return t, profile[: t + 1]
        uniforms = rng.random((replicas, 3))
        left = [kernel.advance(s, u)[0] for s, u in zip(left, uniforms)]
        right = [kernel.advance(s, u)[0] for s, u in zip(right, uniforms)]
    return None, profile
