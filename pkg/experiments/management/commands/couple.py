import math

import numpy as np

from ...services.analysis import (
    core_occupation_observable,
    coupling_matrix_bound,
    estimate_coupling_matrix,
    max_height_observable,
    observed_variation,
    path_concentration_bound,
    simulate_max_height,
)
from ...services.deposition import kernel_for
from ...services.ensemble import seed_sequence, spawn_generators
from ...services.reporting import plot_coupling_decay, write_json, write_rows_csv
from ..base import ExperimentCommand


def observable_checks(experiment, seed, paths: int = 20, length: int = 60) -> list[dict]:
    """Sampled one-state oscillations of the path observables against their declared bounds."""
    g, driver = experiment.graph, experiment.driver
    kernel = kernel_for(g, driver)
    rngs = spawn_generators(seed, paths + 1)
    sampled = [simulate_max_height(driver, g, length, rng, record=True).states for rng in rngs[:-1]]
    results = []
    for observable in (max_height_observable(kernel), core_occupation_observable(kernel, experiment.core)):
        worst = observed_variation(observable, sampled, rngs[-1])
        results.append(
            {
                "observable": observable.name,
                "declared": observable.variation_bound,
                "observed": worst,
                "passed": worst <= observable.variation_bound,
            }
        )
    return results


class Command(ExperimentCommand):
    help = "Estimate the product-coupling matrix and compare it with the certified bound."

    command_name = "couple"

    def add_command_arguments(self, parser):
        parser.add_argument("--pairs", type=int, help="Sampled start pairs")
        parser.add_argument("--runs", type=int, help="Coupling runs per start pair")
        parser.add_argument(
            "--lag-blocks", type=int, default=3,
            help="Horizon in units of the communication time s",
        )

    def config_overrides(self, options):
        overrides = super().config_overrides(options)
        overrides.update(pairs=options.get("pairs"), runs=options.get("runs"))
        return overrides

    def run(self, experiment, context, **options):
        config = experiment.config
        g, driver = experiment.graph, experiment.driver
        cert = experiment.certificate
        horizon = max(1, (options.get("lag_blocks") or 3) * cert.s)
        coupling_seed, observable_seed = seed_sequence(config.seed).spawn(2)

        with context.timed("coupling"):
            estimate = estimate_coupling_matrix(
                driver, g, cert, config.pairs, horizon, coupling_seed,
                runs=config.runs, threads=experiment.threads, strict=False,
            )
        with context.timed("observables"):
            observables = observable_checks(experiment, observable_seed)

        blocks = [
            {
                "lag": lag,
                "d_hat": float(estimate.d_hat[lag]),
                "bound": float(estimate.bound[lag]),
                "sigma": float(estimate.sigma[lag]),
            }
            for lag in range(cert.s, horizon + 1, max(cert.s, 1))
        ]
        for row in blocks:
            context.note(f"lag {row['lag']}: uncoupled {row['d_hat']:.4f}, bound {row['bound']:.4f}")

        # Max-height tail bound from the coupling-matrix bound with delta = 2 per step.
        matrix = coupling_matrix_bound(horizon, cert, g.n)
        delta = np.full(horizon + 1, 2.0)
        tails = [
            {"y": y, "bound": path_concentration_bound(delta, matrix, y)}
            for y in (math.sqrt(horizon) * j / 2.0 for j in range(1, 7))
        ]

        passed = estimate.passed and all(o["passed"] for o in observables)
        write_rows_csv(
            context.path("coupling.csv"), estimate.rows(), context.manifest, "coupling", context.out_dir,
        )
        write_json(
            context.path("coupling.json"),
            {
                "horizon": horizon,
                "pairs": estimate.pairs,
                "runs": estimate.runs,
                "blocks": blocks,
                "coupling_passed": estimate.passed,
                "observables": observables,
                "max_height_tail_bounds": tails,
                "passed": passed,
            },
            context.manifest, "coupling_summary", context.out_dir,
        )
        if config.plots:
            plot_coupling_decay(estimate, context.path("coupling.png"), context.manifest, context.out_dir)
        return passed
