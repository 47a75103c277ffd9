import math

from django.conf import settings

from ...services.analysis import sample_heights, tv_decay_profile
from ...services.chain import assemble_transitions, enumerate_states
from ...services.errors import SmallGraph
from ...services.reporting import (
    distribution_payload,
    export_state_space,
    plot_tv_decay,
    write_json,
)
from ...services.solver import lln_rate, solve_invariant_exact
from ..base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Solve the truncated invariant distribution exactly and report the growth rate."

    command_name = "solve"

    def add_command_arguments(self, parser):
        parser.add_argument("--no-matrix", action="store_true", help="Skip the state-space and matrix export")

    def run(self, experiment, context, **options):
        config = experiment.config
        g, driver = experiment.graph, experiment.driver
        cert = experiment.certificate

        with context.timed("enumerate"):
            space = enumerate_states(
                g, driver, experiment.depth_bound,
                core=experiment.core, cap=settings.DEPO_LAB_STATE_CAP,
            )
            model = assemble_transitions(space)
        context.note(f"{len(space)} states within depth {space.depth_bound}")

        with context.timed("solve"):
            pi = solve_invariant_exact(model, cert)
        context.note(
            f"Residual {pi.diagnostics['residual']:.3e}, tail bound {pi.tail_bound:.3e}, "
            f"TV to absorbing solution {pi.diagnostics['tv_discrepancy']:.3e}"
        )

        with context.timed("rate"):
            try:
                rate = {
                    "value": lln_rate(pi, model),
                    "error": pi.tail_bound,
                    "method": "exact",
                }
            except SmallGraph as exc:
                # Indicator undefined on one or two vertices; fall back to the simulated slope.
                context.note(f"{exc}; using the simulated slope instead")
                heights = sample_heights(
                    driver, g, config.horizon, config.replicas, config.seed, threads=experiment.threads
                )
                spread = float(heights.std(ddof=1)) if heights.size > 1 else 0.0
                rate = {
                    "value": float(heights.mean()) / config.horizon,
                    "error": 1.96 * spread / math.sqrt(heights.size) / config.horizon,
                    "method": "simulated",
                }
        context.note(f"Growth rate {rate['value']:.8f} +/- {rate['error']:.2e} ({rate['method']})")

        payload = distribution_payload(pi)
        payload["rate"] = rate
        payload["certificate"] = cert.as_json()
        write_json(context.path("distribution.json"), payload, context.manifest, "distribution", context.out_dir)
        if not options.get("no_matrix"):
            export_state_space(model, context.out_dir, context.manifest, context.out_dir)
        if config.plots:
            start = space.core_indices[0]
            profile = tv_decay_profile(model, pi.probs, start, min(config.horizon, 500))
            plot_tv_decay(profile, context.path("tv_decay.png"), context.manifest, context.out_dir)
        return None
