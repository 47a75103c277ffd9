import numpy as np

from ...services.chain import build_s1bar_markov, replay_markov_core
from ...services.deposition import kernel_for
from ...services.ensemble import seed_sequence
from ...services.reporting import state_json, write_json
from ..base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Build the communicating set and its certificate and write them as JSON."

    command_name = "certify"

    def add_command_arguments(self, parser):
        parser.add_argument(
            "--representatives", type=int, default=20,
            help="Random start profiles per root when replaying Markov strings",
        )

    def run(self, experiment, context, **options):
        g, driver = experiment.graph, experiment.driver
        kernel = kernel_for(g, driver)

        with context.timed("certify"):
            core = experiment.core
            cert = experiment.certificate
        context.note(
            f"{driver.kind} certificate: s={cert.s}, alpha={cert.alpha:.3e}, "
            f"alpha'={cert.alpha_prime:.3e}, killing time {cert.killing_time}"
        )

        payload = {
            "driver": driver.describe(),
            "certificate": cert.as_json(),
            "core": [
                {"root": idx, "encoding": kernel.encode(state).hex(), "state": state_json(kernel, state)}
                for idx, state in enumerate(core)
            ],
            "default_depth_bound": experiment.depth_bound,
        }
        verdict = None
        if driver.kind == "markov":
            rng = np.random.default_rng(seed_sequence(experiment.config.seed))
            replay = replay_markov_core(
                g, build_s1bar_markov(g, driver.arcs), rng, options.get("representatives") or 20
            )
            payload["replay"] = replay
            verdict = all(row["mismatches"] == 0 for row in replay)
            context.note(f"s_bar = {cert.s}; replay {'agrees' if verdict else 'DISAGREES'} on every root")
        elif driver.kind == "layer":
            verdict = all(state.satisfies_exclusion(g) for state in core)
            payload["core_exclusion_holds"] = verdict

        write_json(context.path("certificate.json"), payload, context.manifest, "certificate", context.out_dir)
        return verdict
