from django.conf import settings

from ...services.chain import assemble_transitions, enumerate_states
from ...services.reporting import distribution_payload, write_json
from ...services.solver import align, solve_invariant_exact, solve_invariant_regenerative, tv_distance
from ..base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Estimate the invariant distribution from regeneration cycles at an anchor state."

    command_name = "regen"

    def add_command_arguments(self, parser):
        parser.add_argument("--cycles", type=int)
        parser.add_argument("--anchor", type=int, help="Root vertex of the anchor state in S1")
        parser.add_argument(
            "--compare", action="store_true",
            help="Also solve exactly and report the TV distance between the two",
        )

    def config_overrides(self, options):
        overrides = super().config_overrides(options)
        overrides.update(cycles=options.get("cycles"), anchor=options.get("anchor"))
        return overrides

    def run(self, experiment, context, **options):
        config = experiment.config
        g, driver = experiment.graph, experiment.driver

        with context.timed("regenerate"):
            pi_hat, record = solve_invariant_regenerative(
                driver, g, experiment.anchor_state, config.cycles, config.seed,
                cap=settings.DEPO_LAB_CYCLE_CAP, threads=experiment.threads, core=experiment.core,
            )
        context.note(
            f"{record.cycles} cycles, {record.total_steps} steps, "
            f"mean return time {record.mean_return_time:.4f} +/- {record.return_time_halfwidth:.4f}"
        )

        payload = distribution_payload(pi_hat)
        payload["regeneration"] = {
            "anchor": record.anchor.hex(),
            "cycles": record.cycles,
            "total_steps": record.total_steps,
            "mean_return_time": record.mean_return_time,
            "return_time_halfwidth": record.return_time_halfwidth,
            "longest_cycle": record.longest_cycle,
        }

        if options.get("compare"):
            with context.timed("exact"):
                space = enumerate_states(
                    g, driver, experiment.depth_bound,
                    core=experiment.core, cap=settings.DEPO_LAB_STATE_CAP,
                )
                pi = solve_invariant_exact(assemble_transitions(space), experiment.certificate)
            exact, estimate = align(pi, pi_hat)
            distance = tv_distance(exact, estimate, tail_mu=pi.tail_bound)
            payload["comparison"] = {"tv_distance": distance, "exact_states": len(space)}
            context.note(f"TV(exact, regenerative) = {distance:.4e}")

        write_json(context.path("distribution.json"), payload, context.manifest, "distribution", context.out_dir)
        return None
