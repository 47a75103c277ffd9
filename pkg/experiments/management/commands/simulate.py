from ...services.analysis import markov_order_test, simulate_max_height
from ...services.deposition import encode_profile, kernel_for
from ...services.ensemble import spawn_generators
from ...services.reporting import trajectory_columns, trajectory_rows, write_json, write_rows_csv
from ..base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Simulate deposition trajectories and write the maximal height per step as CSV."

    command_name = "simulate"

    def add_command_arguments(self, parser):
        parser.add_argument(
            "--trajectories", type=int, default=1,
            help="Independent trajectories, each with its own child seed",
        )

    def run(self, experiment, context, **options):
        config = experiment.config
        g, driver = experiment.graph, experiment.driver
        kernel = kernel_for(g, driver)
        count = max(1, options.get("trajectories") or 1)
        summaries = []

        with context.timed("simulate"):
            for idx, rng in enumerate(spawn_generators(config.seed, count)):
                trajectory = simulate_max_height(driver, g, config.horizon, rng, record=True)
                name = "trajectory.csv" if count == 1 else f"trajectory_{idx:03d}.csv"
                write_rows_csv(
                    context.path(name),
                    list(trajectory_rows(trajectory, kernel)),
                    context.manifest, "trajectory", context.out_dir,
                    columns=trajectory_columns(g.n),
                )
                summary = {
                    "file": name,
                    "steps": config.horizon,
                    "final_max_height": int(trajectory.direct[-1]),
                    "slope": float(trajectory.direct[-1]) / config.horizon,
                    "indicator_consistent": trajectory.consistent if g.n > 2 else None,
                }
                if driver.kind == "layer":
                    summary["exclusion_holds"] = all(s.satisfies_exclusion(g) for s in trajectory.states)
                if driver.kind == "markov":
                    marginal = markov_order_test([encode_profile(kernel.profile(s)) for s in trajectory.states])
                    joint = markov_order_test([kernel.encode(s) for s in trajectory.states])
                    summary["order_test"] = {
                        "profile_only_rejects": marginal.rejects,
                        "profile_only_min_p": marginal.min_p_value,
                        "with_driver_rejects": joint.rejects,
                        "with_driver_min_p": joint.min_p_value,
                    }
                summaries.append(summary)
                context.note(
                    f"{name}: m_V({config.horizon}) = {summary['final_max_height']}, "
                    f"slope {summary['slope']:.6f}"
                )

        write_json(
            context.path("summary.json"),
            {"driver": driver.describe(), "trajectories": summaries},
            context.manifest, "summary", context.out_dir,
        )
        return None
