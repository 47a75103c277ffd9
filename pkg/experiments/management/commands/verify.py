"""
Run every cross-check for one configuration and write a JSON verdict.

Each check ends up ``pass``, ``fail`` or ``skipped`` (with a reason). A
domain error inside a check fails that check and is reported with its
message; the remaining checks still run.
"""

import math
from typing import Optional

import numpy as np
from django.conf import settings

from ...services.analysis import (
    bias_check,
    bias_stable,
    burn_in_sampler,
    concentration_report,
    empirical_tv_horizon,
    estimate_coupling_matrix,
    sample_heights,
    sample_states,
    simulate_max_height,
)
from ...services.chain import assemble_transitions, enumerate_states, verify_certificate
from ...services.deposition import initial_state
from ...services.ensemble import seed_sequence
from ...services.errors import CertificateViolation, DepositionLabError, StateCapExceeded
from ...services.reporting import plot_concentration, plot_coupling_decay, write_json
from ...services.solver import lln_rate, solve_invariant_exact
from ..base import ExperimentCommand

PASS, FAIL, SKIPPED = "pass", "fail", "skipped"

RESIDUAL_LIMIT = 1e-8
ROW_SUM_LIMIT = 1e-9

# The certificate check enumerates s levels below S1; beyond this many states it is skipped.
CERTIFICATE_STATE_CAP = 100_000


def _status(ok: bool) -> str:
    return PASS if ok else FAIL


class Command(ExperimentCommand):
    help = "Check the certificate, coupling, concentration, bias and growth-rate bounds."

    command_name = "verify"

    def add_command_arguments(self, parser):
        parser.add_argument("--pairs", type=int, help="Sampled start pairs for the coupling check")
        parser.add_argument("--runs", type=int, help="Coupling runs per start pair")

    def config_overrides(self, options):
        overrides = super().config_overrides(options)
        overrides.update(pairs=options.get("pairs"), runs=options.get("runs"))
        return overrides

    def run(self, experiment, context, **options):
        self.experiment = experiment
        self.context = context
        self.model = None
        self.pi = None
        seeds = iter(seed_sequence(experiment.config.seed).spawn(8))

        checks = {}
        checks["certificate"] = self.guarded(self.check_certificate)
        checks["solve"] = self.guarded(self.check_solve)
        checks["coupling"] = self.guarded(self.check_coupling, next(seeds))
        checks["concentration"] = self.guarded(self.check_concentration, next(seeds))
        checks["bias"] = self.guarded(self.check_bias, next(seeds))
        checks["lln"] = self.guarded(self.check_lln, next(seeds))
        if experiment.driver.kind == "layer":
            checks["exclusion"] = self.guarded(self.check_exclusion, next(seeds))
            checks["layer_convergence"] = self.guarded(self.check_layer_convergence, next(seeds))

        passed = all(check["status"] != FAIL for check in checks.values())
        for name, check in checks.items():
            context.note(f"{name}: {check['status']}" + (f" ({check['reason']})" if "reason" in check else ""))
        write_json(
            context.path("verdict.json"),
            {"checks": checks, "verdict": _status(passed)},
            context.manifest, "verdict", context.out_dir,
        )
        return passed

    def guarded(self, check, *args) -> dict:
        try:
            return check(*args)
        except StateCapExceeded as exc:
            return {"status": SKIPPED, "reason": str(exc)}
        except DepositionLabError as exc:
            return {"status": FAIL, "reason": f"{type(exc).__name__}: {exc}"}

    # -- exact checks --------------------------------------------------

    def _model(self, depth_bound: int, cap: Optional[int] = None):
        if self.model is not None and self.model.space.depth_bound == depth_bound:
            return self.model
        exp = self.experiment
        space = enumerate_states(
            exp.graph, exp.driver, depth_bound, core=exp.core, cap=cap or settings.DEPO_LAB_STATE_CAP
        )
        return assemble_transitions(space)

    def check_certificate(self) -> dict:
        cert = self.experiment.certificate
        depth = max(self.experiment.depth_bound, cert.core_depth + cert.s)
        with self.context.timed("certificate"):
            model = self._model(depth, min(CERTIFICATE_STATE_CAP, settings.DEPO_LAB_STATE_CAP))
            if depth == self.experiment.depth_bound:
                self.model = model
            try:
                result = verify_certificate(model, cert)
            except CertificateViolation as exc:
                return {"status": FAIL, "reason": str(exc), **(exc.check.as_json() if exc.check else {})}
        return {"status": PASS, "depth_bound": depth, **result.as_json()}

    def check_solve(self) -> dict:
        with self.context.timed("solve"):
            self.model = self._model(self.experiment.depth_bound)
            self.pi = solve_invariant_exact(self.model, self.experiment.certificate)
        diag = self.pi.diagnostics
        ok = (
            diag["residual"] <= RESIDUAL_LIMIT
            and diag["reduced_row_sum_error"] <= ROW_SUM_LIMIT
            and diag["killing_norm"] <= diag["killing_limit"] + 1e-12
        )
        return {
            "status": _status(ok),
            "states": diag["states"],
            "residual": diag["residual"],
            "reduced_row_sum_error": diag["reduced_row_sum_error"],
            "killing_norm": diag["killing_norm"],
            "killing_limit": diag["killing_limit"],
            "tail_bound": self.pi.tail_bound,
        }

    # -- Monte Carlo checks --------------------------------------------

    def check_coupling(self, seed) -> dict:
        exp, config = self.experiment, self.experiment.config
        cert = exp.certificate
        horizon = max(1, 3 * cert.s)
        with self.context.timed("coupling"):
            estimate = estimate_coupling_matrix(
                exp.driver, exp.graph, cert, config.pairs, horizon, seed,
                runs=config.runs, threads=exp.threads, strict=False,
            )
        if config.plots:
            plot_coupling_decay(estimate, self.context.path("coupling.png"), self.context.manifest, self.context.out_dir)
        lags = range(cert.s, horizon + 1, max(cert.s, 1))
        return {
            "status": _status(estimate.passed),
            "horizon": horizon,
            "blocks": [
                {"lag": lag, "d_hat": float(estimate.d_hat[lag]), "bound": float(estimate.bound[lag])}
                for lag in lags
            ],
        }

    def check_concentration(self, seed) -> dict:
        exp, config = self.experiment, self.experiment.config
        with self.context.timed("concentration"):
            report = concentration_report(
                exp.driver, exp.graph, exp.certificate, config.horizon, config.replicas, seed,
                threads=exp.threads,
            )
        if config.plots:
            plot_concentration(report, self.context.path("concentration.png"), self.context.manifest, self.context.out_dir)
        return {
            "status": _status(report.passed),
            "horizon": report.horizon,
            "mean": report.mean,
            "constant": report.constant,
            "rows": report.rows,
        }

    def _stationary_sampler(self):
        if self.pi is not None:
            return sample_states(self.pi, self.model.space)
        exp = self.experiment
        return burn_in_sampler(exp.graph, exp.driver, 10 * max(exp.certificate.s, 1))

    def check_bias(self, seed) -> dict:
        exp, config = self.experiment, self.experiment.config
        short_seed, long_seed = seed.spawn(2)
        sampler = self._stationary_sampler()
        with self.context.timed("bias"):
            short = bias_check(
                exp.driver, exp.graph, exp.certificate, config.horizon, config.replicas,
                short_seed, sampler, threads=exp.threads,
            )
            long = bias_check(
                exp.driver, exp.graph, exp.certificate, 10 * config.horizon, config.replicas,
                long_seed, sampler, threads=exp.threads,
            )
        stable = bias_stable(short, long)
        return {
            "status": _status(short.passed and long.passed and stable),
            "short": short.as_json(),
            "long": long.as_json(),
            "gap_stable": stable,
        }

    def check_lln(self, seed) -> dict:
        exp, config = self.experiment, self.experiment.config
        if self.pi is None:
            return {"status": SKIPPED, "reason": "no exact invariant distribution"}
        if exp.graph.n <= 2:
            return {"status": SKIPPED, "reason": "max-unchanged indicator needs more than two vertices"}
        steps = 10 * config.horizon
        with self.context.timed("lln"):
            rate = lln_rate(self.pi, self.model)
            heights = sample_heights(
                exp.driver, exp.graph, steps, config.replicas, seed,
                self._stationary_sampler(), threads=exp.threads,
            )
        slope = float(heights.mean()) / steps
        stderr = float(heights.std(ddof=1)) / math.sqrt(heights.size) / steps if heights.size > 1 else 0.0
        tolerance = 3.0 * stderr + self.pi.tail_bound + self.pi.diagnostics["tv_discrepancy"]
        return {
            "status": _status(abs(rate - slope) <= tolerance),
            "rate": rate,
            "simulated_slope": slope,
            "tolerance": tolerance,
            "steps": steps,
        }

    # -- layer model -----------------------------------------------------

    def check_exclusion(self, seed) -> dict:
        exp = self.experiment
        rng = np.random.default_rng(seed)
        trajectory = simulate_max_height(exp.driver, exp.graph, exp.config.horizon, rng, record=True)
        violations = sum(1 for state in trajectory.states if not state.satisfies_exclusion(exp.graph))
        return {"status": _status(violations == 0), "steps": exp.config.horizon, "violations": violations}

    def check_layer_convergence(self, seed) -> dict:
        exp = self.experiment
        start_a = initial_state(exp.graph, exp.driver)
        start_b = exp.core[-1]
        hit, profile = empirical_tv_horizon(
            exp.driver, exp.graph, start_a, start_b,
            replicas=min(exp.config.replicas, 2000),
            max_horizon=exp.config.horizon,
            rng=np.random.default_rng(seed),
        )
        return {
            "status": _status(hit is not None),
            "horizon": hit,
            "final_uncoupled_fraction": float(profile[-1]),
        }
