"""Three-nested-loop comparator solver.

An outer multiplier loop freezes the constraint duals, a middle consensus
ADMM distributes the resulting smooth separable problem over batches, and
the innermost quasi-Newton solver handles each unconstrained subproblem.
The constraint duals advance only once the middle loop has reached
consensus, which is exactly what makes this construction more expensive
than merging the two outer loops.
"""

import time
from dataclasses import dataclass

import numpy as np

from .admm import (
    StoppingRule,
    _metrics_from_values,
    dual_update_lambda,
    dual_update_mu,
    initial_state,
    run_batch_round,
    z_update,
)
from .errors import MaxItersExceeded
from .lbfgs import InnerSolverOptions

__all__ = ["BaselineOptions", "WorkCounters", "baseline_solve"]


@dataclass(frozen=True)
class BaselineOptions:
    rho_outer: float = 10.0
    rho_admm: float = 1.0
    outer_tol: float = 1e-4
    inner_admm_tol: float = 1e-3
    max_outer: int = 200
    max_middle: int = 5000
    outer_growth: float = 1.0

    def __post_init__(self):
        if min(self.rho_outer, self.rho_admm, self.outer_tol, self.inner_admm_tol) <= 0.0:
            raise ValueError("penalties and tolerances must be positive")
        if self.max_outer < 1 or self.max_middle < 1:
            raise ValueError("iteration budgets must be >= 1")
        if self.outer_growth < 1.0:
            raise ValueError("outer_growth must be >= 1")


@dataclass
class WorkCounters:
    outer_iterations: int = 0
    middle_iterations: int = 0
    inner_iterations: int = 0
    inner_evals: int = 0


def baseline_solve(problem, opts=None, inner_opts=None, reference=None, stopping=None,
                   workers=1, metrics_sink=None):
    """Run the nested comparator and return ``(state, trace, counters)``.

    ``stopping`` (optional) is evaluated after every middle-loop iteration so
    reference-distance runs terminate the moment the shared iterate is close
    enough, mirroring how the extended solver is budgeted.  Without it the
    outer loop ends once the stacked constraint violation drops below
    ``opts.outer_tol``.  Exhausting the middle-loop budget raises
    MaxItersExceeded tagged "middle"; exhausting the outer budget returns the
    trace with ``state.converged`` False.
    """
    opts = opts or BaselineOptions()
    inner_opts = inner_opts or InnerSolverOptions()
    if stopping is not None and stopping.mode == "reference-distance" and reference is None:
        raise ValueError("reference-distance stopping needs a reference solution")

    state = initial_state(problem, opts.rho_admm)
    counters = WorkCounters()
    trace = []
    rho_outer = opts.rho_outer
    session = None
    if workers > 1:
        from .harness import HarnessSession

        session = HarnessSession(problem, workers, inner_opts)

    def middle_round():
        t0 = time.perf_counter_ns()
        if session is not None:
            from .harness import RoundMessage

            msg = RoundMessage(
                z=state.z,
                lambda_by_batch={i + 1: state.lambda_i[i] for i in range(problem.m)},
                rho=opts.rho_admm,
                mu_g_by_batch={i + 1: state.mu_g_i[i] for i in range(problem.m)},
                mu_h_by_batch={i + 1: state.mu_h_i[i] for i in range(problem.m)},
                rho_constraint=rho_outer,
                update_duals=False,
            )
            results = session.dispatch(msg)
        else:
            results = [
                run_batch_round(
                    problem, i, state.x_i[i], state.z,
                    state.mu_g_i[i], state.mu_h_i[i], state.lambda_i[i],
                    opts.rho_admm, inner_opts,
                    rho_constraint=rho_outer, update_duals=False,
                )
                for i in range(problem.m)
            ]
        inner_iters = 0
        for res in results:
            state.x_i[res.batch_index] = res.x
            inner_iters += res.inner_iterations
            counters.inner_iterations += res.inner_iterations
            counters.inner_evals += res.inner_evals

        z_prev = state.z
        shared = [state.x_i[i][: problem.shared_dim] for i in range(problem.m)]
        state.z = z_update(shared, state.lambda_i, opts.rho_admm, problem.m)
        for i in range(problem.m):
            state.lambda_i[i] = dual_update_lambda(
                state.lambda_i[i], shared[i] - state.z, opts.rho_admm
            )
        state.k += 1
        counters.middle_iterations += 1
        row = _metrics_from_values(
            problem, state,
            [r.f_val for r in results],
            [r.g_val for r in results],
            [r.h_val for r in results],
            z_prev, reference,
            inner_iters=inner_iters,
            elapsed_ns=time.perf_counter_ns() - t0,
            outer_iter=counters.outer_iterations + 1,
        )
        trace.append(row)
        if metrics_sink is not None:
            metrics_sink(row)
        return results, row

    try:
        for _ in range(opts.max_outer):
            # middle loop: consensus ADMM at frozen constraint duals
            results = row = None
            for _ in range(opts.max_middle):
                results, row = middle_round()
                if stopping is not None and stopping.fired(row):
                    state.converged = True
                    state.stop_reason = stopping.mode
                    counters.outer_iterations += 1
                    return state, trace, counters
                if row.r_consensus_norm <= opts.inner_admm_tol:
                    break
            else:
                raise MaxItersExceeded(
                    f"middle loop exceeded {opts.max_middle} iterations "
                    f"(consensus residual {row.r_consensus_norm:.3e})",
                    level="middle",
                )
            counters.outer_iterations += 1

            violation_sq = 0.0
            for res in results:
                violation_sq += float(np.dot(res.g_val, res.g_val))
                violation_sq += float(np.dot(res.h_val, res.h_val))
            if np.sqrt(violation_sq) <= opts.outer_tol and stopping is None:
                state.converged = True
                state.stop_reason = "outer-tol"
                return state, trace, counters

            # outer dual ascent at the middle-loop solution
            for res in results:
                i = res.batch_index
                if res.g_val.size:
                    state.mu_g_i[i] = dual_update_mu(state.mu_g_i[i], res.g_val, rho_outer)
                if res.h_val.size:
                    state.mu_h_i[i] = dual_update_mu(state.mu_h_i[i], res.h_val, rho_outer)
            rho_outer *= opts.outer_growth

        state.converged = False
        state.stop_reason = "max-outer"
        return state, trace, counters
    finally:
        if session is not None:
            session.close()
