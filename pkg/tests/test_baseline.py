import numpy as np
import pytest

from xadmm.admm import StoppingRule, solve
from xadmm.baseline import BaselineOptions, baseline_solve
from xadmm.errors import MaxItersExceeded
from xadmm.lbfgs import InnerSolverOptions
from xadmm.oracles import FunctionOracle
from xadmm.problems import ConsensusProblem, ConstraintBatch
from xadmm.reference import solve_reference
from xadmm.zoo import generate_robust_svm, toy_1d_qp


def _unconstrained_problem():
    centers = [np.array([1.0]), np.array([-3.0])]
    batches, objectives = [], []
    for i, c in enumerate(centers):
        def fn(x, c=c):
            return float((x - c) @ (x - c)), 2.0 * (x - c)

        batches.append(ConstraintBatch(index=i + 1))
        objectives.append(FunctionOracle(1, 1, fn, f"f{i}"))
    return ConsensusProblem(shared_dim=1, batches=batches, objectives=objectives)


def test_unconstrained_runs_single_outer_iteration():
    problem = _unconstrained_problem()
    state, trace, counters = baseline_solve(
        problem, BaselineOptions(inner_admm_tol=1e-6, rho_admm=1.0),
    )
    assert state.converged
    assert counters.outer_iterations == 1
    assert abs(state.z[0] - (-1.0)) <= 1e-3


def test_toy_qp_matches_extended_solver():
    problem, _ = toy_1d_qp()
    opts = BaselineOptions(rho_outer=1e6, rho_admm=1.0, outer_tol=2.5e-7,
                           inner_admm_tol=1e-8, max_outer=4000)
    state, trace, counters = baseline_solve(problem, opts,
                                            inner_opts=InnerSolverOptions(grad_tol=1e-10))
    assert state.converged
    assert abs(state.x_i[0][0] - 1.0) <= 1e-3

    ext_state, _ = solve(problem, rho=1e6,
                         stopping=StoppingRule(mode="max-iters", max_iters=4000),
                         inner_opts=InnerSolverOptions(grad_tol=1e-10))
    assert abs(state.x_i[0][0] - ext_state.x_i[0][0]) <= 1e-3


def test_middle_loop_converged_before_every_outer_update():
    problem, _ = generate_robust_svm(24, 3, 3, seed=2)
    opts = BaselineOptions(rho_outer=20.0, rho_admm=2.0, outer_tol=5e-3,
                           inner_admm_tol=1e-3, max_outer=40)
    state, trace, counters = baseline_solve(problem, opts)
    assert counters.outer_iterations >= 1
    # the last row of every completed outer block satisfies the middle tolerance
    by_outer = {}
    for row in trace:
        by_outer[row.outer_iter] = row
    for outer, row in list(by_outer.items())[: counters.outer_iterations]:
        assert row.r_consensus_norm <= opts.inner_admm_tol


def test_outer_duals_stay_nonnegative():
    problem, _ = generate_robust_svm(24, 3, 3, seed=2)
    state, _, _ = baseline_solve(
        problem, BaselineOptions(rho_outer=20.0, rho_admm=2.0, outer_tol=1e-2,
                                 inner_admm_tol=1e-3, max_outer=10),
    )
    for mu in state.mu_g_i:
        assert float(np.min(mu, initial=0.0)) >= 0.0


def test_work_counters_populated():
    problem, _ = generate_robust_svm(24, 3, 3, seed=2)
    _, trace, counters = baseline_solve(
        problem, BaselineOptions(rho_outer=20.0, rho_admm=2.0, outer_tol=1e-2,
                                 inner_admm_tol=1e-3, max_outer=10),
    )
    assert counters.middle_iterations == len(trace)
    assert counters.inner_iterations > 0
    assert counters.inner_evals >= counters.inner_iterations


def test_middle_budget_exhaustion_raises_tagged_error():
    problem, _ = generate_robust_svm(24, 3, 3, seed=2)
    opts = BaselineOptions(rho_admm=0.01, inner_admm_tol=1e-12, max_middle=2)
    with pytest.raises(MaxItersExceeded) as info:
        baseline_solve(problem, opts)
    assert info.value.level == "middle"


def test_outer_budget_exhaustion_returns_unconverged():
    problem, _ = toy_1d_qp()
    opts = BaselineOptions(rho_outer=1.0, outer_tol=1e-12, inner_admm_tol=1e-6, max_outer=3)
    state, trace, counters = baseline_solve(problem, opts)
    assert not state.converged
    assert state.stop_reason == "max-outer"
    assert counters.outer_iterations == 3


def test_reference_distance_stopping_mid_middle_loop():
    problem, instance = generate_robust_svm(40, 5, 2, seed=6)
    reference = solve_reference(problem, harvest_iters=0)
    stopping = StoppingRule(mode="reference-distance", tol_reference_inf=1e-2, max_iters=100000)
    opts = BaselineOptions(rho_outer=50.0, rho_admm=10.0, outer_tol=1e-8,
                           inner_admm_tol=1e-3, max_outer=400)
    state, trace, counters = baseline_solve(problem, opts, reference=reference,
                                            stopping=stopping)
    assert state.converged
    assert trace[-1].dist_z_inf <= 1e-2
