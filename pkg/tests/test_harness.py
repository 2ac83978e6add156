import numpy as np
import pytest

from xadmm.admm import StoppingRule, initial_state, solve
from xadmm.errors import WorkerFailure
from xadmm.harness import HarnessSession, make_assignment, run_round, seed_local_states
from xadmm.lbfgs import InnerSolverOptions
from xadmm.oracles import FunctionOracle
from xadmm.zoo import generate_robust_svm


def test_assignment_one_batch_each():
    groups = [a.batch_indices for a in make_assignment(4, 4)]
    assert groups == [[1], [2], [3], [4]]


def test_assignment_contiguous_uneven():
    groups = [a.batch_indices for a in make_assignment(5, 2, policy="contiguous")]
    assert groups == [[1, 2, 3], [4, 5]]


def test_assignment_round_robin():
    groups = [a.batch_indices for a in make_assignment(6, 3, policy="round-robin")]
    assert groups == [[1, 4], [2, 5], [3, 6]]


def test_assignment_partition_properties():
    rng = np.random.default_rng(2)
    for _ in range(50):
        m = int(rng.integers(1, 40))
        workers = int(rng.integers(1, 12))
        policy = "contiguous" if rng.random() < 0.5 else "round-robin"
        groups = [a.batch_indices for a in make_assignment(m, workers, policy)]
        flat = sorted(i for g in groups for i in g)
        assert flat == list(range(1, m + 1))
        sizes = [len(g) for g in groups]
        assert max(sizes) - min(sizes) <= 1


def test_assignment_validation():
    with pytest.raises(ValueError):
        make_assignment(3, 0)
    with pytest.raises(ValueError):
        make_assignment(3, 2, policy="magic")


def test_trace_equivalence_across_worker_counts():
    problem, _ = generate_robust_svm(24, 3, 4, seed=11)
    stop = StoppingRule(mode="max-iters", max_iters=25)
    traces = {}
    for workers in (1, 2, 4):
        _, trace = solve(problem, rho=5.0, stopping=stop, workers=workers)
        traces[workers] = [
            (repr(r.f_k), repr(r.r_g_norm), repr(r.r_h_norm),
             repr(r.r_consensus_norm), repr(r.z_change), r.inner_iters)
            for r in trace
        ]
    assert traces[1] == traces[2] == traces[4]


def test_run_round_exactly_once_in_batch_order():
    problem, _ = generate_robust_svm(12, 2, 3, seed=5)
    assignments = make_assignment(problem.m, 2, policy="round-robin")
    state = initial_state(problem, 2.0)
    seed_local_states(problem, assignments, state)
    results = run_round(problem, assignments, state, InnerSolverOptions())
    assert [r.batch_index for r in results] == [0, 1, 2]

    # a second round starts from the updated local states
    again = run_round(problem, assignments, state, InnerSolverOptions())
    assert any(np.any(a.x != b.x) for a, b in zip(results, again))


def test_worker_failure_aborts_round():
    problem, _ = generate_robust_svm(12, 2, 3, seed=5)

    def broken(x):
        raise RuntimeError("sensor unplugged")

    problem.objectives[2] = FunctionOracle(problem.batch_dim(2), 1, broken, "broken")
    problem.meta.pop("svm_reduced_batches", None)
    with pytest.raises(WorkerFailure) as info:
        solve(problem, rho=1.0, stopping=StoppingRule(mode="max-iters", max_iters=3), workers=3)
    assert isinstance(info.value.cause, RuntimeError)
    assert 0 <= info.value.worker_id < 3


def test_session_reusable_and_closeable():
    problem, _ = generate_robust_svm(8, 2, 2, seed=1)
    with HarnessSession(problem, 2, InnerSolverOptions()) as session:
        state = initial_state(problem, 1.0)
        first = session.run_round(state)
        assert len(first) == problem.m
    # close() is idempotent
    session.close()
