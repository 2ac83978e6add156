import json
import os

import numpy as np
import pytest

from xadmm.errors import NoConvergence
from xadmm.lbfgs import InnerSolverOptions, minimize
from xadmm.oracles import FunctionOracle
from xadmm.problems import ConsensusProblem, ConstraintBatch
from xadmm.reference import (
    default_rho_schedule,
    get_reference,
    solve_penalty_oracle,
    solve_reference,
)
from xadmm.zoo import generate_enclosing_ball, generate_robust_svm, toy_1d_qp


def test_toy_reference_is_analytic():
    problem, _ = toy_1d_qp()
    ref = solve_reference(problem, harvest_iters=300)
    assert ref.f_star == 1.0
    assert ref.z_star[0] == 1.0
    assert ref.lambda_star_i[0][0] == pytest.approx(0.0, abs=1e-12)
    assert float(ref.mu_g_star_i[0][0]) > 1.0  # harvested transformed dual grows


def test_two_point_ball_reference_analytic():
    problem, _ = generate_enclosing_ball(np.array([[0.0, 0.0], [2.0, 0.0]]), 1)
    ref = solve_reference(problem, harvest_iters=100)
    assert np.allclose(ref.z_star[:2], [1.0, 0.0])
    assert ref.z_star[2] == pytest.approx(1.0)
    assert ref.f_star == pytest.approx(1.0)


def test_penalty_oracle_unconstrained_equals_inner_solver():
    def fn(x):
        return float((x - 2.5) @ (x - 2.5)), 2.0 * (x - 2.5)

    problem = ConsensusProblem(
        shared_dim=1,
        batches=[ConstraintBatch(index=1)],
        objectives=[FunctionOracle(1, 1, fn, "shifted")],
    )
    v, f = solve_penalty_oracle(problem)
    direct = minimize(FunctionOracle(1, 1, fn), np.zeros(1),
                      InnerSolverOptions(grad_tol=1e-10))
    assert abs(v[0] - direct.x_min[0]) <= 1e-8
    assert abs(f - direct.f_min) <= 1e-12


def test_penalty_error_decays_with_rho_on_toy():
    problem, _ = toy_1d_qp()
    errors = []
    for rho_max in (2 ** 8, 2 ** 12, 2 ** 16, 2 ** 20):
        schedule = [float(2 ** k) for k in range(0, int(np.log2(rho_max)) + 1)]
        v, _ = solve_penalty_oracle(problem, rho_schedule=schedule)
        errors.append(abs(v[0] - 1.0))
    assert all(a > b for a, b in zip(errors, errors[1:]))
    assert errors[-1] <= 1e-5


def test_penalty_two_point_ball():
    problem, _ = generate_enclosing_ball(np.array([[0.0, 0.0], [2.0, 0.0]]), 1)
    v, f = solve_penalty_oracle(problem)
    assert abs(v[0] - 1.0) <= 1e-5 and abs(v[1]) <= 1e-5


def test_cross_oracle_agreement_small_problems(cache_dir):
    problem, _ = toy_1d_qp()
    _, f_pen = solve_penalty_oracle(problem)
    ref = solve_reference(problem, harvest_iters=100)
    assert abs(f_pen - ref.f_star) / max(1.0, abs(ref.f_star)) <= 1e-6

    svm_problem, svm_inst = generate_robust_svm(50, 5, 4, seed=1)
    svm_ref = get_reference(svm_inst, cache_dir=cache_dir, harvest_iters=0)
    _, f_pen = solve_penalty_oracle(svm_problem)
    rel = abs(f_pen - svm_ref.f_star) / max(1.0, abs(svm_ref.f_star))
    assert rel <= 1e-3  # acceptance-level agreement with the default schedule

    # a longer continuation reproduces the tighter agreement level
    schedule = [float(2 ** k) for k in range(0, 25)]
    _, f_tight = solve_penalty_oracle(svm_problem, rho_schedule=schedule)
    assert abs(f_tight - svm_ref.f_star) / max(1.0, abs(svm_ref.f_star)) <= 1e-6


def test_reference_validates_feasibility_and_duals(cache_dir):
    problem, inst = generate_robust_svm(30, 4, 3, seed=21)
    ref = get_reference(inst, cache_dir=cache_dir, harvest_iters=200)
    ref.validate(problem)  # raises on violation
    for mu in ref.mu_g_star_i:
        assert float(np.min(mu, initial=0.0)) >= 0.0
    assert np.max(np.abs(np.sum(ref.lambda_star_i, axis=0))) <= 1e-10


def test_reference_cache_round_trip(tmp_path):
    _, inst = generate_robust_svm(20, 3, 2, seed=22)
    cache = str(tmp_path / "cache")
    ref1 = get_reference(inst, cache_dir=cache, harvest_iters=150)
    files = os.listdir(cache)
    assert len(files) == 1
    ref2 = get_reference(inst, cache_dir=cache, harvest_iters=150)
    assert ref1.f_star == ref2.f_star
    assert np.array_equal(ref1.z_star, ref2.z_star)
    for a, b in zip(ref1.mu_g_star_i, ref2.mu_g_star_i):
        assert np.array_equal(a, b)
    for a, b in zip(ref1.lambda_star_i, ref2.lambda_star_i):
        assert np.array_equal(a, b)
    payload = json.loads((tmp_path / "cache" / files[0]).read_text())
    assert payload["format"] == "xadmm-reference" and payload["version"] == 1
    # decimal text round-trips exactly
    assert payload["f_star"] == ref1.f_star


def test_reference_serves_any_rebatching(tmp_path):
    from xadmm.zoo import rebatch

    _, inst = generate_robust_svm(20, 3, 4, seed=23)
    cache = str(tmp_path / "cache")
    ref4 = get_reference(inst, cache_dir=cache, harvest_iters=100)
    ref2 = get_reference(rebatch(inst, 2), cache_dir=cache, harvest_iters=100)
    assert len(os.listdir(cache)) == 1  # same data hash, one entry
    assert np.array_equal(ref4.z_star, ref2.z_star)
    assert sum(len(m) for m in ref4.mu_g_star_i) == sum(len(m) for m in ref2.mu_g_star_i)


def test_infeasible_problem_raises_no_convergence():
    # x <= -1 and x >= 1 cannot both hold
    def g0(x):
        return np.array([x[0] + 1.0, 1.0 - x[0]]), np.array([[1.0], [-1.0]])

    def fn(x):
        return float(x @ x), 2.0 * x

    problem = ConsensusProblem(
        shared_dim=1,
        batches=[ConstraintBatch(index=1, g0=FunctionOracle(1, 2, g0, "clash"))],
        objectives=[FunctionOracle(1, 1, fn, "norm")],
    )
    with pytest.raises(NoConvergence):
        solve_reference(problem, harvest_iters=0)


def test_default_schedule_shape():
    sched = default_rho_schedule()
    assert sched[0] == 1.0 and sched[-1] == 2.0 ** 20
    assert all(b == 2 * a for a, b in zip(sched, sched[1:]))
