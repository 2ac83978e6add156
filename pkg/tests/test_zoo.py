import json

import numpy as np
import pytest

from xadmm.errors import InvalidConfig
from xadmm.oracles import finite_diff_check
from xadmm.zoo import (
    BallInstance,
    RobustSvmInstance,
    data_hash,
    enclosing_ball_exhaustive,
    generate_enclosing_ball,
    generate_robust_svm,
    load_instance,
    merged_layout,
    problem_from_instance,
    rebatch,
    save_instance,
    toy_1d_qp,
)
from xadmm.reference import get_reference


def test_kappa_is_one_at_half_delta():
    _, inst = generate_robust_svm(10, 3, 2, delta=0.5, seed=0)
    assert np.all(inst.kappa == 1.0)


def test_generator_validates_config():
    with pytest.raises(InvalidConfig):
        generate_robust_svm(10, 3, 2, delta=1.0)
    with pytest.raises(InvalidConfig):
        generate_robust_svm(0, 3, 1)
    with pytest.raises(InvalidConfig):
        generate_robust_svm(10, 3, 11)
    with pytest.raises(InvalidConfig):
        generate_robust_svm(10, 3, 2, c=0.0)


def test_sigma_is_psd_with_bounded_entries():
    _, inst = generate_robust_svm(12, 6, 2, seed=3)
    for S in inst.sigma_factors:
        sigma = S.T @ S
        assert np.max(np.abs(sigma)) <= 1.0
        assert np.linalg.eigvalsh(sigma).min() >= -1e-10


def test_batch_objectives_sum_to_global_at_consensus():
    problem, inst = generate_robust_svm(21, 4, 3, seed=5)
    rng = np.random.default_rng(1)
    w = rng.standard_normal(4)
    xi = rng.uniform(0.0, 2.0, 21)
    total = 0.0
    for i, idx in enumerate(inst.batching):
        x = np.concatenate([w, xi[idx]])
        total += problem.objectives[i].scalar_eval(x)[0]
    expected = 0.5 * float(w @ w) + inst.c * float(np.sum(xi))
    assert total == pytest.approx(expected, rel=1e-12)

    bproblem, binst = generate_enclosing_ball(rng.uniform(-1, 1, (9, 2)), 3)
    shared = np.array([0.3, -0.2, 1.7])
    total = sum(obj.scalar_eval(shared)[0] for obj in bproblem.objectives)
    assert total == pytest.approx(shared[-1], rel=1e-12)


def test_zero_covariance_reduces_to_soft_margin_hinge():
    _, inst = generate_robust_svm(8, 3, 2, seed=7)
    inst.sigma_factors[:] = 0.0
    problem = problem_from_instance(inst)
    rng = np.random.default_rng(2)
    for i, idx in enumerate(inst.batching):
        x = rng.standard_normal(problem.batch_dim(i))
        w, xi = x[:3], x[3:]
        vals = problem.batches[i].g0.value(x)
        manual = 1.0 - xi - inst.labels[idx] * (inst.points[idx] @ w)
        assert np.allclose(vals[: len(idx)], manual, atol=1e-12)
        assert np.allclose(vals[len(idx):], -xi)


def test_separable_instance_recovers_analytic_optimum(cache_dir):
    # symmetric 4-point instance with Sigma = tau^2 I: the margin constraint
    # reads (2 - tau) w1 >= 1 at the symmetric optimum, so w* = 1/(2 - tau)
    tau = 0.5
    points = np.array([[2.0, 1.0], [2.0, -1.0], [-2.0, 1.0], [-2.0, -1.0]])
    labels = np.array([1.0, 1.0, -1.0, -1.0])
    factors = np.stack([tau * np.eye(2)] * 4)
    inst = RobustSvmInstance(
        points=points, labels=labels, sigma_factors=factors,
        kappa=np.ones(4), c=10.0, delta=0.5,
        batching=[np.array([0, 1]), np.array([2, 3])],
    )
    ref = get_reference(inst, cache_dir=cache_dir, harvest_iters=0)
    w_expected = 1.0 / (2.0 - tau)
    assert ref.f_star == pytest.approx(0.5 * w_expected ** 2, abs=1e-4)
    assert ref.z_star[0] == pytest.approx(w_expected, abs=1e-4)
    assert abs(ref.z_star[1]) <= 1e-6
    for x_star in ref.x_star_i:
        assert np.max(np.abs(x_star[2:])) <= 1e-6  # all slacks vanish


def test_gradient_integrity_of_generated_oracles():
    rng = np.random.default_rng(0)
    problem, _ = generate_robust_svm(15, 4, 3, seed=8)
    worst = 0.0
    for i, batch in enumerate(problem.batches):
        for _ in range(10):
            x = rng.standard_normal(problem.batch_dim(i))
            worst = max(worst, finite_diff_check(batch.g0, x))
            worst = max(worst, finite_diff_check(problem.objectives[i], x))
    assert worst <= 1e-5


def test_ball_two_points_midpoint():
    problem, inst = generate_enclosing_ball(np.array([[0.0, 0.0], [2.0, 0.0]]), 1)
    analytic = problem.meta["analytic"]
    assert np.allclose(analytic["z_star"][:2], [1.0, 0.0])
    assert analytic["z_star"][2] == pytest.approx(1.0)  # squared radius


def test_ball_single_point():
    problem, _ = generate_enclosing_ball(np.array([[0.3, -0.7]]), 1)
    analytic = problem.meta["analytic"]
    assert np.allclose(analytic["z_star"][:2], [0.3, -0.7])
    assert analytic["z_star"][2] == pytest.approx(0.0)


def test_ball_exhaustive_oracle_simple_cases():
    center, radius = enclosing_ball_exhaustive(np.array([[0.0, 0.0], [2.0, 0.0]]))
    assert np.allclose(center, [1.0, 0.0]) and radius == pytest.approx(1.0)
    center, radius = enclosing_ball_exhaustive(np.array([[1.0, 1.0]]))
    assert radius == 0.0
    # collinear points must not crash the degenerate-subset handling
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    center, radius = enclosing_ball_exhaustive(pts)
    assert np.allclose(center, [1.0, 0.0]) and radius == pytest.approx(1.0)


def test_ball_reference_matches_exhaustive(cache_dir):
    rng = np.random.default_rng(31)
    pts = rng.uniform(-1.0, 1.0, (10, 2))
    _, inst = generate_enclosing_ball(pts, 2)
    ref = get_reference(inst, cache_dir=cache_dir, harvest_iters=0)
    center, radius = enclosing_ball_exhaustive(pts)
    assert np.max(np.abs(ref.z_star[:2] - center)) <= 1e-5
    assert abs(np.sqrt(max(ref.z_star[2], 0.0)) - radius) <= 1e-5


def test_toy_instance_shape():
    problem, _ = toy_1d_qp()
    assert problem.m == 1 and problem.shared_dim == 1
    assert problem.batches[0].g0.value(np.array([0.0]))[0] == pytest.approx(-1.0)
    analytic = problem.meta["analytic"]
    assert analytic["f_star"] == 1.0 and analytic["z_star"][0] == 1.0


def test_instance_serialization_round_trip(tmp_path):
    _, inst = generate_robust_svm(9, 3, 2, seed=13)
    path = tmp_path / "svm.json"
    save_instance(path, inst)
    loaded = load_instance(path)
    assert np.array_equal(loaded.points, inst.points)
    assert np.array_equal(loaded.labels, inst.labels)
    assert np.array_equal(loaded.sigma_factors, inst.sigma_factors)
    assert loaded.c == inst.c and loaded.delta == inst.delta
    assert all(np.array_equal(a, b) for a, b in zip(loaded.batching, inst.batching))
    assert data_hash(loaded) == data_hash(inst)

    payload = json.loads(path.read_text())
    assert payload["format"] == "xadmm-instance" and payload["version"] == 1

    _, ball = generate_enclosing_ball(np.random.default_rng(0).uniform(-1, 1, (5, 2)), 2)
    ball_path = tmp_path / "ball.json"
    save_instance(ball_path, ball)
    loaded_ball = load_instance(ball_path)
    assert isinstance(loaded_ball, BallInstance)
    assert np.array_equal(loaded_ball.points, ball.points)


def test_data_hash_ignores_batching():
    _, inst = generate_robust_svm(10, 3, 2, seed=17)
    assert data_hash(inst) == data_hash(rebatch(inst, 5))
    _, other = generate_robust_svm(10, 3, 2, seed=18)
    assert data_hash(inst) != data_hash(other)


def test_rebatch_counts_differ_by_at_most_one():
    _, inst = generate_robust_svm(11, 3, 2, seed=17)
    for m in (1, 2, 3, 4, 11):
        sizes = [len(idx) for idx in rebatch(inst, m).batching]
        assert max(sizes) - min(sizes) <= 1
        assert sum(sizes) == 11
    with pytest.raises(InvalidConfig):
        rebatch(inst, 12)


def test_merged_layout_maps_constraints_per_batch():
    _, inst = generate_robust_svm(7, 2, 3, seed=19)
    layout = merged_layout(inst)
    seen_g0 = np.concatenate([rows for rows, _ in layout])
    assert sorted(seen_g0.tolist()) == list(range(14))  # margin + nonneg per point
    for (rows, locals_), idx in zip(layout, inst.batching):
        assert np.array_equal(rows, np.concatenate([idx, 7 + idx]))
        assert np.array_equal(locals_, idx)
