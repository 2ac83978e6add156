"""Problem generators: robust SVM instances, enclosing balls, analytic toys.

Generators are pure functions of their seed.  Each produced oracle is
vectorized over the points of its batch and carries exact analytic
Jacobians; the only smoothing is the epsilon-softened Euclidean norm in the
robust SVM cone constraint, which keeps the constraint differentiable at
w = 0 while perturbing it by at most ``norm_eps``.
"""

import hashlib
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig
from .oracles import FunctionOracle
from .problems import ConsensusProblem, ConstraintBatch

__all__ = [
    "RobustSvmInstance",
    "BallInstance",
    "ToyQpInstance",
    "generate_robust_svm",
    "generate_enclosing_ball",
    "toy_1d_qp",
    "problem_from_instance",
    "rebatch",
    "save_instance",
    "load_instance",
    "data_hash",
    "enclosing_ball_exhaustive",
]

INSTANCE_FORMAT = "xadmm-instance"
INSTANCE_VERSION = 1


def _split_counts(n, m):
    """Contiguous index groups with sizes differing by at most one."""
    base, extra = divmod(n, m)
    groups = []
    start = 0
    for i in range(m):
        count = base + (1 if i < extra else 0)
        groups.append(np.arange(start, start + count))
        start += count
    return groups


@dataclass
class RobustSvmInstance:
    """Robust soft-margin SVM data with one cone constraint per point."""

    points: np.ndarray
    labels: np.ndarray
    sigma_factors: np.ndarray
    kappa: np.ndarray
    c: float
    delta: float
    batching: list
    seed: int | None = None
    norm_eps: float = 1e-8
    label_flip: float = 0.05
    sigma_scale: float = 0.4
    kind: str = "robust-svm"

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def n_features(self):
        return self.points.shape[1]


@dataclass
class BallInstance:
    """Smallest-enclosing-ball data: one distance constraint per point."""

    points: np.ndarray
    batching: list
    seed: int | None = None
    kind: str = "enclosing-ball"

    @property
    def n_points(self):
        return self.points.shape[0]


@dataclass
class ToyQpInstance:
    """min (x-2)^2 s.t. x <= 1; optimum x*=1, f*=1, original multiplier 2."""

    kind: str = "toy-qp"
    batching: list = field(default_factory=lambda: [np.arange(1)])


def generate_robust_svm(n_points, n_features, m_batches, c=1.0, delta=0.5, seed=0,
                        label_flip=0.05, norm_eps=1e-8, sigma_scale=0.4):
    """Sample a robust SVM instance and return ``(problem, instance)``.

    Feature vectors are uniform on [-1, 1]^n.  Covariances come from
    factors ``S = sigma_scale * A / sqrt(n)`` with A uniform on
    [-1, 1]^(n x n), so every entry of ``S^T S`` lies in [-1, 1] by
    construction.  ``sigma_scale`` keeps the cone inset below the expected
    margin of the hidden hyperplane; at 1.0 the expected inset (~0.58 |w|)
    exceeds the expected margin gain (~0.41 |w|) and the optimizer collapses
    to w = 0 for any regularization weight.  Labels follow a random
    ground-truth hyperplane with a configurable flip fraction for
    non-separability.
    """
    if not 0.0 < delta < 1.0:
        raise InvalidConfig("delta must lie in (0, 1)")
    if n_points < 1 or n_features < 1:
        raise InvalidConfig("need at least one point and one feature")
    if not 1 <= m_batches <= n_points:
        raise InvalidConfig("m_batches must lie in [1, n_points]")
    if c <= 0.0:
        raise InvalidConfig("regularization weight c must be positive")
    if not 0.0 <= sigma_scale <= 1.0:
        raise InvalidConfig("sigma_scale must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    points = rng.uniform(-1.0, 1.0, size=(n_points, n_features))
    w_true = rng.standard_normal(n_features)
    w_true /= max(np.linalg.norm(w_true), 1e-12)
    labels = np.where(points @ w_true >= 0.0, 1.0, -1.0)
    flip = rng.random(n_points) < label_flip
    labels[flip] *= -1.0

    factors = rng.uniform(-1.0, 1.0, size=(n_points, n_features, n_features))
    factors *= sigma_scale / np.sqrt(n_features)
    kappa = np.full(n_points, np.sqrt(delta / (1.0 - delta)))

    instance = RobustSvmInstance(
        points=points,
        labels=labels,
        sigma_factors=factors,
        kappa=kappa,
        c=float(c),
        delta=float(delta),
        batching=_split_counts(n_points, m_batches),
        seed=seed,
        norm_eps=float(norm_eps),
        label_flip=float(label_flip),
        sigma_scale=float(sigma_scale),
    )
    return problem_from_instance(instance), instance


def _svm_batch_oracles(instance, idx, m):
    """Objective and constraint oracles for the points in ``idx``."""
    n = instance.n_features
    n_b = len(idx)
    dim = n + n_b
    c = instance.c
    eps_sq = instance.norm_eps * instance.norm_eps
    eps = instance.norm_eps
    S = np.ascontiguousarray(instance.sigma_factors[idx])
    S_t = np.ascontiguousarray(S.transpose(0, 2, 1))
    yX = instance.labels[idx, None] * instance.points[idx]
    kap = instance.kappa[idx]

    def obj_fn(x):
        w = x[:n]
        value = 0.5 / m * float(np.dot(w, w)) + c * float(np.sum(x[n:]))
        grad = np.empty(dim)
        grad[:n] = w / m
        grad[n:] = c
        return value, grad

    def _parts(x):
        w = x[:n]
        u = S @ w
        soft = np.sqrt(np.einsum("ij,ij->i", u, u) + eps_sq)
        margin = 1.0 - x[n:] + kap * (soft - eps) - yX @ w
        return u, soft, np.concatenate([margin, -x[n:]])

    def g0_fn(x):
        u, soft, vals = _parts(x)
        jac = np.zeros((2 * n_b, dim))
        jac[:n_b, :n] = (kap / soft)[:, None] * np.matmul(S_t, u[:, :, None])[:, :, 0] - yX
        rows = np.arange(n_b)
        jac[rows, n + rows] = -1.0
        jac[n_b + rows, n + rows] = -1.0
        return vals, jac

    def g0_fused(x):
        u, soft, vals = _parts(x)

        def vjp(v):
            v1 = v[:n_b]
            out = np.empty(dim)
            out[:n] = np.einsum("pij,pi->j", S, u * (kap * v1 / soft)[:, None]) - yX.T @ v1
            out[n:] = -v1 - v[n_b:]
            return out

        return vals, vjp

    objective = FunctionOracle(dim, 1, obj_fn, name=f"svm-objective[{n_b}pts]")
    g0 = FunctionOracle(dim, 2 * n_b, g0_fn, name=f"svm-cone[{n_b}pts]", fused=g0_fused)
    return objective, g0


def svm_slack_argmin(base_margin, alpha_margin, alpha_nonneg, rho, c):
    """Exact slack minimizer of the shifted-hinge AL subproblem at fixed w.

    For each point, minimize over t:
        c t + (1/2rho) [ max(0, a + rho (M - t))^2 + max(0, b - rho t)^2 ]
    whose derivative c - max(0, a + rho(M - t)) - max(0, b - rho t) is
    nondecreasing with a unique root.  ``M`` is the margin constraint value
    at t = 0, ``a``/``b`` the frozen multipliers of the margin and
    nonnegativity rows.  Vectorized case analysis over the three activity
    patterns (both hinges, margin only, nonnegativity only).
    """
    M, a, b = base_margin, alpha_margin, alpha_nonneg
    t1 = M + a / rho          # margin hinge switches off above this
    t2 = b / rho              # nonnegativity hinge switches off above this
    t_both = (a + b + rho * M - c) / (2.0 * rho)
    t_margin = M + (a - c) / rho
    t_nonneg = (b - c) / rho
    both_ok = (t_both <= t1) & (t_both <= t2)
    margin_ok = (t_margin >= t2) & (t_margin <= t1)
    out = np.where(both_ok, t_both, np.where(margin_ok, t_margin, t_nonneg))
    return out


def svm_transformed_slack_argmin(base_margin, mu_margin, mu_nonneg, rho, c):
    """Exact slack minimizer of the hinge-squared AL subproblem at fixed w.

    For each point, minimize over t:
        c t + (rho/2) u^4 + mu1 u^2 + (rho/2) v^4 + mu2 v^2,
        u = max(0, M - t),  v = max(0, -t)
    The derivative c - 2u (rho u^2 + mu1) - 2v (rho v^2 + mu2) is continuous
    and nondecreasing in t, so a fixed-count vectorized bisection is exact to
    rounding and fully deterministic.
    """
    M, mu1, mu2 = base_margin, mu_margin, mu_nonneg

    def slope(t):
        u = np.maximum(0.0, M - t)
        v = np.maximum(0.0, -t)
        return c - 2.0 * u * (rho * u * u + mu1) - 2.0 * v * (rho * v * v + mu2)

    hi = np.maximum(M, 0.0)  # slope there is c > 0
    width = np.maximum(np.abs(M), 1.0)
    lo = hi - width
    for _ in range(60):  # bracket downwards until the slope goes negative
        bad = slope(lo) > 0.0
        if not np.any(bad):
            break
        lo = np.where(bad, lo - width, lo)
        width = np.where(bad, 2.0 * width, width)
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        neg = slope(mid) <= 0.0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    return 0.5 * (lo + hi)


def _svm_reduced_data(instance):
    return {
        "S": np.ascontiguousarray(instance.sigma_factors),
        "yX": instance.labels[:, None] * instance.points,
        "kap": instance.kappa,
        "c": instance.c,
        "eps": instance.norm_eps,
        "n": instance.n_features,
    }


def _ball_batch_oracles(pts, d, m):
    n_b = pts.shape[0]
    dim = d + 1

    def obj_fn(x):
        grad = np.zeros(dim)
        grad[d] = 1.0 / m
        return x[d] / m, grad

    def g0_fn(x):
        diff = x[:d][None, :] - pts
        vals = np.einsum("ij,ij->i", diff, diff) - x[d]
        jac = np.empty((n_b, dim))
        jac[:, :d] = 2.0 * diff
        jac[:, d] = -1.0
        return vals, jac

    def g0_fused(x):
        diff = x[:d][None, :] - pts
        vals = np.einsum("ij,ij->i", diff, diff) - x[d]

        def vjp(v):
            out = np.empty(dim)
            out[:d] = 2.0 * (diff.T @ v)
            out[d] = -float(np.sum(v))
            return out

        return vals, vjp

    objective = FunctionOracle(dim, 1, obj_fn, name=f"ball-objective[{n_b}pts]")
    g0 = FunctionOracle(dim, n_b, g0_fn, name=f"ball-cover[{n_b}pts]", fused=g0_fused)
    return objective, g0


def problem_from_instance(instance):
    """Build the consensus problem for an instance, following its batching."""
    if isinstance(instance, RobustSvmInstance):
        m = len(instance.batching)
        batches, objectives = [], []
        for b, idx in enumerate(instance.batching):
            objective, g0 = _svm_batch_oracles(instance, idx, m)
            batches.append(ConstraintBatch(index=b + 1, g0=g0, local_dim=len(idx)))
            objectives.append(objective)
        problem = ConsensusProblem(
            shared_dim=instance.n_features,
            batches=batches,
            objectives=objectives,
            name=f"robust-svm-{instance.n_points}x{instance.n_features}",
        )
        problem.meta["svm_reduced"] = _svm_reduced_data(instance)
        problem.meta["svm_reduced_batches"] = [
            {
                "S": np.ascontiguousarray(instance.sigma_factors[idx]),
                "yX": instance.labels[idx, None] * instance.points[idx],
                "kap": instance.kappa[idx],
                "c": instance.c,
                "eps": instance.norm_eps,
                "n": instance.n_features,
                "m": m,
            }
            for idx in instance.batching
        ]
        # strictly feasible point: w = 0, every slack just above its margin
        problem.meta["feasible_start"] = [
            np.concatenate([np.zeros(instance.n_features), np.full(len(idx), 1.05)])
            for idx in instance.batching
        ]
        return problem
    if isinstance(instance, BallInstance):
        m = len(instance.batching)
        d = instance.points.shape[1]
        batches, objectives = [], []
        for b, idx in enumerate(instance.batching):
            objective, g0 = _ball_batch_oracles(instance.points[idx], d, m)
            batches.append(ConstraintBatch(index=b + 1, g0=g0, local_dim=0))
            objectives.append(objective)
        problem = ConsensusProblem(
            shared_dim=d + 1,
            batches=batches,
            objectives=objectives,
            name=f"enclosing-ball-{instance.n_points}pts",
        )
        center = np.mean(instance.points, axis=0)
        spread = float(np.max(np.einsum("ij,ij->i", instance.points - center,
                                        instance.points - center)))
        start = np.concatenate([center, [spread + 1.0]])
        problem.meta["feasible_start"] = [start.copy() for _ in instance.batching]
        if instance.n_points <= 2:
            problem.meta["analytic"] = _ball_analytic(instance.points)
        return problem
    if isinstance(instance, ToyQpInstance):
        def obj_fn(x):
            return (x[0] - 2.0) ** 2, np.array([2.0 * (x[0] - 2.0)])

        def g0_fn(x):
            return np.array([x[0] - 1.0]), np.array([[1.0]])

        problem = ConsensusProblem(
            shared_dim=1,
            batches=[ConstraintBatch(index=1, g0=FunctionOracle(1, 1, g0_fn, "toy-g0"))],
            objectives=[FunctionOracle(1, 1, obj_fn, "toy-objective")],
            name="toy-1d-qp",
        )
        problem.meta["analytic"] = {
            "z_star": np.array([1.0]),
            "locals": np.zeros(0),
            "f_star": 1.0,
            "alpha": np.array([2.0]),
            "beta": np.zeros(0),
        }
        return problem
    raise InvalidConfig(f"unknown instance type {type(instance).__name__}")


def _ball_analytic(points):
    """Exact optimum for one- and two-point ball instances."""
    if points.shape[0] == 1:
        center = points[0].copy()
        s = 0.0
        alpha = np.array([1.0])
    else:
        center = 0.5 * (points[0] + points[1])
        s = float(np.dot(points[0] - center, points[0] - center))
        alpha = np.array([0.5, 0.5])
    return {
        "z_star": np.concatenate([center, [s]]),
        "locals": np.zeros(0),
        "f_star": s,
        "alpha": alpha,
        "beta": np.zeros(0),
    }


def generate_enclosing_ball(points, m_batches, seed=None):
    """Consensus problem for the smallest ball enclosing ``points``.

    Shared variables are the center and the squared radius ``s``; the radius
    is recovered as ``sqrt(max(s, 0))``.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise InvalidConfig("need a 2-D array with at least one point")
    if not 1 <= m_batches <= points.shape[0]:
        raise InvalidConfig("m_batches must lie in [1, n_points]")
    instance = BallInstance(
        points=points,
        batching=_split_counts(points.shape[0], m_batches),
        seed=seed,
    )
    return problem_from_instance(instance), instance


def toy_1d_qp():
    instance = ToyQpInstance()
    return problem_from_instance(instance), instance


def rebatch(instance, m_batches):
    """Same data, new contiguous batching (used by the node-scaling study)."""
    if isinstance(instance, ToyQpInstance):
        if m_batches != 1:
            raise InvalidConfig("the toy problem has a single batch")
        return instance
    n = instance.n_points
    if not 1 <= m_batches <= n:
        raise InvalidConfig("m_batches must lie in [1, n_points]")
    kwargs = dict(instance.__dict__)
    kwargs["batching"] = _split_counts(n, m_batches)
    return type(instance)(**kwargs)


def merged_layout(instance):
    """Map each batch's constraints and locals into merged point-order arrays.

    Returns per-batch ``(g0_rows, local_cols)`` index arrays into the
    m_batches=1 problem's constraint vector and local-variable vector.  The
    reference oracle stores its results in that merged layout so one cached
    solve serves every batching of the same data.
    """
    if isinstance(instance, RobustSvmInstance):
        n = instance.n_points
        out = []
        for idx in instance.batching:
            idx = np.asarray(idx)
            out.append((np.concatenate([idx, n + idx]), idx))
        return out
    if isinstance(instance, BallInstance):
        return [(np.asarray(idx), np.zeros(0, dtype=int)) for idx in instance.batching]
    if isinstance(instance, ToyQpInstance):
        return [(np.array([0]), np.zeros(0, dtype=int))]
    raise InvalidConfig(f"unknown instance type {type(instance).__name__}")


# ---------------------------------------------------------------------------
# serialization

def _array(a):
    return np.asarray(a).tolist()


def save_instance(path, instance):
    """Persist an instance as versioned, field-named JSON text."""
    payload = {"format": INSTANCE_FORMAT, "version": INSTANCE_VERSION, "kind": instance.kind}
    if isinstance(instance, RobustSvmInstance):
        payload.update(
            points=_array(instance.points),
            labels=_array(instance.labels),
            sigma_factors=_array(instance.sigma_factors),
            kappa=_array(instance.kappa),
            c=instance.c,
            delta=instance.delta,
            batching=[_array(b) for b in instance.batching],
            seed=instance.seed,
            norm_eps=instance.norm_eps,
            label_flip=instance.label_flip,
            sigma_scale=instance.sigma_scale,
        )
    elif isinstance(instance, BallInstance):
        payload.update(
            points=_array(instance.points),
            batching=[_array(b) for b in instance.batching],
            seed=instance.seed,
        )
    elif isinstance(instance, ToyQpInstance):
        pass
    else:
        raise InvalidConfig(f"cannot serialize {type(instance).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_instance(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != INSTANCE_FORMAT:
        raise InvalidConfig(f"{path}: not an instance file")
    if payload.get("version") != INSTANCE_VERSION:
        raise InvalidConfig(f"{path}: unsupported version {payload.get('version')}")
    kind = payload.get("kind")
    if kind == "robust-svm":
        return RobustSvmInstance(
            points=np.asarray(payload["points"], dtype=np.float64),
            labels=np.asarray(payload["labels"], dtype=np.float64),
            sigma_factors=np.asarray(payload["sigma_factors"], dtype=np.float64),
            kappa=np.asarray(payload["kappa"], dtype=np.float64),
            c=float(payload["c"]),
            delta=float(payload["delta"]),
            batching=[np.asarray(b, dtype=int) for b in payload["batching"]],
            seed=payload.get("seed"),
            norm_eps=float(payload.get("norm_eps", 1e-8)),
            label_flip=float(payload.get("label_flip", 0.05)),
            sigma_scale=float(payload.get("sigma_scale", 1.0)),
        )
    if kind == "enclosing-ball":
        return BallInstance(
            points=np.asarray(payload["points"], dtype=np.float64),
            batching=[np.asarray(b, dtype=int) for b in payload["batching"]],
            seed=payload.get("seed"),
        )
    if kind == "toy-qp":
        return ToyQpInstance()
    raise InvalidConfig(f"{path}: unknown instance kind {kind!r}")


def data_hash(instance):
    """Hash of the batching-independent data; keys the reference cache."""
    digest = hashlib.sha256()
    digest.update(instance.kind.encode())
    if isinstance(instance, RobustSvmInstance):
        for arr in (instance.points, instance.labels, instance.sigma_factors, instance.kappa):
            digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        digest.update(json.dumps([instance.c, instance.delta, instance.norm_eps]).encode())
        # sigma_scale is baked into the stored factors, no separate hash input needed
    elif isinstance(instance, BallInstance):
        digest.update(np.ascontiguousarray(instance.points, dtype=np.float64).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# independent checking oracle for enclosing balls

def enclosing_ball_exhaustive(points, tol=1e-9):
    """Smallest enclosing ball by exhausting support subsets.

    Tries every subset of up to ``d + 1`` points as the support set, builds
    the smallest sphere with those points on its boundary, and keeps the
    smallest one that covers everything.  Exponential, so for tests only.
    Returns ``(center, radius)``.
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    best_center, best_r = points[0], 0.0 if n == 1 else np.inf
    if n == 1:
        return best_center.copy(), 0.0

    def covers(center, radius):
        dist = np.sqrt(np.max(np.einsum("ij,ij->i", points - center, points - center)))
        return dist <= radius + tol

    for size in range(1, min(n, d + 1) + 1):
        for subset in itertools.combinations(range(n), size):
            sub = points[list(subset)]
            if size == 1:
                center, radius = sub[0], 0.0
            else:
                base = sub[0]
                v = sub[1:] - base
                gram = 2.0 * (v @ v.T)
                rhs = np.einsum("ij,ij->i", v, v)
                try:
                    coef = np.linalg.solve(gram, rhs)
                except np.linalg.LinAlgError:
                    continue
                center = base + coef @ v
                radius = float(np.linalg.norm(center - base))
            if radius < best_r and covers(center, radius):
                best_center, best_r = center, radius
    return np.asarray(best_center, dtype=np.float64).copy(), float(best_r)
