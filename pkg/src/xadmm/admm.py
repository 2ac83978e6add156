"""Two-loop extended ADMM for convex problems with non-linear constraints.

The solver alternates per-batch primal updates (each an unconstrained smooth
minimization of the augmented Lagrangian with hinge-squared inequality
terms), a closed-form update of the shared consensus variable, and explicit
dual ascent steps.  Residual and distance diagnostics are recorded every
iteration.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import LineSearchFailure, NonFiniteValue
from .lbfgs import InnerSolverOptions, minimize
from .oracles import FunctionOracle, squared_hinge
from .problems import ConsensusProblem, GeneralProblem

__all__ = [
    "SolverState",
    "IterationMetrics",
    "StoppingRule",
    "ReferenceSolution",
    "augmented_lagrangian",
    "x_update_batch",
    "z_update",
    "dual_update_mu",
    "dual_update_lambda",
    "compute_metrics",
    "solve",
]

_EMPTY = np.zeros(0)


@dataclass
class SolverState:
    """Primal/dual iterate of the consensus solver."""

    k: int
    x_i: list
    z: np.ndarray
    mu_g_i: list
    mu_h_i: list
    lambda_i: list
    rho: float
    converged: bool = False
    stop_reason: str = ""


@dataclass
class IterationMetrics:
    k: int
    f_k: float
    r_g_norm: float
    r_h_norm: float
    r_consensus_norm: float
    z_change: float
    dist_z_2: float | None = None
    dist_z_inf: float | None = None
    dist_lambda: float | None = None
    v_k: float | None = None
    inner_iters: int = 0
    elapsed_ns: int = 0
    outer_iter: int | None = None


@dataclass(frozen=True)
class StoppingRule:
    """When to terminate a solve.

    ``residual`` stops once the largest residual norm falls below
    ``tol_residual`` and the shared variable has settled; ``reference-distance``
    replicates the infinity-norm distance test against a known optimum;
    ``max-iters`` runs a fixed budget.
    """

    mode: str = "residual"
    tol_residual: float = 1e-4
    z_change_tol: float = 1e-6
    tol_reference_inf: float = 5e-3
    max_iters: int = 10000

    def __post_init__(self):
        if self.mode not in ("residual", "reference-distance", "max-iters"):
            raise ValueError(f"unknown stopping mode {self.mode!r}")
        if min(self.tol_residual, self.z_change_tol, self.tol_reference_inf) <= 0.0:
            raise ValueError("stopping tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def fired(self, metrics):
        if self.mode == "residual":
            worst = max(metrics.r_g_norm, metrics.r_h_norm, metrics.r_consensus_norm)
            return worst <= self.tol_residual and metrics.z_change <= self.z_change_tol
        if self.mode == "reference-distance":
            return (
                metrics.dist_z_inf is not None
                and metrics.dist_z_inf <= self.tol_reference_inf
            )
        return False


@dataclass
class ReferenceSolution:
    """High-accuracy optimum used by diagnostics and stopping rules.

    Transformed-constraint duals ``mu_g_star_i`` come from a long run of the
    extended solver itself; see the reference module for why the classical
    multiplier correspondence does not apply to hinge-squared constraints.
    """

    z_star: np.ndarray
    x_star_i: list
    f_star: float
    mu_g_star_i: list
    mu_h_star_i: list
    lambda_star_i: list
    meta: dict = field(default_factory=dict)

    def validate(self, problem, tol=1e-8):
        """Check the stacked residuals at the reference point and dual signs."""
        resid_sq = 0.0
        for i, batch in enumerate(problem.batches):
            x = np.asarray(self.x_star_i[i], dtype=np.float64)
            if batch.g0 is not None:
                hinge_sq = np.maximum(0.0, batch.g0.value(x)) ** 2
                resid_sq += float(np.dot(hinge_sq, hinge_sq))
            if batch.h is not None:
                hv = batch.h.value(x)
                resid_sq += float(np.dot(hv, hv))
            dz = x[: problem.shared_dim] - self.z_star
            resid_sq += float(np.dot(dz, dz))
            if np.any(np.asarray(self.mu_g_star_i[i]) < 0.0):
                raise ValueError("reference mu duals must be nonnegative")
        if np.sqrt(resid_sq) > tol:
            raise ValueError(
                f"reference point infeasible: stacked residual {np.sqrt(resid_sq):.3e} > {tol:.1e}"
            )
        return self


def augmented_lagrangian(problem, x, z, mu, lam, rho):
    """Value and gradients of the augmented Lagrangian of a GeneralProblem.

    Returns ``(value, grad_x, grad_z)`` where the inequality block enters
    through the hinge-squared transform and all gradients are exact via the
    chain rule.
    """
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)

    value, grad_x = problem.f1.scalar_eval(x)
    if problem.f2 is not None:
        f2_val, grad_z = problem.f2.scalar_eval(z)
        value += f2_val
    else:
        grad_z = np.zeros(problem.n2)

    if problem.g0 is not None:
        g_val, g_jac = squared_hinge(*problem.g0.eval(x))
        mu = np.asarray(mu, dtype=np.float64)
        value += 0.5 * rho * float(np.dot(g_val, g_val)) + float(np.dot(mu, g_val))
        grad_x = grad_x + g_jac.T @ (rho * g_val + mu)

    if problem.h1 is not None:
        h_val, h1_jac = problem.h1.eval(x)
        h2_val, h2_jac = problem.h2.eval(z)
        resid = h_val + h2_val
        lam = np.asarray(lam, dtype=np.float64)
        value += 0.5 * rho * float(np.dot(resid, resid)) + float(np.dot(lam, resid))
        pull = rho * resid + lam
        grad_x = grad_x + h1_jac.T @ pull
        grad_z = grad_z + h2_jac.T @ pull

    if not np.isfinite(value) or not np.all(np.isfinite(grad_x)) or not np.all(np.isfinite(grad_z)):
        raise NonFiniteValue("augmented Lagrangian evaluation is not finite")
    return value, grad_x, grad_z


def batch_objective(batch, f, z, mu_g, mu_h, lam, rho_constraint, rho_consensus, shared_dim):
    """Assemble the smooth per-batch subproblem objective as an oracle.

    The constraint penalty and the consensus penalty take separate weights
    so the nested baseline can freeze one while sweeping the other; the
    extended solver passes the same ``rho`` for both.  ``z`` may be None to
    drop the consensus coupling entirely.
    """
    dim = f.dim_in
    mu_g = np.asarray(mu_g, dtype=np.float64) if batch.g0 is not None else _EMPTY
    mu_h = np.asarray(mu_h, dtype=np.float64) if batch.h is not None else _EMPTY
    if batch.g0 is not None and mu_g.size and float(np.min(mu_g)) < 0.0:
        raise ValueError("mu_g must be nonnegative for a convex subproblem")

    def fn(x):
        value, grad = f.scalar_eval(x)
        grad = grad.copy()
        if batch.g0 is not None:
            g0_val, vjp = batch.g0.eval_with_vjp(x)
            active = np.maximum(0.0, g0_val)
            g_val = active * active
            value += 0.5 * rho_constraint * float(np.dot(g_val, g_val))
            value += float(np.dot(mu_g, g_val))
            # chain rule through the hinge square, folded into the row weights
            grad += vjp(2.0 * active * (rho_constraint * g_val + mu_g))
        if batch.h is not None:
            h_val, h_vjp = batch.h.eval_with_vjp(x)
            value += 0.5 * rho_constraint * float(np.dot(h_val, h_val))
            value += float(np.dot(mu_h, h_val))
            grad += h_vjp(rho_constraint * h_val + mu_h)
        if z is not None:
            resid = x[:shared_dim] - z
            value += 0.5 * rho_consensus * float(np.dot(resid, resid))
            value += float(np.dot(lam, resid))
            grad[:shared_dim] += rho_consensus * resid + lam
        return value, grad

    return FunctionOracle(dim, 1, fn, name=f"batch-{batch.index}-subproblem")


def x_update_batch(batch, f, x_i_prev, z, mu_g, mu_h, lam, rho, inner_opts=None, shared_dim=None,
                   reduced=None):
    """Inexact argmin of batch i's augmented Lagrangian block, warm-started."""
    result = _x_update_full(batch, f, x_i_prev, z, mu_g, mu_h, lam, rho, rho, inner_opts,
                            shared_dim, reduced)
    return result.x_min


def _svm_reduced_update(data, x_prev, z, mu_g, lam, rho_constraint, rho_consensus, inner_opts):
    """Batch x-update for robust SVM blocks with the slacks eliminated.

    At any fixed w every slack minimizes a one-dimensional piecewise quartic
    exactly (see the zoo's slack solver), so the subproblem reduces to the
    shared weights; by Danskin the slack-optimal point contributes no
    gradient.  This sidesteps the ill-conditioned slack directions that make
    the joint quasi-Newton solve expensive for large batches.
    """
    from .zoo import svm_transformed_slack_argmin

    n = data["n"]
    S, yX, kap, c, eps, m = data["S"], data["yX"], data["kap"], data["c"], data["eps"], data["m"]
    n_pts = yX.shape[0]
    mu1 = mu_g[:n_pts]
    mu2 = mu_g[n_pts:]
    eps_sq = eps * eps

    def margins(w):
        u = S @ w
        soft = np.sqrt(np.einsum("ij,ij->i", u, u) + eps_sq)
        return u, soft, 1.0 + kap * (soft - eps) - yX @ w

    def reduced_fn(w):
        u, soft, base = margins(w)
        xi = svm_transformed_slack_argmin(base, mu1, mu2, rho_constraint, c)
        gm = np.maximum(0.0, base - xi)
        gn = np.maximum(0.0, -xi)
        gm_sq = gm * gm
        gn_sq = gn * gn
        value = 0.5 / m * float(w @ w) + c * float(np.sum(xi))
        value += 0.5 * rho_constraint * (float(gm_sq @ gm_sq) + float(gn_sq @ gn_sq))
        value += float(mu1 @ gm_sq) + float(mu2 @ gn_sq)
        weight = 2.0 * gm * (rho_constraint * gm_sq + mu1)
        grad = w / m + np.einsum("pij,pi->j", S, u * (kap * weight / soft)[:, None])
        grad -= yX.T @ weight
        if z is not None:
            resid = w - z
            value += 0.5 * rho_consensus * float(resid @ resid) + float(lam @ resid)
            grad += rho_consensus * resid + lam
        return value, grad

    oracle = FunctionOracle(n, 1, reduced_fn, name="svm-reduced-x-update")
    inner = minimize(oracle, x_prev[:n], inner_opts)
    w = inner.x_min
    _, _, base = margins(w)
    xi = svm_transformed_slack_argmin(base, mu1, mu2, rho_constraint, c)
    inner.x_min = np.concatenate([w, xi])
    return inner


def _x_update_full(batch, f, x_i_prev, z, mu_g, mu_h, lam, rho_constraint, rho_consensus,
                   inner_opts, shared_dim, reduced=None):
    if shared_dim is None:
        shared_dim = len(z) if z is not None else 0
    try:
        if reduced is not None:
            return _svm_reduced_update(
                reduced, x_i_prev, z, mu_g, lam, rho_constraint, rho_consensus,
                inner_opts or InnerSolverOptions(),
            )
        objective = batch_objective(
            batch, f, z, mu_g, mu_h, lam, rho_constraint, rho_consensus, shared_dim
        )
        return minimize(objective, x_i_prev, inner_opts)
    except (LineSearchFailure, NonFiniteValue) as exc:
        raise type(exc)(f"batch {batch.index}: {exc}") from exc


def z_update(x_list, lambda_list, rho, m):
    """Closed-form consensus update ``(rho * sum x_i + sum lambda_i) / (rho m)``.

    Sums run left to right over the batch index so traces are reproducible
    for any worker layout.
    """
    if m != len(x_list) or m != len(lambda_list):
        raise ValueError("m must match the number of shared parts and duals")
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    sum_x = np.array(x_list[0], dtype=np.float64, copy=True)
    for x in x_list[1:]:
        sum_x += x
    sum_lam = np.array(lambda_list[0], dtype=np.float64, copy=True)
    for lam in lambda_list[1:]:
        sum_lam += lam
    return (rho * sum_x + sum_lam) / (rho * m)


def dual_update_mu(mu, g_value, rho):
    """Dual ascent on a transformed constraint block; preserves mu >= 0 exactly."""
    return np.asarray(mu, dtype=np.float64) + rho * np.asarray(g_value, dtype=np.float64)


def dual_update_lambda(lam, consensus_residual, rho):
    """Dual ascent on a consensus (or affine) constraint block."""
    return np.asarray(lam, dtype=np.float64) + rho * np.asarray(consensus_residual, dtype=np.float64)


@dataclass
class BatchRoundResult:
    """What one batch reports back to the coordinator after a round."""

    batch_index: int
    x: np.ndarray
    mu_g: np.ndarray
    mu_h: np.ndarray
    g_val: np.ndarray
    h_val: np.ndarray
    f_val: float
    inner_iterations: int
    inner_evals: int


def run_batch_round(problem, i, x_prev, z, mu_g, mu_h, lam, rho, inner_opts,
                    rho_constraint=None, update_duals=True):
    """One batch's share of an iteration: x-update plus its local dual updates.

    The nested baseline reuses this kernel with ``update_duals=False`` and a
    separate frozen constraint penalty.
    """
    batch = problem.batches[i]
    if rho_constraint is None:
        rho_constraint = rho
    reduced_all = problem.meta.get("svm_reduced_batches")
    inner = _x_update_full(
        batch, problem.objectives[i], x_prev, z, mu_g, mu_h, lam,
        rho_constraint, rho, inner_opts, problem.shared_dim,
        reduced=reduced_all[i] if reduced_all is not None else None,
    )
    x_new = inner.x_min
    f_val = problem.objectives[i].scalar_eval(x_new)[0]
    if batch.g0 is not None:
        g_val = np.maximum(0.0, batch.g0.value(x_new)) ** 2
        mu_g_new = dual_update_mu(mu_g, g_val, rho) if update_duals else np.asarray(mu_g)
    else:
        g_val, mu_g_new = _EMPTY, _EMPTY
    if batch.h is not None:
        h_val = batch.h.value(x_new)
        mu_h_new = dual_update_mu(mu_h, h_val, rho) if update_duals else np.asarray(mu_h)
    else:
        h_val, mu_h_new = _EMPTY, _EMPTY
    return BatchRoundResult(
        batch_index=i,
        x=x_new,
        mu_g=mu_g_new,
        mu_h=mu_h_new,
        g_val=g_val,
        h_val=h_val,
        f_val=f_val,
        inner_iterations=inner.iterations,
        inner_evals=inner.n_evals,
    )


def initial_state(problem, rho):
    """All-zero starting point of Algorithm-style runs."""
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    x_i = [np.zeros(problem.batch_dim(i)) for i in range(problem.m)]
    mu_g = [np.zeros(b.n_ineq) for b in problem.batches]
    mu_h = [np.zeros(b.n_eq) for b in problem.batches]
    lam = [np.zeros(problem.shared_dim) for _ in range(problem.m)]
    return SolverState(
        k=0, x_i=x_i, z=np.zeros(problem.shared_dim),
        mu_g_i=mu_g, mu_h_i=mu_h, lambda_i=lam, rho=rho,
    )


def _metrics_from_values(problem, state, f_vals, g_vals, h_vals, z_prev, reference,
                         inner_iters=0, elapsed_ns=0, outer_iter=None):
    """Assemble an IterationMetrics row; reductions run in batch order."""
    f_k = 0.0
    g_sq = h_sq = c_sq = 0.0
    for i in range(problem.m):
        f_k += f_vals[i]
        g_sq += float(np.dot(g_vals[i], g_vals[i]))
        h_sq += float(np.dot(h_vals[i], h_vals[i]))
        resid = state.x_i[i][: problem.shared_dim] - state.z
        c_sq += float(np.dot(resid, resid))
    z_change = float(np.linalg.norm(state.z - z_prev)) if z_prev is not None else 0.0

    row = IterationMetrics(
        k=state.k,
        f_k=f_k,
        r_g_norm=float(np.sqrt(g_sq)),
        r_h_norm=float(np.sqrt(h_sq)),
        r_consensus_norm=float(np.sqrt(c_sq)),
        z_change=z_change,
        inner_iters=inner_iters,
        elapsed_ns=elapsed_ns,
        outer_iter=outer_iter,
    )
    if reference is not None:
        dz = state.z - reference.z_star
        row.dist_z_2 = float(np.linalg.norm(dz))
        row.dist_z_inf = float(np.max(np.abs(dz)))
        lam_sq = 0.0
        dual_sq = 0.0
        for i in range(problem.m):
            dl = state.lambda_i[i] - reference.lambda_star_i[i]
            lam_sq += float(np.dot(dl, dl))
            dg = state.mu_g_i[i] - reference.mu_g_star_i[i]
            dh = state.mu_h_i[i] - reference.mu_h_star_i[i]
            dual_sq += float(np.dot(dg, dg)) + float(np.dot(dh, dh))
        row.dist_lambda = float(np.sqrt(lam_sq))
        if reference.meta.get("harvested", True):
            rho = state.rho
            row.v_k = (dual_sq + lam_sq) / rho + rho * problem.m * float(np.dot(dz, dz))
    return row


def compute_metrics(state, problem, reference=None, z_prev=None):
    """Recompute the full diagnostics row for an arbitrary state."""
    f_vals, g_vals, h_vals = [], [], []
    for i, batch in enumerate(problem.batches):
        x = state.x_i[i]
        f_vals.append(problem.objectives[i].scalar_eval(x)[0])
        if batch.g0 is not None:
            g_vals.append(np.maximum(0.0, batch.g0.value(x)) ** 2)
        else:
            g_vals.append(_EMPTY)
        h_vals.append(batch.h.value(x) if batch.h is not None else _EMPTY)
    return _metrics_from_values(problem, state, f_vals, g_vals, h_vals, z_prev, reference)


def solve(problem, rho=1.0, stopping=None, inner_opts=None, reference=None,
          workers=1, metrics_sink=None, x0_i=None):
    """Run the extended consensus solver until the stopping rule fires.

    Returns ``(state, trace)`` where ``trace`` holds one IterationMetrics per
    iteration.  ``state.converged`` is False when the iteration budget ran
    out first.  With ``workers > 1`` the per-batch updates execute on the
    in-process worker harness; the metric trace is bit-identical for every
    worker count because all reductions happen at the coordinator in batch
    order.  ``metrics_sink`` may consume rows as they are produced (the trace
    list is returned either way).  ``x0_i`` overrides the all-zero primal
    start (duals always start at zero).
    """
    stopping = stopping or StoppingRule()
    inner_opts = inner_opts or InnerSolverOptions()
    if stopping.mode == "reference-distance" and reference is None:
        raise ValueError("reference-distance stopping needs a reference solution")

    state = initial_state(problem, rho)
    if x0_i is not None:
        state.x_i = [np.array(x, dtype=np.float64, copy=True) for x in x0_i]
    trace = []
    session = None
    if workers > 1:
        from .harness import HarnessSession

        session = HarnessSession(problem, workers, inner_opts)
        if x0_i is not None:
            from .harness import seed_local_states

            seed_local_states(problem, session.assignments, state)
    try:
        for k in range(1, stopping.max_iters + 1):
            t0 = time.perf_counter_ns()
            if session is not None:
                results = session.run_round(state)
            else:
                results = [
                    run_batch_round(
                        problem, i, state.x_i[i], state.z,
                        state.mu_g_i[i], state.mu_h_i[i], state.lambda_i[i],
                        state.rho, inner_opts,
                    )
                    for i in range(problem.m)
                ]
            inner_iters = 0
            for res in results:
                i = res.batch_index
                state.x_i[i] = res.x
                state.mu_g_i[i] = res.mu_g
                state.mu_h_i[i] = res.mu_h
                inner_iters += res.inner_iterations

            z_prev = state.z
            shared = [state.x_i[i][: problem.shared_dim] for i in range(problem.m)]
            state.z = z_update(shared, state.lambda_i, state.rho, problem.m)
            for i in range(problem.m):
                state.lambda_i[i] = dual_update_lambda(
                    state.lambda_i[i], shared[i] - state.z, state.rho
                )
            state.k = k

            row = _metrics_from_values(
                problem, state,
                [r.f_val for r in results],
                [r.g_val for r in results],
                [r.h_val for r in results],
                z_prev, reference,
                inner_iters=inner_iters,
                elapsed_ns=time.perf_counter_ns() - t0,
            )
            trace.append(row)
            if metrics_sink is not None:
                metrics_sink(row)
            if stopping.fired(row):
                state.converged = True
                state.stop_reason = stopping.mode
                break
        else:
            state.converged = stopping.mode == "max-iters"
            state.stop_reason = "max-iters"
    finally:
        if session is not None:
            session.close()
    return state, trace
