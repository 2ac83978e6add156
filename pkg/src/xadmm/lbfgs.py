"""Limited-memory BFGS with backtracking Armijo line search.

Used for every x-update of the consensus solver and for the innermost loop
of the nested baseline.  All subproblems are unconstrained and C^1, so no
bound handling is needed.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import LineSearchFailure, NonFiniteValue

__all__ = ["InnerSolverOptions", "InnerResult", "minimize"]

# Requested decreases below this multiple of float resolution cannot be
# verified in double precision; the search stops instead of failing.
_RESOLUTION = 64.0 * np.finfo(np.float64).eps


@dataclass(frozen=True)
class InnerSolverOptions:
    grad_tol: float = 1e-6
    max_iters: int = 500
    memory: int = 10
    c1: float = 1e-4
    backtrack: float = 0.5
    max_halvings: int = 60
    # steps accepted on gradient decrease alone once objective differences
    # drop below float resolution; bounds the cost of unreachable grad_tol
    polish_steps: int = 8

    def __post_init__(self):
        if self.grad_tol <= 0.0:
            raise ValueError("grad_tol must be positive")
        if self.max_iters < 1 or self.memory < 1:
            raise ValueError("max_iters and memory must be >= 1")
        if not 0.0 < self.c1 < 1.0:
            raise ValueError("c1 must lie in (0, 1)")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtracking factor must lie in (0, 1)")


@dataclass
class InnerResult:
    x_min: np.ndarray
    f_min: float
    grad_norm: float
    iterations: int
    converged: bool
    n_evals: int = 0


def _two_loop_direction(grad, s_hist, y_hist, rho_hist):
    """Compute -H*grad from the stored curvature pairs."""
    q = grad.copy()
    alphas = []
    for s, y, r in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = r * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if y_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, r), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = r * np.dot(y, q)
        q += (a - b) * s
    return -q


def minimize(objective, x0, opts=None):
    """Minimize a scalar FunctionOracle from ``x0``.

    Returns an InnerResult with ``converged`` true iff the infinity norm of
    the gradient reached ``opts.grad_tol``.  The accepted iterates are
    weakly monotone in the objective.  Raises NonFiniteValue when an
    accepted evaluation is NaN or infinite, and LineSearchFailure when a
    measurable sufficient decrease cannot be found, which indicates a wrong
    gradient or a pathological objective.
    """
    opts = opts or InnerSolverOptions()
    x = np.array(x0, dtype=np.float64, copy=True)
    if objective.dim_in != x.size:
        raise ValueError("x0 dimension does not match the objective")

    f, g = objective.scalar_eval(x)
    n_evals = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteValue("objective is not finite at the starting point")

    s_hist = deque(maxlen=opts.memory)
    y_hist = deque(maxlen=opts.memory)
    rho_hist = deque(maxlen=opts.memory)

    grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
    iterations = 0
    polish_left = opts.polish_steps

    while grad_norm > opts.grad_tol and iterations < opts.max_iters:
        d = _two_loop_direction(g, s_hist, y_hist, rho_hist)
        slope = float(np.dot(g, d))
        if slope >= 0.0:
            # quasi-Newton direction lost descent, restart from steepest descent
            d = -g
            slope = -float(np.dot(g, g))
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()

        alpha = 1.0 if y_hist else min(1.0, 1.0 / float(np.sum(np.abs(g))))
        f_slack = _RESOLUTION * (1.0 + abs(f))
        accepted = False
        worse_everywhere = True
        polish_trials = 0
        for _ in range(opts.max_halvings + 1):
            x_new = x + alpha * d
            if not np.any(x_new != x):
                break  # step underflowed
            f_new, g_new = objective.scalar_eval(x_new)
            n_evals += 1
            if np.isfinite(f_new) and f_new <= f + f_slack:
                worse_everywhere = False
            if alpha * (-slope) > f_slack:
                # value regime: plain sufficient decrease
                if np.isfinite(f_new) and f_new <= f + opts.c1 * alpha * slope:
                    accepted = True
                    break
            else:
                # the requested decrease is below float resolution; accept a
                # step that still measurably reduces the gradient instead
                if polish_left <= 0:
                    break
                if (
                    np.isfinite(f_new)
                    and np.all(np.isfinite(g_new))
                    and f_new <= f + f_slack
                    and float(np.max(np.abs(g_new))) < 0.9 * grad_norm
                ):
                    accepted = True
                    polish_left -= 1
                    break
                polish_trials += 1
                if polish_trials >= 12:
                    break
            alpha *= opts.backtrack
        if not accepted:
            if worse_everywhere:
                # a descent direction whose every step measurably raises f
                # means the gradient disagrees with the function
                raise LineSearchFailure(
                    f"no sufficient decrease within {opts.max_halvings} halvings "
                    f"(grad inf-norm {grad_norm:.3e})"
                )
            break  # converged to float resolution
        if not np.all(np.isfinite(g_new)):
            raise NonFiniteValue("gradient is not finite at an accepted point")

        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        # reject pairs with vanishing curvature to keep the metric positive
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)

        x, f, g = x_new, f_new, g_new
        grad_norm = float(np.max(np.abs(g)))
        iterations += 1

    return InnerResult(
        x_min=x,
        f_min=f,
        grad_norm=grad_norm,
        iterations=iterations,
        converged=grad_norm <= opts.grad_tol,
        n_evals=n_evals,
    )
