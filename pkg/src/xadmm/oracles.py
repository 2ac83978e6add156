"""First-order function oracles and the squared-hinge constraint transform."""

import numpy as np

from .errors import NonFiniteValue

__all__ = [
    "FunctionOracle",
    "squared_hinge",
    "check_affine",
    "finite_diff_check",
]


class FunctionOracle:
    """Deterministic first-order oracle for a convex vector-valued function.

    Wraps a callable ``fn(x) -> (value, jacobian)`` with declared input and
    output dimensions.  ``value`` has shape ``(dim_out,)`` and ``jacobian``
    shape ``(dim_out, dim_in)``; both are float64.  Oracles hold no mutable
    state, so one instance may be evaluated concurrently from several
    workers on distinct inputs.
    """

    __slots__ = ("dim_in", "dim_out", "_fn", "_fused", "name")

    def __init__(self, dim_in, dim_out, fn, name="", fused=None):
        if dim_in < 1 or dim_out < 1:
            raise ValueError("oracle dimensions must be positive")
        self.dim_in = int(dim_in)
        self.dim_out = int(dim_out)
        self._fn = fn
        self._fused = fused
        self.name = name

    def eval(self, x):
        """Return ``(value, jacobian)`` at ``x`` as float64 arrays."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim_in,):
            raise ValueError(
                f"oracle {self.name!r} expects shape ({self.dim_in},), got {x.shape}"
            )
        value, jac = self._fn(x)
        if not (isinstance(value, np.ndarray) and value.shape == (self.dim_out,)):
            value = np.atleast_1d(np.asarray(value, dtype=np.float64))
            if value.shape != (self.dim_out,):
                raise ValueError(
                    f"oracle {self.name!r} returned value shape {value.shape}, "
                    f"expected ({self.dim_out},)"
                )
        if not (isinstance(jac, np.ndarray) and jac.shape == (self.dim_out, self.dim_in)):
            jac = np.asarray(jac, dtype=np.float64).reshape(self.dim_out, self.dim_in)
        return value, jac

    def value(self, x):
        return self.eval(x)[0]

    def eval_with_vjp(self, x):
        """Return ``(value, vjp)`` where ``vjp(v)`` computes ``jacobian.T @ v``.

        Uses the oracle's fused implementation when one was provided (it
        avoids materializing the dense Jacobian, which matters for large
        constraint blocks); otherwise falls back to the dense evaluation.
        Both paths are numerically consistent to rounding.
        """
        if self._fused is not None:
            return self._fused(np.asarray(x, dtype=np.float64))
        value, jac = self.eval(x)
        return value, lambda v: jac.T @ v

    def scalar_eval(self, x):
        """Return ``(float value, gradient)`` for a scalar oracle."""
        if self.dim_out != 1:
            raise ValueError(f"oracle {self.name!r} is not scalar valued")
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim_in,):
            raise ValueError(
                f"oracle {self.name!r} expects shape ({self.dim_in},), got {x.shape}"
            )
        value, jac = self._fn(x)
        if isinstance(value, float) or value.shape == ():
            return float(value), np.asarray(jac, dtype=np.float64).reshape(self.dim_in)
        return float(np.asarray(value).reshape(())), np.asarray(jac).reshape(self.dim_in)

    def __repr__(self):
        label = self.name or "anonymous"
        return f"FunctionOracle({label}, {self.dim_in} -> {self.dim_out})"


def squared_hinge(g0_value, g0_jacobian):
    """Apply the hinge-square transform to constraint values and Jacobian.

    Componentwise ``g_j = max(0, g0_j)**2`` with Jacobian rows scaled by
    ``2 * max(0, g0_j)``.  The map is C^1 wherever the input function is,
    and the output values are nonnegative for any input.
    """
    g0_value = np.asarray(g0_value, dtype=np.float64)
    g0_jacobian = np.asarray(g0_jacobian, dtype=np.float64)
    active = np.maximum(0.0, g0_value)
    g_value = active * active
    g_jacobian = (2.0 * active)[:, None] * g0_jacobian
    return g_value, g_jacobian


def check_affine(oracle, trials, seed):
    """Test whether an oracle is affine by random midpoint probes.

    Evaluates ``h(a*x + (1-a)*y)`` against ``a*h(x) + (1-a)*h(y)`` for
    ``trials`` random triples and returns True iff every probe matches to
    relative tolerance 1e-10.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        x = rng.standard_normal(oracle.dim_in)
        y = rng.standard_normal(oracle.dim_in)
        alpha = rng.uniform(0.0, 1.0)
        mixed = oracle.value(alpha * x + (1.0 - alpha) * y)
        combined = alpha * oracle.value(x) + (1.0 - alpha) * oracle.value(y)
        scale = 1.0 + np.max(np.abs(combined))
        if np.max(np.abs(mixed - combined)) > 1e-10 * scale:
            return False
    return True


def finite_diff_check(oracle, x):
    """Return the worst relative error of the Jacobian against central differences.

    Probes every coordinate direction with step ``1e-6 * (1 + ||x||)`` and
    compares ``(f(x+eps e_j) - f(x-eps e_j)) / (2 eps)`` with the Jacobian
    column, entrywise relative to ``1 + |J_ij|``.
    """
    x = np.asarray(x, dtype=np.float64)
    _, jac = oracle.eval(x)
    eps = 1e-6 * (1.0 + float(np.linalg.norm(x)))
    worst = 0.0
    for j in range(oracle.dim_in):
        step = np.zeros_like(x)
        step[j] = eps
        plus = oracle.value(x + step)
        minus = oracle.value(x - step)
        fd = (plus - minus) / (2.0 * eps)
        err = np.abs(fd - jac[:, j]) / (1.0 + np.abs(jac[:, j]))
        worst = max(worst, float(np.max(err)))
    return worst


def require_finite(value, what="objective value"):
    """Raise NonFiniteValue unless every entry of ``value`` is finite."""
    if not np.all(np.isfinite(value)):
        raise NonFiniteValue(f"{what} is not finite")
    return value
