"""Data model for constrained problems and their consensus form."""

from dataclasses import dataclass, field

import numpy as np

from .oracles import FunctionOracle, check_affine

__all__ = ["GeneralProblem", "ConstraintBatch", "ConsensusProblem"]


@dataclass
class GeneralProblem:
    """Two-block problem: min f1(x) + f2(z) s.t. g0(x) <= 0, h1(x) + h2(z) = 0.

    ``g0`` collects all convex inequality components; ``h1`` and ``h2`` must
    be affine.  Any of the constraint oracles may be None when that block is
    absent.
    """

    f1: FunctionOracle
    f2: FunctionOracle | None
    g0: FunctionOracle | None
    h1: FunctionOracle | None
    h2: FunctionOracle | None
    n1: int
    n2: int

    @property
    def p(self):
        return self.g0.dim_out if self.g0 is not None else 0

    @property
    def m(self):
        return self.h1.dim_out if self.h1 is not None else 0

    def validate(self, affine_trials=20, seed=0):
        """Check dimensional consistency and affinity of h1/h2."""
        if self.f1.dim_out != 1:
            raise ValueError("f1 must be scalar valued")
        if self.f1.dim_in != self.n1:
            raise ValueError("f1 dimension does not match n1")
        if self.f2 is not None and (self.f2.dim_out != 1 or self.f2.dim_in != self.n2):
            raise ValueError("f2 must be scalar valued on R^n2")
        if self.g0 is not None and self.g0.dim_in != self.n1:
            raise ValueError("g0 dimension does not match n1")
        if (self.h1 is None) != (self.h2 is None):
            raise ValueError("h1 and h2 must both be present or both absent")
        if self.h1 is not None:
            if self.h1.dim_in != self.n1 or self.h2.dim_in != self.n2:
                raise ValueError("h1/h2 input dimensions do not match n1/n2")
            if self.h1.dim_out != self.h2.dim_out:
                raise ValueError("h1 and h2 must share the output dimension")
            for oracle in (self.h1, self.h2):
                if not check_affine(oracle, affine_trials, seed):
                    raise ValueError(f"{oracle!r} failed the affinity check")
        return self


@dataclass
class ConstraintBatch:
    """One batch of constraints plus its batch-local variables.

    Oracles accept points of dimension ``shared_dim + local_dim`` laid out
    as the shared block first.  ``index`` is the 1-based batch label.
    """

    index: int
    g0: FunctionOracle | None = None
    h: FunctionOracle | None = None
    local_dim: int = 0

    @property
    def n_ineq(self):
        return self.g0.dim_out if self.g0 is not None else 0

    @property
    def n_eq(self):
        return self.h.dim_out if self.h is not None else 0


@dataclass
class ConsensusProblem:
    """Consensus form: min sum_i f_i(x_i) over batches coupled by x_i = z.

    Each batch owns a copy of the shared variable (first ``shared_dim``
    components of ``x_i``) plus ``local_dim`` private variables.  The
    objective is a list of per-batch scalar oracles because local dimensions
    may differ across batches.
    """

    shared_dim: int
    batches: list[ConstraintBatch]
    objectives: list[FunctionOracle]
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def m(self):
        return len(self.batches)

    def batch_dim(self, i):
        return self.shared_dim + self.batches[i].local_dim

    def split(self, i, x):
        """Split batch i's point into (shared, local) views."""
        return x[: self.shared_dim], x[self.shared_dim :]

    def validate(self, affine_trials=20, seed=0):
        if self.m < 1:
            raise ValueError("need at least one batch")
        if self.shared_dim < 1:
            raise ValueError("shared_dim must be >= 1")
        if len(self.objectives) != self.m:
            raise ValueError("need one objective oracle per batch")
        for i, (batch, obj) in enumerate(zip(self.batches, self.objectives)):
            dim = self.batch_dim(i)
            if batch.index != i + 1:
                raise ValueError(f"batch {i} carries label {batch.index}, expected {i + 1}")
            if obj.dim_out != 1 or obj.dim_in != dim:
                raise ValueError(f"objective of batch {i + 1} has wrong dimensions")
            if batch.g0 is not None and batch.g0.dim_in != dim:
                raise ValueError(f"g0 of batch {i + 1} has wrong input dimension")
            if batch.h is not None:
                if batch.h.dim_in != dim:
                    raise ValueError(f"h of batch {i + 1} has wrong input dimension")
                if not check_affine(batch.h, affine_trials, seed):
                    raise ValueError(f"h of batch {i + 1} failed the affinity check")
        return self

    def objective_value(self, x_list):
        """Sum of per-batch objectives, accumulated in ascending batch order."""
        total = 0.0
        for obj, x in zip(self.objectives, x_list):
            total += obj.scalar_eval(np.asarray(x, dtype=np.float64))[0]
        return total
