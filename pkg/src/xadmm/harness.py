"""Worker/coordinator execution engine for per-batch updates.

Batches are partitioned across workers; each round every worker performs the
x-update and the local dual updates for its batches, then the coordinator
collects the results in batch order behind a full barrier.  The transport is
pluggable; the provided implementation uses in-process channels (one thread
per worker).  A socket transport is an extension point, not built: any
replacement must deliver messages ordered, reliably and exactly once within
a round.

Traces are independent of the worker count because batch computations share
no state and every reduction happens at the coordinator in ascending batch
order.
"""

import queue
import threading
from dataclasses import dataclass, field

from .admm import run_batch_round
from .errors import WorkerFailure

__all__ = ["WorkerAssignment", "RoundMessage", "make_assignment", "run_round", "HarnessSession"]

_STOP = object()


@dataclass
class WorkerAssignment:
    """Batches owned by one worker; indices are 1-based batch labels."""

    worker_id: int
    batch_indices: list

    local_state: dict = field(default_factory=dict)


@dataclass
class RoundMessage:
    """Coordinator-to-worker payload for one round.

    ``mu_g_by_batch``/``mu_h_by_batch`` override the worker-held duals when
    present (the nested baseline freezes them across its middle loop);
    otherwise workers use and update their local dual state.
    """

    z: object
    lambda_by_batch: dict
    rho: float
    mu_g_by_batch: dict | None = None
    mu_h_by_batch: dict | None = None
    rho_constraint: float | None = None
    update_duals: bool = True


def make_assignment(m, workers, policy="contiguous"):
    """Partition batches 1..m over workers with counts differing by at most 1."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if policy == "contiguous":
        base, extra = divmod(m, workers)
        groups = []
        start = 1
        for w in range(workers):
            count = base + (1 if w < extra else 0)
            groups.append(list(range(start, start + count)))
            start += count
    elif policy == "round-robin":
        groups = [list(range(w + 1, m + 1, workers)) for w in range(workers)]
    else:
        raise ValueError(f"unknown assignment policy {policy!r}")
    return [WorkerAssignment(worker_id=w, batch_indices=groups[w]) for w in range(workers)]


def _worker_batches(problem, assignment, msg, inner_opts):
    """Run one worker's share of a round, ascending over its batch labels."""
    results = []
    for label in assignment.batch_indices:
        i = label - 1
        x_prev, mu_g, mu_h = assignment.local_state[label]
        if msg.mu_g_by_batch is not None:
            mu_g = msg.mu_g_by_batch[label]
        if msg.mu_h_by_batch is not None:
            mu_h = msg.mu_h_by_batch[label]
        res = run_batch_round(
            problem, i, x_prev, msg.z, mu_g, mu_h,
            msg.lambda_by_batch[label], msg.rho, inner_opts,
            rho_constraint=msg.rho_constraint, update_duals=msg.update_duals,
        )
        assignment.local_state[label] = (res.x, res.mu_g, res.mu_h)
        results.append(res)
    return results


def run_round(problem, assignments, state, inner_opts):
    """Execute one full round inline over the given assignments.

    Worker-local states must be seeded via ``seed_local_states`` first.
    Returns the batch results ordered by batch index regardless of the
    assignment layout.
    """
    msg = RoundMessage(
        z=state.z,
        lambda_by_batch={i + 1: state.lambda_i[i] for i in range(problem.m)},
        rho=state.rho,
    )
    collected = []
    for assignment in assignments:
        collected.extend(_worker_batches(problem, assignment, msg, inner_opts))
    collected.sort(key=lambda r: r.batch_index)
    return collected


def seed_local_states(problem, assignments, state):
    for assignment in assignments:
        for label in assignment.batch_indices:
            i = label - 1
            assignment.local_state[label] = (state.x_i[i], state.mu_g_i[i], state.mu_h_i[i])


class InProcessTransport:
    """Channel factory backed by in-process queues with blocking barrier waits."""

    def channel(self):
        return queue.Queue()


class HarnessSession:
    """Persistent worker pool driving rounds for one solve.

    One thread per worker; the coordinator blocks until every worker has
    replied, so a round forms a synchronization barrier.  Any worker
    exception aborts the round with WorkerFailure carrying the cause.
    """

    def __init__(self, problem, workers, inner_opts, policy="contiguous", transport=None):
        from .admm import initial_state

        self.problem = problem
        self.inner_opts = inner_opts
        self.assignments = make_assignment(problem.m, workers, policy)
        seed_local_states(problem, self.assignments, initial_state(problem, 1.0))
        transport = transport or InProcessTransport()
        self._outbox = transport.channel()
        self._inboxes = []
        self._threads = []
        for assignment in self.assignments:
            inbox = transport.channel()
            self._inboxes.append(inbox)
            thread = threading.Thread(
                target=self._worker_loop,
                args=(assignment, inbox),
                name=f"xadmm-worker-{assignment.worker_id}",
                daemon=True,
            )
            self._threads.append(thread)
            thread.start()

    def _worker_loop(self, assignment, inbox):
        while True:
            msg = inbox.get()
            if msg is _STOP:
                return
            try:
                results = _worker_batches(self.problem, assignment, msg, self.inner_opts)
            except BaseException as exc:  # propagate to the coordinator, keep worker alive
                self._outbox.put((assignment.worker_id, exc))
                continue
            self._outbox.put((assignment.worker_id, results))

    def dispatch(self, msg):
        """Send one round message to every worker and barrier-collect replies.

        Results come back ordered by batch index no matter which worker
        finished first.
        """
        for inbox in self._inboxes:
            inbox.put(msg)
        collected = []
        failure = None
        for _ in self.assignments:
            worker_id, payload = self._outbox.get()
            if isinstance(payload, BaseException):
                if failure is None:
                    failure = WorkerFailure(worker_id, payload)
            else:
                collected.extend(payload)
        if failure is not None:
            raise failure
        collected.sort(key=lambda r: r.batch_index)
        return collected

    def run_round(self, state):
        msg = RoundMessage(
            z=state.z,
            lambda_by_batch={i + 1: state.lambda_i[i] for i in range(self.problem.m)},
            rho=state.rho,
        )
        return self.dispatch(msg)

    def close(self):
        for inbox in self._inboxes:
            inbox.put(_STOP)
        for thread in self._threads:
            thread.join(timeout=10.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
        return False
