"""Asynchronous master / controller / compute-node runtime.

The master samples a batch of structures per iteration, the controller
validates them, builds their graphs and hands jobs to compute nodes under a
greedy least-loaded policy, and nodes evaluate and answer with rewardable
results.  Two interchangeable backends implement the same job/result schema:

* :class:`SimCluster` — a single-threaded discrete-event simulation with
  seeded latencies and injectable faults; bit-deterministic, used for tests
  and desk-scale searches.
* :class:`SocketCluster` + :class:`ComputeNodeServer` — real processes
  speaking newline-delimited JSON over TCP.

Whatever the backend, Q-updates happen only at batch boundaries and replay
records are appended in submission order, so the learned table never depends
on completion order.
"""

from __future__ import annotations

import heapq
import itertools
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import wire
from .agent import (
    EpsilonSchedule,
    QTable,
    ReplayMemory,
    replay_pass,
    sample_trajectory,
)
from .codes import CodeSpaceLimits, LayerCode, codes_from_json, serialize_block
from .evaluate import (
    EvalProtocolError,
    EvalRequest,
    EvalResult,
    EvalValidationError,
    RetriableEvalError,
    RewardConfig,
    composite_reward,
)
from .graphs import ShapeError, StructureError, build_block
from .metrics import ComplexityReport

_LEGAL_TRANSITIONS = {
    "queued": {"dispatched"},
    "dispatched": {"done", "failed"},
    "failed": {"retried"},
    "retried": {"dispatched"},
    "done": set(),
}


class BatchError(RuntimeError):
    """Too many jobs of one batch failed permanently."""


class SchedulingStallError(RuntimeError):
    """No healthy capacity is left while jobs are still queued."""


@dataclass
class JobRecord:
    job_id: str
    codes: tuple[LayerCode, ...]
    epochs: int = 12
    seed: int = 0
    state: str = "queued"
    node_id: str | None = None
    submitted_at: float | None = None
    completed_at: float | None = None
    attempts: int = 0
    result: EvalResult | None = None
    failure_reason: str | None = None

    def transition(self, new_state: str) -> None:
        if new_state not in _LEGAL_TRANSITIONS[self.state]:
            raise ValueError(f"illegal job transition {self.state} -> {new_state}")
        self.state = new_state

    @property
    def terminal(self) -> bool:
        return self.state in ("done", "failed")

    def request(self) -> EvalRequest:
        return EvalRequest(serialize_block(self.codes), epochs=self.epochs,
                           job_id=self.job_id, seed=self.seed)


@dataclass
class NodeDescriptor:
    node_id: str
    capacity: int
    endpoint: str = "in-process"
    healthy: bool = True

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")


@dataclass(frozen=True)
class FaultPlan:
    """Deterministic fault injection for the simulated cluster.

    ``node_crashes`` maps node id to the simulated time it dies;
    ``job_failures`` maps job id to how many of its first attempts fail.
    """

    node_crashes: tuple[tuple[str, float], ...] = ()
    job_failures: tuple[tuple[str, int], ...] = ()

    def crash_time(self, node_id: str) -> float | None:
        for nid, when in self.node_crashes:
            if nid == node_id:
                return when
        return None

    def failures_for(self, job_id: str) -> int:
        for jid, count in self.job_failures:
            if jid == job_id:
                return count
        return 0


def uniform_latency(low: float = 0.5, high: float = 1.5) -> Callable:
    def model(rng: np.random.Generator, node_index: int) -> float:
        return float(rng.uniform(low, high))
    return model


def constant_latency(value: float = 1.0) -> Callable:
    def model(rng: np.random.Generator, node_index: int) -> float:
        return value
    return model


class SimCluster:
    """Deterministic in-process cluster: one event heap, simulated clock.

    The controller validates and builds every structure before dispatch, so
    malformed jobs fail fast without burning node capacity.  Dispatch is
    greedy least-loaded with node-id tie-breaks; completions free capacity
    immediately and the next queued job goes out at the same simulated time.
    """

    def __init__(self, evaluator: Callable[[EvalRequest], EvalResult],
                 node_count: int = 4, capacity: int = 2,
                 latency_model: Callable | None = None, seed: int = 0,
                 fault_plan: FaultPlan | None = None, max_retries: int = 2,
                 validate_structure: Callable | None = None):
        self.evaluator = evaluator
        self.nodes = [NodeDescriptor(f"node-{i}", capacity)
                      for i in range(node_count)]
        self.latency_model = latency_model or constant_latency()
        self._rng = np.random.default_rng(seed)
        self.fault_plan = fault_plan or FaultPlan()
        self.max_retries = max_retries
        self.validate_structure = validate_structure or self._default_validate
        self.events: list[dict] = []
        self.now = 0.0
        self._seq = itertools.count()
        self._crashes_armed = False

    @staticmethod
    def _default_validate(codes: tuple[LayerCode, ...]) -> None:
        build_block(codes, 32)

    def _log(self, event: str, **extra) -> None:
        self.events.append({"t": round(self.now, 9), "seq": next(self._seq),
                            "event": event, **extra})

    # -- event loop -------------------------------------------------------

    def run_batch(self, jobs: list[JobRecord]) -> None:
        by_id = {job.job_id: job for job in jobs}
        pending: list[tuple[float, int, str, dict]] = []
        ready: list[str] = []
        in_flight: dict[str, list[tuple[str, int]]] = {n.node_id: []
                                                       for n in self.nodes}
        tokens: dict[str, int] = {job.job_id: 0 for job in jobs}

        def push(when, kind, payload):
            heapq.heappush(pending, (when, next(self._seq), kind, payload))

        if not self._crashes_armed:
            for node in self.nodes:
                when = self.fault_plan.crash_time(node.node_id)
                if when is not None:
                    push(when, "crash", {"node": node.node_id})
            self._crashes_armed = True

        for job in jobs:
            job.submitted_at = self.now
            self._log("submitted", job=job.job_id)
            self._enqueue(ready, job.job_id)

        def dispatch():
            while ready:
                candidates = [n for n in self.nodes
                              if n.healthy and len(in_flight[n.node_id]) < n.capacity]
                if not candidates:
                    return
                node = min(candidates,
                           key=lambda n: (len(in_flight[n.node_id]), n.node_id))
                job = by_id[ready.pop(0)]
                job.transition("dispatched")
                job.node_id = node.node_id
                job.attempts += 1
                token = tokens[job.job_id]
                in_flight[node.node_id].append((job.job_id, token))
                self._log("dispatched", job=job.job_id, node=node.node_id,
                          attempt=job.attempts)
                outcome, reason = self._evaluate(job)
                duration = self.latency_model(self._rng,
                                              self.nodes.index(node))
                push(self.now + duration, "complete",
                     {"job": job.job_id, "node": node.node_id, "token": token,
                      "outcome": outcome, "reason": reason})

        def fail(job: JobRecord, reason: str):
            job.transition("failed")
            job.failure_reason = reason
            self._log("failed", job=job.job_id, node=job.node_id, reason=reason)
            if job.attempts <= self.max_retries:
                job.transition("retried")
                tokens[job.job_id] += 1
                self._log("requeued", job=job.job_id, attempt=job.attempts)
                self._enqueue(ready, job.job_id)
            else:
                self._log("abandoned", job=job.job_id)

        dispatch()
        while any(not job.terminal for job in jobs):
            if not pending:
                if any(n.healthy for n in self.nodes):
                    raise SchedulingStallError("event queue drained with jobs "
                                               "outstanding")
                raise SchedulingStallError("no healthy compute nodes remain")
            when, _, kind, payload = heapq.heappop(pending)
            self.now = max(self.now, when)
            if kind == "crash":
                node = next(n for n in self.nodes
                            if n.node_id == payload["node"])
                if not node.healthy:
                    continue
                node.healthy = False
                self._log("crash", node=node.node_id)
                for job_id, token in in_flight[node.node_id]:
                    if tokens[job_id] == token and not by_id[job_id].terminal:
                        fail(by_id[job_id], "node-crash")
                in_flight[node.node_id] = []
            elif kind == "complete":
                job = by_id[payload["job"]]
                if tokens[job.job_id] != payload["token"] or job.terminal:
                    continue  # stale completion from a crashed attempt
                node_jobs = in_flight[payload["node"]]
                node_jobs.remove((job.job_id, payload["token"]))
                job.completed_at = self.now
                if payload["outcome"] is None:
                    fail(job, payload["reason"])
                else:
                    job.transition("done")
                    job.result = payload["outcome"]
                    self._log("completed", job=job.job_id, node=payload["node"])
            dispatch()

    @staticmethod
    def _enqueue(ready: list[str], job_id: str) -> None:
        ready.append(job_id)

    def _evaluate(self, job: JobRecord):
        if self.fault_plan.failures_for(job.job_id) >= job.attempts:
            return None, "injected-failure"
        try:
            self.validate_structure(job.codes)
            return self.evaluator(job.request()), None
        except (ShapeError, StructureError, EvalValidationError,
                RetriableEvalError, EvalProtocolError) as exc:
            return None, f"{type(exc).__name__}: {exc}"


# ---------------------------------------------------------------------------
# Socket backend
# ---------------------------------------------------------------------------

def result_message(job_id: str, result: EvalResult) -> dict:
    return {"id": job_id, "curve": list(result.accuracy_curve),
            "flops": result.complexity.flops,
            "density": [result.complexity.density.numerator,
                        result.complexity.density.denominator],
            "params": result.complexity.params, "status": "ok"}


def result_from_message(message: dict) -> EvalResult:
    num, den = message["density"]
    report = ComplexityReport(message["flops"], Fraction(num, den),
                              message["params"])
    curve = tuple(float(v) for v in message["curve"])
    return EvalResult(curve, curve[-1], report)


class ComputeNodeServer:
    """Serves evaluation jobs over TCP until told to shut down.

    Handles each connection serially (one in-flight job per connection),
    caches results by job id so duplicate deliveries never re-run the
    evaluator, answers health probes, and replies with a protocol-error
    message — keeping the connection usable — when a line is malformed.
    """

    def __init__(self, evaluator: Callable[[EvalRequest], EvalResult],
                 host: str = "127.0.0.1", port: int = 0):
        self.evaluator = evaluator
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()
        self._cache: dict[str, dict] = {}
        self._cache_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None

    def start(self) -> "ComputeNodeServer":
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        self._listener.settimeout(0.1)
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            worker = threading.Thread(target=self._serve_connection,
                                      args=(conn,), daemon=True)
            worker.start()
            self._threads.append(worker)
        self._listener.close()

    def _serve_connection(self, conn: socket.socket):
        reader = wire.LineReader(conn)
        with conn:
            while True:
                try:
                    message = reader.read_message(timeout=0.2)
                except socket.timeout:
                    if self._stop.is_set():
                        return
                    continue
                except (wire.WireError, OSError) as exc:
                    try:
                        wire.send_json_line(conn, {"status": "protocol-error",
                                                   "reason": str(exc)})
                        continue
                    except OSError:
                        return
                if message is None:
                    return
                reply = self._handle(message)
                try:
                    wire.send_json_line(conn, reply)
                except OSError:
                    return
                if message.get("type") == "shutdown":
                    self._stop.set()
                    return

    def _handle(self, message: dict) -> dict:
        if message.get("type") == "health":
            return {"type": "health", "status": "ok",
                    "cached": len(self._cache)}
        if message.get("type") == "shutdown":
            return {"type": "shutdown", "status": "ok"}
        job_id = message.get("id")
        if not isinstance(job_id, str) or "codes" not in message:
            return {"status": "protocol-error",
                    "reason": "job needs string 'id' and 'codes'"}
        with self._cache_lock:
            cached = self._cache.get(job_id)
        if cached is not None:
            return cached
        try:
            codes = codes_from_json(message["codes"])
            request = EvalRequest(serialize_block(codes),
                                  epochs=int(message.get("epochs", 12)),
                                  job_id=job_id,
                                  seed=int(message.get("seed", 0)))
            result = self.evaluator(request)
            reply = result_message(job_id, result)
        except Exception as exc:
            reply = {"id": job_id, "status": "failed",
                     "reason": f"{type(exc).__name__}: {exc}"}
        with self._cache_lock:
            self._cache[job_id] = reply
        return reply

    def shutdown(self, timeout: float = 5.0):
        self._stop.set()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout)
        for worker in self._threads:
            worker.join(timeout)

    @property
    def evaluations_cached(self) -> int:
        return len(self._cache)


class _SlotWorker(threading.Thread):
    """One connection slot on one remote node; serial request/response."""

    def __init__(self, node_id: str, host: str, port: int, timeout: float,
                 work: "queue.Queue", results: "queue.Queue"):
        super().__init__(daemon=True)
        self.node_id = node_id
        self.host, self.port, self.timeout = host, port, timeout
        self.work = work
        self.results = results
        self._stop_flag = threading.Event()
        self._sock: socket.socket | None = None

    def stop(self):
        self._stop_flag.set()

    def _send_recv(self, payload: dict) -> dict | None:
        if self._sock is None:
            self._sock = socket.create_connection((self.host, self.port),
                                                  timeout=self.timeout)
            self._reader = wire.LineReader(self._sock)
        wire.send_json_line(self._sock, payload)
        return self._reader.read_message(timeout=self.timeout)

    def run(self):
        while not self._stop_flag.is_set():
            try:
                job = self.work.get(timeout=0.1)
            except queue.Empty:
                continue
            if job is None:
                return
            payload = {"id": job.job_id,
                       "codes": [list(c) for c in job.codes],
                       "epochs": job.epochs, "seed": job.seed}
            try:
                message = self._send_recv(payload)
            except (OSError, wire.WireError) as exc:
                self._drop_connection()
                self.results.put((job, None, f"{type(exc).__name__}: {exc}",
                                  True, self.node_id))
                continue
            if message is None:
                self._drop_connection()
                self.results.put((job, None, "connection closed", True,
                                  self.node_id))
            elif message.get("status") == "ok":
                self.results.put((job, result_from_message(message), None,
                                  False, self.node_id))
            else:
                self.results.put((job, None, message.get("reason", "failed"),
                                  False, self.node_id))

    def _drop_connection(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


class SocketCluster:
    """Dispatches jobs to remote compute nodes over TCP.

    Capacity per node is enforced structurally: each node gets exactly
    ``capacity`` connection slots, each carrying one request at a time.
    """

    def __init__(self, endpoints: list[tuple[str, int]], capacity: int = 2,
                 timeout: float = 60.0, max_retries: int = 2):
        self.max_retries = max_retries
        self.events: list[dict] = []
        self._work: queue.Queue = queue.Queue()
        self._results: queue.Queue = queue.Queue()
        self._workers = []
        for n, (host, port) in enumerate(endpoints):
            for _ in range(capacity):
                worker = _SlotWorker(f"node-{n}", host, port, timeout,
                                     self._work, self._results)
                worker.start()
                self._workers.append(worker)

    def _log(self, event: str, **extra):
        self.events.append({"t": time.monotonic(), "event": event, **extra})

    def run_batch(self, jobs: list[JobRecord]) -> None:
        outstanding = 0
        for job in jobs:
            job.submitted_at = time.monotonic()
            self._log("submitted", job=job.job_id)
            job.transition("dispatched")
            job.attempts += 1
            self._work.put(job)
            outstanding += 1
        while outstanding:
            job, result, reason, retriable, node_id = self._results.get()
            job.node_id = node_id
            if result is not None:
                job.transition("done")
                job.result = result
                job.completed_at = time.monotonic()
                self._log("completed", job=job.job_id, node=node_id)
                outstanding -= 1
                continue
            job.transition("failed")
            job.failure_reason = reason
            self._log("failed", job=job.job_id, node=node_id, reason=reason)
            if retriable and job.attempts <= self.max_retries:
                job.transition("retried")
                self._log("requeued", job=job.job_id)
                job.transition("dispatched")
                job.attempts += 1
                self._work.put(job)
            else:
                job.completed_at = time.monotonic()
                self._log("abandoned", job=job.job_id)
                outstanding -= 1

    def close(self):
        for worker in self._workers:
            worker.stop()
        for worker in self._workers:
            worker.join(timeout=2.0)


# ---------------------------------------------------------------------------
# Master loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IterationRow:
    iteration: int
    epsilon: float
    mean_reward: float
    max_reward: float
    mean_accuracy: float
    max_accuracy: float
    completed: int
    failed: int


@dataclass
class SearchOutcome:
    rows: list[IterationRow]
    qtable: QTable
    replay: ReplayMemory
    jobs: list[JobRecord]
    events: list[dict]
    samples: list[list[tuple[tuple[LayerCode, ...], float, float]]] = \
        field(default_factory=list)

    def all_samples(self):
        for batch in self.samples:
            yield from batch

    def top_blocks(self, k: int = 10, by: str = "reward"):
        idx = 2 if by == "reward" else 1
        ranked = sorted(self.all_samples(), key=lambda s: s[idx], reverse=True)
        return ranked[:k]


class SearchMaster:
    """Runs the per-iteration sample / evaluate / replay-update cycle."""

    def __init__(self, limits: CodeSpaceLimits, schedule: EpsilonSchedule,
                 cluster, reward_config: RewardConfig | None = None,
                 seed: int = 0, batch_size: int = 64, epochs: int = 12,
                 alpha: float = 0.01, gamma: float = 1.0, shaped: bool = True,
                 replay_updates: int | None = None,
                 failure_abort_fraction: float = 0.10,
                 replay_capacity: int | None = None):
        self.limits = limits
        self.schedule = schedule
        self.cluster = cluster
        self.reward_config = reward_config or RewardConfig()
        self.batch_size = batch_size
        self.epochs = epochs
        self.shaped = shaped
        self.replay_updates = replay_updates or batch_size
        self.failure_abort_fraction = failure_abort_fraction
        seeds = np.random.SeedSequence(seed).spawn(2)
        self.sampler_rng = np.random.default_rng(seeds[0])
        self.qtable = QTable(limits, alpha=alpha, gamma=gamma)
        self.replay = ReplayMemory(seed=seeds[1], capacity=replay_capacity)
        self.outcome = SearchOutcome([], self.qtable, self.replay, [], [])
        self.iterations_done = 0

    def run_iteration(self, iteration: int) -> IterationRow:
        epsilon = self.schedule.epsilon_at(iteration)
        trajectories = [sample_trajectory(self.qtable, epsilon, self.limits,
                                          self.sampler_rng)
                        for _ in range(self.batch_size)]
        jobs = [JobRecord(f"it{iteration:03d}-{k:02d}", codes,
                          epochs=self.epochs, seed=iteration * 1000 + k)
                for k, codes in enumerate(trajectories)]
        self.cluster.run_batch(jobs)
        self.outcome.jobs.extend(jobs)

        failed = [job for job in jobs if job.state != "done"]
        if len(failed) > self.failure_abort_fraction * len(jobs):
            raise BatchError(f"iteration {iteration}: {len(failed)} of "
                             f"{len(jobs)} jobs failed permanently")
        batch_samples = []
        rewards, accuracies = [], []
        for job in jobs:  # submission order, not completion order
            if job.state != "done":
                continue
            reward = composite_reward(job.result, self.reward_config)
            accuracy = job.result.early_stop_accuracy
            self.replay.add(job.codes, reward)
            batch_samples.append((job.codes, accuracy, reward))
            rewards.append(reward)
            accuracies.append(accuracy)
        self.outcome.samples.append(batch_samples)
        replay_pass(self.qtable, self.replay, self.replay_updates,
                    shaped=self.shaped)
        row = IterationRow(iteration, epsilon, float(np.mean(rewards)),
                           float(np.max(rewards)), float(np.mean(accuracies)),
                           float(np.max(accuracies)), len(rewards), len(failed))
        self.outcome.rows.append(row)
        self.iterations_done = iteration
        return row

    def run(self, progress: Callable[[IterationRow], None] | None = None
            ) -> SearchOutcome:
        for iteration in range(self.iterations_done + 1,
                               self.schedule.total_iterations + 1):
            row = self.run_iteration(iteration)
            if progress is not None:
                progress(row)
        self.outcome.events = list(getattr(self.cluster, "events", []))
        return self.outcome
