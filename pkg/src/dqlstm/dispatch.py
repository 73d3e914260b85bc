"""Sub-circuit job execution across a pool of workers.

A pool is a list of endpoints. ``inprocess`` endpoints run jobs on threads
of the calling process; ``host:port`` endpoints are worker processes
speaking newline-delimited JSON over TCP (see :func:`serve_worker`).

Wire format, one JSON object per line, compact separators::

    request  {"job_id","kind","num_qubits","depth","input_dim","output_dim",
              "hadamard","params","features"}
    response {"job_id","status","payload","rows","cols","message"}

Floats go through ``repr`` (shortest round-trip), so payloads survive the
wire bit-for-bit. ``payload`` is row-major; evaluate results are sent as a
single row.
"""
from __future__ import annotations

import collections
import json
import logging
import socket
import socketserver
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import vqc
from .vqc import VqcConfig

log = logging.getLogger(__name__)

KINDS = ("evaluate", "param_shift_gradient", "input_jacobian")
INPROCESS = "inprocess"
CAPACITY_EXCEEDED = "qubit capacity exceeded"


class ProtocolError(Exception):
    pass


class PoolError(Exception):
    """No endpoint in the pool could be used."""


@dataclass
class JobRequest:
    job_id: int
    kind: str
    config: VqcConfig
    params: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown job kind {self.kind!r}")
        self.params = np.asarray(self.params, dtype=float).ravel()
        self.features = np.asarray(self.features, dtype=float).ravel()


@dataclass
class JobResult:
    job_id: Optional[int]
    payload: Optional[np.ndarray]
    status: str = "ok"
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def execute_job(job: JobRequest) -> JobResult:
    """Compute one job locally."""
    try:
        if job.kind == "evaluate":
            payload = vqc.evaluate(job.config, job.params, job.features)
        elif job.kind == "param_shift_gradient":
            payload = vqc.param_shift_gradient(job.config, job.params, job.features)
        else:
            payload = vqc.input_jacobian(job.config, job.params, job.features)
    except (ValueError, IndexError) as exc:
        return JobResult(job.job_id, None, "error", str(exc))
    # same memory layout as a decoded remote payload, so downstream BLAS sums agree bit for bit
    return JobResult(job.job_id, np.ascontiguousarray(payload))


def expected_shape(job: JobRequest) -> tuple:
    cfg = job.config
    if job.kind == "evaluate":
        return (cfg.output_dim,)
    if job.kind == "param_shift_gradient":
        return (cfg.output_dim, cfg.num_params)
    return (cfg.output_dim, cfg.input_dim)


# -- wire format -----------------------------------------------------------


def _dumps(obj) -> bytes:
    return (json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n").encode()


def encode_request(job: JobRequest) -> bytes:
    cfg = job.config
    return _dumps(
        {
            "job_id": job.job_id,
            "kind": job.kind,
            "num_qubits": cfg.num_qubits,
            "depth": cfg.depth,
            "input_dim": cfg.input_dim,
            "output_dim": cfg.output_dim,
            "hadamard": cfg.hadamard,
            "params": [float(v) for v in job.params],
            "features": [float(v) for v in job.features],
        }
    )


def _check_fields(obj, fields):
    if not isinstance(obj, dict):
        raise ProtocolError("frame is not a JSON object")
    missing = [f for f in fields if f not in obj]
    if missing:
        raise ProtocolError(f"frame is missing {', '.join(missing)}")


def _number_list(value, name):
    if not isinstance(value, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        raise ProtocolError(f"{name} must be a list of numbers")
    return np.array(value, dtype=float)


def parse_request(obj: dict) -> JobRequest:
    """Build a job from a decoded request object.

    Structural problems raise :class:`ProtocolError`; a well-formed request
    with an invalid circuit raises ``ValueError``.
    """
    _check_fields(obj, ("job_id", "kind", "num_qubits", "depth", "input_dim",
                        "output_dim", "hadamard", "params", "features"))
    ints = ("job_id", "num_qubits", "depth", "input_dim", "output_dim")
    for name in ints:
        if not isinstance(obj[name], int) or isinstance(obj[name], bool):
            raise ProtocolError(f"{name} must be an integer")
    if not isinstance(obj["hadamard"], bool):
        raise ProtocolError("hadamard must be a boolean")
    if obj["kind"] not in KINDS:
        raise ProtocolError(f"unknown kind {obj['kind']!r}")
    params = _number_list(obj["params"], "params")
    features = _number_list(obj["features"], "features")
    config = VqcConfig(obj["num_qubits"], obj["depth"], obj["input_dim"],
                       obj["output_dim"], obj["hadamard"])
    return JobRequest(obj["job_id"], obj["kind"], config, params, features)


def decode_request(line: bytes) -> JobRequest:
    try:
        obj = json.loads(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed frame: {exc}") from None
    return parse_request(obj)


def encode_result(result: JobResult) -> bytes:
    if result.payload is None:
        rows, cols, flat = 0, 0, []
    else:
        matrix = np.atleast_2d(result.payload)
        rows, cols = matrix.shape
        flat = [float(v) for v in matrix.ravel()]
    return _dumps(
        {
            "job_id": result.job_id,
            "status": result.status,
            "payload": flat,
            "rows": rows,
            "cols": cols,
            "message": result.message,
        }
    )


def decode_result(line: bytes, job: Optional[JobRequest] = None) -> JobResult:
    """Parse a response frame; with ``job`` given, restore the payload shape."""
    try:
        obj = json.loads(line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed response: {exc}") from None
    _check_fields(obj, ("job_id", "status", "payload", "rows", "cols", "message"))
    if obj["status"] not in ("ok", "error"):
        raise ProtocolError(f"unknown status {obj['status']!r}")
    if obj["status"] == "error":
        return JobResult(obj["job_id"], None, "error", str(obj["message"]))
    flat = _number_list(obj["payload"], "payload")
    rows, cols = obj["rows"], obj["cols"]
    if not isinstance(rows, int) or not isinstance(cols, int) or rows * cols != flat.size:
        raise ProtocolError("payload size does not match rows x cols")
    payload = flat.reshape(rows, cols)
    if job is not None:
        if obj["job_id"] != job.job_id:
            raise ProtocolError(f"response for job {obj['job_id']} while waiting for {job.job_id}")
        shape = expected_shape(job)
        if payload.size != int(np.prod(shape)):
            raise ProtocolError(f"payload of {payload.size} values, expected shape {shape}")
        payload = payload.reshape(shape)
    return JobResult(obj["job_id"], payload, "ok", str(obj["message"]))


# -- endpoints and pools ---------------------------------------------------


@dataclass(frozen=True)
class WorkerEndpoint:
    address: str
    capacity: int = 1

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.address != INPROCESS:
            split_address(self.address)

    @property
    def remote(self) -> bool:
        return self.address != INPROCESS


def split_address(address: str):
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {address!r}")
    return host, int(port)


def parse_pool(text: str) -> List[WorkerEndpoint]:
    """Parse a pool description.

    One endpoint per line, ``host:port`` or ``inprocess``, optionally
    followed by ``capacity=N``. Blank lines and ``#`` comments are ignored.
    """
    endpoints = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        address, *options = line.split()
        capacity = 1
        for option in options:
            key, _, value = option.partition("=")
            if key != "capacity" or not value.isdigit():
                raise ValueError(f"line {lineno}: unknown option {option!r}")
            capacity = int(value)
        try:
            endpoints.append(WorkerEndpoint(address, capacity))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if not endpoints:
        raise ValueError("pool lists no endpoints")
    return endpoints


def load_pool_file(path) -> List[WorkerEndpoint]:
    return parse_pool(Path(path).read_text())


def inprocess_pool(workers: int) -> List[WorkerEndpoint]:
    return [WorkerEndpoint(INPROCESS) for _ in range(workers)]


class SequentialExecutor:
    """Runs every job in the calling thread, in request order."""

    def __init__(self, runner: Callable[[JobRequest], JobResult] = execute_job):
        self.runner = runner

    def submit_batch(self, jobs: Sequence[JobRequest]) -> List[JobResult]:
        return [self.runner(job) for job in jobs]

    def close(self):
        pass


class _Connection:
    def __init__(self, address: str, timeout: float):
        host, port = split_address(address)
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.reader = self.sock.makefile("rb")

    def roundtrip(self, job: JobRequest) -> JobResult:
        self.sock.sendall(encode_request(job))
        line = self.reader.readline()
        if not line:
            raise ConnectionError("worker closed the connection")
        return decode_result(line, job)

    def close(self):
        try:
            self.reader.close()
            self.sock.close()
        except OSError:
            pass


class _Entry:
    __slots__ = ("index", "job", "avoid")

    def __init__(self, index, job):
        self.index = index
        self.job = job
        self.avoid = None


class WorkerPool:
    """Executes job batches over a fixed set of endpoints.

    Jobs are dealt round-robin to endpoint queues; a slot whose own queue is
    empty steals from the back of another queue. A job whose endpoint is
    unreachable is retried once on a different endpoint and then reported as
    an error result. Results always come back in request order.
    """

    def __init__(self, endpoints: Sequence[WorkerEndpoint],
                 runner: Callable[[JobRequest], JobResult] = execute_job,
                 timeout: float = 30.0):
        if not endpoints:
            raise ValueError("pool needs at least one endpoint")
        self.endpoints = list(endpoints)
        self.runner = runner
        self.timeout = timeout
        self._slots = [(e, s) for e, ep in enumerate(self.endpoints) for s in range(ep.capacity)]
        self._conns = {}
        self._executor = ThreadPoolExecutor(max_workers=len(self._slots),
                                            thread_name_prefix="dqlstm-slot")
        self._dead = set()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        self._executor.shutdown(wait=True)
        for conn in self._conns.values():
            conn.close()
        self._conns.clear()

    def _run_remote(self, slot, job):
        conn = self._conns.get(slot)
        if conn is None:
            conn = _Connection(self.endpoints[slot[0]].address, self.timeout)
            self._conns[slot] = conn
        try:
            return conn.roundtrip(job)
        except (OSError, ConnectionError):
            conn.close()
            del self._conns[slot]
            raise

    def submit_batch(self, jobs: Sequence[JobRequest]) -> List[JobResult]:
        if not jobs:
            raise ValueError("empty batch")
        ids = [job.job_id for job in jobs]
        if len(set(ids)) != len(ids):
            raise ValueError("job ids must be unique within a batch")
        n_endpoints = len(self.endpoints)
        live = [e for e in range(n_endpoints) if e not in self._dead]
        if not live:
            raise PoolError("every endpoint in the pool is unreachable")
        queues = [collections.deque() for _ in range(n_endpoints)]
        for k, job in enumerate(jobs):
            queues[live[k % len(live)]].append(_Entry(k, job))
        results: List[Optional[JobResult]] = [None] * len(jobs)
        state = {"remaining": len(jobs)}
        cond = threading.Condition()

        def finish(entry, result):
            results[entry.index] = result
            state["remaining"] -= 1
            cond.notify_all()

        def take(own):
            if own not in self._dead and queues[own]:
                return queues[own].popleft()
            for other in range(n_endpoints):
                if other == own:
                    continue
                q = queues[other]
                for pos in range(len(q) - 1, -1, -1):
                    if q[pos].avoid != own:
                        entry = q[pos]
                        del q[pos]
                        return entry
            return None

        def slot_loop(slot):
            own = slot[0]
            endpoint = self.endpoints[own]
            while True:
                with cond:
                    while True:
                        if state["remaining"] == 0 or own in self._dead:
                            return
                        entry = take(own)
                        if entry is not None:
                            break
                        cond.wait(0.05)
                if not endpoint.remote:
                    result = self.runner(entry.job)
                    with cond:
                        finish(entry, result)
                    continue
                try:
                    result = self._run_remote(slot, entry.job)
                except ProtocolError as exc:
                    with cond:
                        finish(entry, JobResult(entry.job.job_id, None, "error",
                                                f"protocol error: {exc}"))
                    continue
                except (OSError, ConnectionError) as exc:
                    log.warning("endpoint %s failed on job %s: %s",
                                endpoint.address, entry.job.job_id, exc)
                    with cond:
                        self._dead.add(own)
                        alive = [e for e in range(n_endpoints)
                                 if e not in self._dead and e != own]
                        if entry.avoid is None and alive:
                            entry.avoid = own
                            queues[alive[0]].append(entry)
                            cond.notify_all()
                        else:
                            finish(entry, JobResult(entry.job.job_id, None, "error",
                                                    f"worker unreachable: {exc}"))
                        # strand nothing on a dead endpoint
                        while queues[own]:
                            moved = queues[own].popleft()
                            if alive:
                                queues[alive[0]].append(moved)
                            else:
                                finish(moved, JobResult(moved.job.job_id, None, "error",
                                                        "no live endpoint"))
                        cond.notify_all()
                    return
                with cond:
                    finish(entry, result)

        futures = [self._executor.submit(slot_loop, slot) for slot in self._slots]
        for fut in futures:
            fut.result()
        with cond:
            # every slot exited while work remained (all endpoints dead)
            for k, result in enumerate(results):
                if result is None:
                    results[k] = JobResult(jobs[k].job_id, None, "error", "no live endpoint")
        return results


def submit_batch(jobs: Sequence[JobRequest], pool: Sequence[WorkerEndpoint]) -> List[JobResult]:
    """One-shot convenience wrapper around :class:`WorkerPool`."""
    if not pool:
        raise ValueError("empty pool")
    with WorkerPool(pool) as workers:
        return workers.submit_batch(jobs)


# -- worker server ---------------------------------------------------------


class _WorkerHandler(socketserver.StreamRequestHandler):
    def handle(self):
        server = self.server
        while True:
            try:
                line = self.rfile.readline()
            except OSError:
                return
            if not line:
                return
            if not line.strip():
                continue
            try:
                job = decode_request(line)
            except ProtocolError as exc:
                self._reply(JobResult(None, None, "error", str(exc)))
                return
            except ValueError as exc:
                job_id = _peek_job_id(line)
                self._reply(JobResult(job_id, None, "error", str(exc)))
                continue
            if job.config.num_qubits > server.max_qubits:
                self._reply(JobResult(job.job_id, None, "error", CAPACITY_EXCEEDED))
                continue
            result = server.compute(job)
            if not self._reply(result):
                return

    def _reply(self, result: JobResult) -> bool:
        try:
            self.wfile.write(encode_result(result))
            self.wfile.flush()
            return True
        except OSError:
            return False


def _peek_job_id(line: bytes):
    try:
        job_id = json.loads(line).get("job_id")
    except (ValueError, AttributeError):
        return None
    return job_id if isinstance(job_id, int) else None


class WorkerServer(socketserver.ThreadingTCPServer):
    """TCP worker evaluating one sub-circuit job per request line."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, max_qubits: int = 20,
                 runner: Callable[[JobRequest], JobResult] = execute_job):
        super().__init__(address, _WorkerHandler)
        self.max_qubits = max_qubits
        self.runner = runner
        self.job_counts = collections.Counter()
        self._lock = threading.Lock()

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def compute(self, job: JobRequest) -> JobResult:
        with self._lock:
            self.job_counts[job.job_id] += 1
        log.debug("job %s (%s, q=%d)", job.job_id, job.kind, job.config.num_qubits)
        return self.runner(job)


def serve_worker(bind_address: str, max_qubits: int = 20, ready=None):
    """Serve jobs on ``bind_address`` until interrupted."""
    host, port = split_address(bind_address)
    with WorkerServer((host, port), max_qubits) as server:
        log.info("worker listening on %s (max %d qubits)", server.address, max_qubits)
        if ready is not None:
            ready(server)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
