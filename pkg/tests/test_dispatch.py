import random
import socket
import threading
import time

import numpy as np
import pytest

from dqlstm import dispatch, vqc
from dqlstm.dispatch import JobRequest, JobResult, WorkerEndpoint, WorkerPool
from dqlstm.vqc import VqcConfig

GOLDEN_REQUEST = (b'{"job_id":7,"kind":"evaluate","num_qubits":1,"depth":0,"input_dim":1,'
                  b'"output_dim":1,"hadamard":false,"params":[],"features":[0.0]}\n')
GOLDEN_RESPONSE = b'{"job_id":7,"status":"ok","payload":[1.0],"rows":1,"cols":1,"message":""}\n'


def start_server(max_qubits=10, server_cls=dispatch.WorkerServer, **kwargs):
    server = server_cls(("127.0.0.1", 0), max_qubits, **kwargs)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


@pytest.fixture
def worker():
    server = start_server()
    yield server
    server.shutdown()
    server.server_close()


def free_port():
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def random_jobs(rng, n, kinds=dispatch.KINDS):
    jobs = []
    for k in range(n):
        q = int(rng.integers(1, 4))
        cfg = VqcConfig(q, int(rng.integers(0, 3)), int(rng.integers(1, q + 1)),
                        int(rng.integers(1, q + 1)))
        jobs.append(JobRequest(k, kinds[k % len(kinds)], cfg,
                               rng.uniform(-3, 3, cfg.num_params),
                               rng.uniform(-2, 2, cfg.input_dim)))
    return jobs


class Client:
    def __init__(self, address):
        host, port = dispatch.split_address(address)
        self.sock = socket.create_connection((host, port), timeout=5)
        self.reader = self.sock.makefile("rb")

    def send(self, raw):
        self.sock.sendall(raw)
        return self.reader.readline()

    def close(self):
        self.reader.close()
        self.sock.close()


def test_golden_frames():
    job = dispatch.decode_request(GOLDEN_REQUEST)
    assert dispatch.encode_request(job) == GOLDEN_REQUEST
    assert dispatch.encode_result(dispatch.execute_job(job)) == GOLDEN_RESPONSE


def test_golden_frames_over_tcp(worker):
    client = Client(worker.address)
    assert client.send(GOLDEN_REQUEST) == GOLDEN_RESPONSE
    client.close()


def test_payload_round_trips_bit_exact():
    rng = np.random.default_rng(0)
    for job in random_jobs(rng, 12):
        assert dispatch.decode_request(dispatch.encode_request(job)).params.tolist() == job.params.tolist()
        result = dispatch.execute_job(job)
        back = dispatch.decode_result(dispatch.encode_result(result), job)
        assert back.payload.shape == result.payload.shape
        assert back.payload.strides == result.payload.strides
        assert np.array_equal(back.payload, result.payload)


def test_capacity_rule_keeps_connection(worker):
    client = Client(worker.address)
    big = GOLDEN_REQUEST.replace(b'"num_qubits":1', b'"num_qubits":30')
    reply = dispatch.decode_result(client.send(big))
    assert reply.status == "error" and reply.message == dispatch.CAPACITY_EXCEEDED
    assert reply.job_id == 7
    assert client.send(GOLDEN_REQUEST) == GOLDEN_RESPONSE
    client.close()


def test_malformed_frame_closes_connection(worker):
    client = Client(worker.address)
    reply = dispatch.decode_result(client.send(b'{"job_id": 1, "kind"\n'))
    assert reply.status == "error" and reply.job_id is None
    assert client.reader.readline() == b""
    client.close()


def test_invalid_circuit_is_an_error_not_a_disconnect(worker):
    client = Client(worker.address)
    bad = GOLDEN_REQUEST.replace(b'"input_dim":1', b'"input_dim":2')
    reply = dispatch.decode_result(client.send(bad))
    assert reply.status == "error"
    assert client.send(GOLDEN_REQUEST) == GOLDEN_RESPONSE
    client.close()


def test_decode_result_rejects_bad_frames():
    job = dispatch.decode_request(GOLDEN_REQUEST)
    with pytest.raises(dispatch.ProtocolError):
        dispatch.decode_result(b"not json\n", job)
    with pytest.raises(dispatch.ProtocolError):
        dispatch.decode_result(b'{"job_id":7,"status":"ok","payload":[1.0,2.0],"rows":1,"cols":1,"message":""}', job)
    with pytest.raises(dispatch.ProtocolError):
        dispatch.decode_result(b'{"job_id":8,"status":"ok","payload":[1.0],"rows":1,"cols":1,"message":""}', job)


def test_single_inprocess_job_is_pass_through():
    cfg = VqcConfig(2, 1, 2, 2)
    job = JobRequest(0, "param_shift_gradient", cfg, np.linspace(-1, 1, 4), [0.3, -0.4])
    [result] = dispatch.submit_batch([job], [WorkerEndpoint("inprocess")])
    assert result.ok
    assert np.array_equal(result.payload, vqc.param_shift_gradient(cfg, job.params, job.features))


def shuffling_runner(seed, log=None):
    rnd = random.Random(seed)
    lock = threading.Lock()

    def run(job):
        with lock:
            delay = rnd.uniform(0, 0.002)
        time.sleep(delay)
        if log is not None:
            with lock:
                log.append(job.job_id)
        return dispatch.execute_job(job)

    return run


def test_order_preserved_under_random_completion():
    rng = np.random.default_rng(1)
    jobs = random_jobs(rng, 4)
    expected = [dispatch.execute_job(j).payload for j in jobs]
    completion_orders = set()
    for trial in range(100):
        done = []
        with WorkerPool(dispatch.inprocess_pool(2), runner=shuffling_runner(trial, done)) as pool:
            results = pool.submit_batch(jobs)
        completion_orders.add(tuple(done))
        assert [r.job_id for r in results] == [j.job_id for j in jobs]
        for got, want in zip(results, expected):
            assert np.array_equal(got.payload, want)
    assert len(completion_orders) > 1


def test_every_job_runs_exactly_once_inprocess():
    rng = np.random.default_rng(2)
    jobs = random_jobs(rng, 30)
    seen = []
    with WorkerPool([WorkerEndpoint("inprocess", 2), WorkerEndpoint("inprocess")],
                    runner=shuffling_runner(0, seen)) as pool:
        pool.submit_batch(jobs)
        pool.submit_batch(jobs)
    assert sorted(seen) == sorted([j.job_id for j in jobs] * 2)


def test_batch_validation():
    with pytest.raises(ValueError):
        dispatch.submit_batch([], dispatch.inprocess_pool(1))
    cfg = VqcConfig(1, 0, 1, 1)
    jobs = [JobRequest(3, "evaluate", cfg, [], [0.0]), JobRequest(3, "evaluate", cfg, [], [0.0])]
    with pytest.raises(ValueError):
        dispatch.submit_batch(jobs, dispatch.inprocess_pool(1))
    with pytest.raises(ValueError):
        dispatch.submit_batch(jobs[:1], [])


def test_remote_matches_local(worker):
    second = start_server()
    try:
        rng = np.random.default_rng(3)
        jobs = random_jobs(rng, 24)
        pool = [WorkerEndpoint(worker.address), WorkerEndpoint(second.address)]
        with WorkerPool(pool) as workers:
            remote = workers.submit_batch(jobs)
        local = dispatch.SequentialExecutor().submit_batch(jobs)
        for r, l in zip(remote, local):
            assert r.ok and np.array_equal(r.payload, l.payload)
        counts = worker.job_counts + second.job_counts
        assert all(counts[j.job_id] == 1 for j in jobs)
        assert worker.job_counts and second.job_counts
    finally:
        second.shutdown()
        second.server_close()


def test_dead_endpoint_is_retried_on_live_one(worker):
    cfg = VqcConfig(1, 0, 1, 1, hadamard=False)
    jobs = [JobRequest(k, "evaluate", cfg, [], [0.0]) for k in range(2)]
    pool = [WorkerEndpoint(f"127.0.0.1:{free_port()}"), WorkerEndpoint(worker.address)]
    results = dispatch.submit_batch(jobs, pool)
    assert all(r.ok for r in results)
    assert [r.payload.tolist() for r in results] == [[1.0], [1.0]]
    assert worker.job_counts == {0: 1, 1: 1}


def test_all_endpoints_dead_gives_error_results():
    cfg = VqcConfig(1, 0, 1, 1)
    jobs = [JobRequest(k, "evaluate", cfg, [], [0.0]) for k in range(3)]
    pool = [WorkerEndpoint(f"127.0.0.1:{free_port()}"), WorkerEndpoint(f"127.0.0.1:{free_port()}")]
    results = dispatch.submit_batch(jobs, pool)
    assert [r.job_id for r in results] == [0, 1, 2]
    assert all(r.status == "error" for r in results)


class CrashOnceServer(dispatch.WorkerServer):
    """Computes job ``victim`` and then drops the connection without replying."""

    victim = 2

    def compute(self, job):
        result = super().compute(job)
        if job.job_id == self.victim and self.job_counts[job.job_id] == 1:
            raise ConnectionAbortedError("injected fault")
        return result


def test_single_fault_runs_a_job_at_most_twice(worker):
    flaky = start_server(server_cls=CrashOnceServer)
    try:
        rng = np.random.default_rng(4)
        jobs = random_jobs(rng, 8)
        pool = [WorkerEndpoint(flaky.address), WorkerEndpoint(worker.address)]
        results = dispatch.submit_batch(jobs, pool)
        assert all(r.ok for r in results)
        counts = flaky.job_counts + worker.job_counts
        assert counts[CrashOnceServer.victim] == 2
        assert all(counts[j.job_id] == 1 for j in jobs if j.job_id != CrashOnceServer.victim)
    finally:
        flaky.shutdown()
        flaky.server_close()


def test_remote_error_status_is_not_retried(worker):
    cfg = VqcConfig(12, 0, 1, 1)
    job = JobRequest(0, "evaluate", cfg, [], [0.0])
    [result] = dispatch.submit_batch([job], [WorkerEndpoint(worker.address)])
    assert result.status == "error" and result.message == dispatch.CAPACITY_EXCEEDED
    assert worker.job_counts == {}


def test_parse_pool():
    text = """
    # two remote QPUs and one local
    10.0.0.5:7000
    worker-b:7001 capacity=2
    inprocess
    """
    pool = dispatch.parse_pool(text)
    assert pool == [WorkerEndpoint("10.0.0.5:7000"), WorkerEndpoint("worker-b:7001", 2),
                    WorkerEndpoint("inprocess")]
    with pytest.raises(ValueError):
        dispatch.parse_pool("host-without-port\n")
    with pytest.raises(ValueError):
        dispatch.parse_pool("a:1 speed=3\n")
    with pytest.raises(ValueError):
        dispatch.parse_pool("# nothing\n")
    with pytest.raises(ValueError):
        WorkerEndpoint("inprocess", 0)
