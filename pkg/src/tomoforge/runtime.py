"""Slab-parallel execution: partition along the rotation axis, halo exchange
for the 26-neighbor prior, a three-stage pipelined scheduler, and the
distributed solver loop.

Workers run as in-process threads, each owning a contiguous slice slab.  The
fidelity gradient is slice-local and needs no communication; the prior needs
one boundary plane from each neighbor, refreshed after every iteration.  All
cross-worker traffic flows through a transport object that tags every message
with a purpose, so tests can assert the protocol's message budget: exactly two
halo planes per interior boundary per iteration, plus one scalar
reduce/broadcast round (the single collective, used so every worker makes the
same restart/stop decision).

Extrapolated-point halos are never sent: the momentum update is element-wise,
so each worker rebuilds its neighbors' extrapolated boundary planes from the
current and previous iterate planes it already holds.

Two transports share one wire schema (16-byte header: sender, iteration,
purpose, payload byte length; little-endian float64 payload): an in-process
queue transport (default, deterministic) and a local-socket transport that
exercises real serialization.
"""

from __future__ import annotations

import queue
import select
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import ScanGeometry, Sinogram, Volume, polar_sampling
from .nufft import NufftPlan
from .qggmrf import prior_energy, prior_grad, stencil_for
from .radon import _back_project_rows
from .solver import IterationRecord, SolverConfig, estimate_lipschitz, solve
from .toeplitz import _apply_batch, build_psf, fidelity_context

__all__ = [
    "SlabPartition",
    "HaloMessage",
    "ControlMessage",
    "PipelineTask",
    "TransportError",
    "ProtocolError",
    "TransportTimeout",
    "InProcessTransport",
    "SocketTransport",
    "partition",
    "exchange_halos",
    "run_pipeline",
    "distributed_solve",
    "encode_message",
    "decode_header",
]

_HEADER = struct.Struct("<IIII")
_PURPOSE_CODES = {"lower": 0, "upper": 1, "reduce": 2, "broadcast": 3,
                  "snapshot": 4, "gather": 5}
_PURPOSE_NAMES = {v: k for k, v in _PURPOSE_CODES.items()}
_HALO_PURPOSES = ("lower", "upper")

DEFAULT_TIMEOUT = 120.0


class TransportError(RuntimeError):
    pass


class ProtocolError(TransportError):
    """Message arrived with the wrong iteration tag or purpose."""


class TransportTimeout(TransportError):
    """Expected neighbor message never arrived."""


@dataclass(frozen=True)
class SlabPartition:
    """Contiguous slice range [begin, end) owned by one worker."""

    worker_id: int
    begin: int
    end: int
    lower: int | None
    upper: int | None
    halo_width: int = 1

    def __post_init__(self):
        if self.end <= self.begin:
            raise ValueError("empty slab")
        if self.halo_width != 1:
            raise ValueError("halo width is fixed at 1 (26-neighbor stencil reach)")

    @property
    def slice_range(self):
        return (self.begin, self.end)

    @property
    def size(self) -> int:
        return self.end - self.begin


def partition(n_slices: int, n_workers: int) -> list[SlabPartition]:
    """Balanced contiguous slabs; sizes differ by at most 1, larger slabs first."""
    if n_workers < 1:
        raise ValueError("need at least one worker")
    if n_slices < n_workers:
        raise ValueError(f"cannot split {n_slices} slices across {n_workers} workers")
    base, extra = divmod(n_slices, n_workers)
    parts = []
    begin = 0
    for w in range(n_workers):
        size = base + (1 if w < extra else 0)
        parts.append(SlabPartition(
            worker_id=w, begin=begin, end=begin + size,
            lower=w - 1 if w > 0 else None,
            upper=w + 1 if w < n_workers - 1 else None,
        ))
        begin += size
    return parts


@dataclass(frozen=True)
class HaloMessage:
    """One boundary plane; ``side`` names the halo it fills at the receiver."""

    sender: int
    receiver: int
    iteration: int
    side: str  # "lower" | "upper"
    plane: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class ControlMessage:
    """Scalar reductions, broadcasts and slab gathers."""

    sender: int
    receiver: int
    iteration: int
    purpose: str  # "reduce" | "broadcast" | "snapshot" | "gather"
    values: np.ndarray = field(repr=False)


def _purpose_of(msg) -> str:
    return msg.side if isinstance(msg, HaloMessage) else msg.purpose


def encode_message(msg) -> bytes:
    """Wire format: <sender, iteration, purpose, payload bytes> + float64 payload."""
    payload = np.ascontiguousarray(
        msg.plane if isinstance(msg, HaloMessage) else msg.values,
        dtype="<f8").tobytes()
    header = _HEADER.pack(msg.sender, msg.iteration,
                          _PURPOSE_CODES[_purpose_of(msg)], len(payload))
    return header + payload


def decode_header(header: bytes):
    """Return (sender, iteration, purpose_name, payload_bytes)."""
    sender, iteration, code, nbytes = _HEADER.unpack(header)
    if code not in _PURPOSE_NAMES:
        raise ProtocolError(f"unknown message purpose code {code}")
    return sender, iteration, _PURPOSE_NAMES[code], nbytes


class _StatsMixin:
    def _init_stats(self):
        self._lock = threading.Lock()
        self.counts = {}
        self.halo_per_iteration = {}

    def _record(self, purpose: str, iteration: int):
        with self._lock:
            self.counts[purpose] = self.counts.get(purpose, 0) + 1
            if purpose in _HALO_PURPOSES:
                self.halo_per_iteration[iteration] = (
                    self.halo_per_iteration.get(iteration, 0) + 1)

    def halo_count(self) -> int:
        with self._lock:
            return sum(self.counts.get(p, 0) for p in _HALO_PURPOSES)


class InProcessTransport(_StatsMixin):
    """Queue-per-worker transport; planes are copied on send (no shared state)."""

    def __init__(self, n_workers: int, timeout: float = DEFAULT_TIMEOUT):
        self.n_workers = n_workers
        self.timeout = timeout
        self._inbox = {w: queue.Queue() for w in range(n_workers)}
        self._init_stats()

    def send(self, msg) -> None:
        self._record(_purpose_of(msg), msg.iteration)
        if isinstance(msg, HaloMessage):
            msg = HaloMessage(msg.sender, msg.receiver, msg.iteration, msg.side,
                              np.array(msg.plane, dtype=np.float64))
        else:
            msg = ControlMessage(msg.sender, msg.receiver, msg.iteration, msg.purpose,
                                 np.array(msg.values, dtype=np.float64))
        self._inbox[msg.receiver].put(msg)

    def recv(self, worker: int):
        try:
            return self._inbox[worker].get(timeout=self.timeout)
        except queue.Empty:
            raise TransportTimeout(
                f"worker {worker} timed out waiting for a message"
            ) from None

    def close(self):
        pass


class SocketTransport(_StatsMixin):
    """Full-mesh local socket transport using the binary wire schema.

    Exercises real serialization; suitable for thread or subprocess workers on
    one host.  Plane payloads should stay comfortably below the socket buffer
    size (bumped to 4 MiB where the OS allows).
    """

    def __init__(self, n_workers: int, plane_shape=None, timeout: float = DEFAULT_TIMEOUT):
        self.n_workers = n_workers
        self.plane_shape = plane_shape
        self.timeout = timeout
        self._socks = {w: {} for w in range(n_workers)}
        for a in range(n_workers):
            for b in range(a + 1, n_workers):
                sa, sb = socket.socketpair()
                for s in (sa, sb):
                    try:
                        s.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 4 * 2**20)
                        s.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 * 2**20)
                    except OSError:
                        pass
                self._socks[a][b] = sa
                self._socks[b][a] = sb
        self._init_stats()

    def send(self, msg) -> None:
        self._record(_purpose_of(msg), msg.iteration)
        self._socks[msg.sender][msg.receiver].sendall(encode_message(msg))

    def _read_exact(self, sock, nbytes: int) -> bytes:
        chunks = []
        while nbytes:
            chunk = sock.recv(nbytes)
            if not chunk:
                raise TransportError("peer closed the connection")
            chunks.append(chunk)
            nbytes -= len(chunk)
        return b"".join(chunks)

    def recv(self, worker: int):
        socks = list(self._socks[worker].values())
        ready, _, _ = select.select(socks, [], [], self.timeout)
        if not ready:
            raise TransportTimeout(f"worker {worker} timed out waiting for a message")
        sock = ready[0]
        sender, iteration, purpose, nbytes = decode_header(
            self._read_exact(sock, _HEADER.size))
        payload = np.frombuffer(self._read_exact(sock, nbytes), dtype="<f8").copy()
        if purpose in _HALO_PURPOSES:
            plane = payload.reshape(self.plane_shape) if self.plane_shape else payload
            return HaloMessage(sender, worker, iteration, purpose, plane)
        return ControlMessage(sender, worker, iteration, purpose, payload)

    def close(self):
        for peers in self._socks.values():
            for s in peers.values():
                try:
                    s.close()
                except OSError:
                    pass


class _Mailbox:
    """Per-worker receive matcher: collects an expected set of messages,
    stashing valid-but-early arrivals for later phases."""

    def __init__(self, transport, worker: int):
        self.transport = transport
        self.worker = worker
        self.pending = []

    def collect(self, expected: dict, iteration: int) -> dict:
        """``expected`` maps (sender, purpose) -> None; returns the filled map.
        Raises :class:`ProtocolError` on an iteration-tag mismatch for an
        expected (sender, purpose) pair."""
        missing = {key for key, v in expected.items() if v is None}
        for msg in list(self.pending):
            key = (msg.sender, _purpose_of(msg))
            if key in missing:
                self._admit(expected, missing, msg, key, iteration)
                self.pending.remove(msg)
        while missing:
            msg = self.transport.recv(self.worker)
            key = (msg.sender, _purpose_of(msg))
            if key in missing:
                self._admit(expected, missing, msg, key, iteration)
            else:
                self.pending.append(msg)
        return expected

    @staticmethod
    def _admit(expected, missing, msg, key, iteration):
        if msg.iteration != iteration:
            raise ProtocolError(
                f"message {key} arrived with iteration tag {msg.iteration}, "
                f"expected {iteration}"
            )
        expected[key] = msg
        missing.remove(key)


def _send_boundary_planes(part: SlabPartition, slab: np.ndarray, iteration: int,
                          transport) -> None:
    if part.lower is not None:
        transport.send(HaloMessage(part.worker_id, part.lower, iteration,
                                   side="upper", plane=slab[0]))
    if part.upper is not None:
        transport.send(HaloMessage(part.worker_id, part.upper, iteration,
                                   side="lower", plane=slab[-1]))


def _recv_halos(part: SlabPartition, mailbox: _Mailbox, iteration: int):
    expected = {}
    if part.lower is not None:
        expected[(part.lower, "lower")] = None
    if part.upper is not None:
        expected[(part.upper, "upper")] = None
    got = mailbox.collect(expected, iteration)
    lo = got.get((part.lower, "lower")) if part.lower is not None else None
    hi = got.get((part.upper, "upper")) if part.upper is not None else None
    return (lo.plane if lo else None), (hi.plane if hi else None)


def exchange_halos(partitions, slabs, iteration: int, transport=None):
    """Synchronous bulk halo exchange over all slabs (driver-side form).

    Returns one ``(halo_lo, halo_hi)`` pair per slab, with ``None`` on open
    ends.  Each worker's lower halo is its lower neighbor's last owned plane;
    the upper halo is the upper neighbor's first owned plane.
    """
    if len(partitions) != len(slabs):
        raise ValueError("need exactly one slab per partition")
    transport = transport or InProcessTransport(len(partitions))
    slabs = [np.asarray(s, dtype=np.float64) for s in slabs]
    for part, slab in zip(partitions, slabs):
        if slab.shape[0] != part.size:
            raise ValueError(
                f"slab of worker {part.worker_id} has {slab.shape[0]} slices, "
                f"expected {part.size}"
            )
        _send_boundary_planes(part, slab, iteration, transport)
    out = []
    for part in partitions:
        mailbox = _Mailbox(transport, part.worker_id)
        out.append(_recv_halos(part, mailbox, iteration))
    return out


@dataclass
class PipelineTask:
    """Work unit flowing through the ingest -> compute -> egress stages."""

    task_id: int
    stage: str
    payload: object


_STAGES = ("ingest", "compute", "egress")


def run_pipeline(payloads, stage_fns, queue_capacity: int = 2):
    """Run payloads through three pipelined stages on cooperating threads.

    ``stage_fns`` are the (ingest, compute, egress) callables, each mapping a
    payload to the next stage's payload.  Results keep submission order.  A
    stage exception aborts the pipeline and is re-raised with the failing task
    id.
    """
    if queue_capacity < 1:
        raise ValueError("queue capacity must be at least 1")
    if len(stage_fns) != 3:
        raise ValueError("exactly three stage functions required (ingest, compute, egress)")
    payloads = list(payloads)
    if not payloads:
        return []

    queues = [queue.Queue(maxsize=queue_capacity) for _ in range(2)]
    results = {}
    abort = threading.Event()
    failure = []
    sentinel = object()

    def put(q, item):
        while True:
            try:
                q.put(item, timeout=0.05)
                return True
            except queue.Full:
                if abort.is_set():
                    return False

    def take(q):
        while True:
            try:
                return q.get(timeout=0.05)
            except queue.Empty:
                if abort.is_set():
                    return sentinel

    def fail(stage, task_id, exc):
        if not failure:
            failure.append((stage, task_id, exc))
        abort.set()

    def source():
        for i, payload in enumerate(payloads):
            task = PipelineTask(task_id=i, stage="ingest", payload=payload)
            try:
                task.payload = stage_fns[0](task.payload)
            except Exception as exc:  # noqa: BLE001 - stage failures abort the run
                fail("ingest", task.task_id, exc)
                break
            task.stage = "compute"
            if not put(queues[0], task):
                break
        put(queues[0], sentinel)

    def middle():
        while True:
            task = take(queues[0])
            if task is sentinel:
                break
            try:
                task.payload = stage_fns[1](task.payload)
            except Exception as exc:  # noqa: BLE001
                fail("compute", task.task_id, exc)
                break
            task.stage = "egress"
            if not put(queues[1], task):
                break
        put(queues[1], sentinel)

    def sink():
        while True:
            task = take(queues[1])
            if task is sentinel:
                break
            try:
                results[task.task_id] = stage_fns[2](task.payload)
            except Exception as exc:  # noqa: BLE001
                fail("egress", task.task_id, exc)
                break

    threads = [threading.Thread(target=fn, name=f"pipeline-{name}", daemon=True)
               for fn, name in zip((source, middle, sink), _STAGES)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failure:
        stage, task_id, exc = failure[0]
        raise RuntimeError(f"pipeline stage '{stage}' failed for task {task_id}") from exc
    return [results[i] for i in range(len(payloads))]


def _slab_adjoint(plan: NufftPlan, sino_rows: np.ndarray) -> np.ndarray:
    """Adjoint of the slab's measured rows, staged through the pipeline
    (ingest and egress model the transfer stages)."""
    n = plan.grid_side
    out = np.empty((sino_rows.shape[0], n, n))

    def egress(item):
        idx, img = item
        out[idx] = img
        return idx

    run_pipeline(
        list(enumerate(sino_rows)),
        (lambda item: item,
         lambda item: (item[0], _back_project_rows(plan, item[1])),
         egress),
    )
    return out


def _allreduce(values: np.ndarray, wid: int, n_workers: int, iteration: int,
               transport, mailbox: _Mailbox) -> np.ndarray:
    """Sum small vectors across workers; every worker returns identical floats.

    Worker 0 accumulates in worker order and broadcasts the result -- the one
    scalar collective of the protocol (restart/stop coordination).
    """
    if n_workers == 1:
        return values
    if wid == 0:
        total = values.astype(np.float64, copy=True)
        expected = {(w, "reduce"): None for w in range(1, n_workers)}
        got = mailbox.collect(expected, iteration)
        for w in range(1, n_workers):
            total += got[(w, "reduce")].values
        for w in range(1, n_workers):
            transport.send(ControlMessage(0, w, iteration, "broadcast", total))
        return total
    transport.send(ControlMessage(wid, 0, iteration, "reduce", values))
    got = mailbox.collect({(0, "broadcast"): None}, iteration)
    return got[(0, "broadcast")].values


_FINAL_TAG = 0xFFFFFFFF


def _worker_loop(wid, parts, total_slices, sino_slab, plan, psf, params, cfg, L,
                 transport, f0_slab, out, record_sink, snapshot_sink):
    part = parts[wid]
    n_workers = len(parts)
    stencil = stencil_for(np.empty((total_slices, 1, 1)))
    lam = params.lam
    mailbox = _Mailbox(transport, wid)
    n = plan.grid_side

    rstar = _slab_adjoint(plan, sino_slab)
    g_sq_local = float(np.sum(sino_slab**2))

    def local_parts(x, halo_hi):
        kx = _apply_batch(psf, x)
        fid = float(0.5 * np.sum(x * kx) - np.sum(x * rstar) + 0.5 * g_sq_local)
        prior = (prior_energy(params, stencil, x, halo_hi=halo_hi)
                 if lam != 0.0 else 0.0)
        return fid, prior

    f = f0_slab.copy()
    _send_boundary_planes(part, f, 0, transport)
    f_lo, f_hi = _recv_halos(part, mailbox, 0)
    fid_loc, prior_loc = local_parts(f, f_hi)
    reduced = _allreduce(np.array([fid_loc, prior_loc, 0.0]), wid, n_workers, 0,
                         transport, mailbox)
    obj = reduced[0] + lam * reduced[1]
    fid, prior = reduced[0], reduced[1]
    if not np.isfinite(obj):
        raise FloatingPointError("objective is non-finite at the initial point")

    y, y_lo, y_hi = f, f_lo, f_hi
    t = 1.0

    def send_snapshot(k, slab):
        if wid == 0:
            full = np.empty((total_slices, n, n))
            full[part.begin:part.end] = slab
            expected = {(w, "snapshot"): None for w in range(1, n_workers)}
            got = mailbox.collect(expected, k)
            for w in range(1, n_workers):
                p = parts[w]
                full[p.begin:p.end] = got[(w, "snapshot")].values.reshape(p.size, n, n)
            snapshot_sink(k, full)
        else:
            transport.send(ControlMessage(wid, 0, k, "snapshot", slab.ravel()))

    for k in range(1, cfg.max_iters + 1):
        tic = time.perf_counter()
        grad = _apply_batch(psf, y) - rstar
        if lam != 0.0:
            grad += lam * prior_grad(params, stencil, y, halo_lo=y_lo, halo_hi=y_hi)
        grad_sq_loc = float(np.sum(grad * grad))
        f_new = y - grad / L
        if cfg.nonneg:
            np.maximum(f_new, 0.0, out=f_new)
        _send_boundary_planes(part, f_new, k, transport)
        fn_lo, fn_hi = _recv_halos(part, mailbox, k)
        fid_loc, prior_loc = local_parts(f_new, fn_hi)
        reduced = _allreduce(np.array([fid_loc, prior_loc, grad_sq_loc]), wid,
                             n_workers, k, transport, mailbox)
        obj_new = reduced[0] + lam * reduced[1]
        if not np.isfinite(obj_new):
            raise FloatingPointError(f"objective became non-finite at iteration {k}")
        if wid == 0 and k == 1 and record_sink is not None:
            record_sink(IterationRecord(0, obj, fid, prior, float(np.sqrt(reduced[2])), 0.0, False))
        restarted = bool(cfg.restart and obj_new > obj)
        if restarted:
            t_next = 1.0
            y, y_lo, y_hi = f_new, fn_lo, fn_hi
        else:
            t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
            c = (t - 1.0) / t_next
            y = f_new + c * (f_new - f)
            y_lo = None if fn_lo is None else fn_lo + c * (fn_lo - f_lo)
            y_hi = None if fn_hi is None else fn_hi + c * (fn_hi - f_hi)
        if wid == 0 and record_sink is not None:
            record_sink(IterationRecord(k, float(obj_new), float(reduced[0]),
                                        float(reduced[1]), float(np.sqrt(reduced[2])),
                                        time.perf_counter() - tic, restarted))
        if snapshot_sink is not None:
            send_snapshot(k, f_new)
        converged = (not restarted) and abs(obj_new - obj) <= cfg.tol * abs(obj)
        f, f_lo, f_hi, t = f_new, fn_lo, fn_hi, t_next
        obj, fid, prior = float(obj_new), float(reduced[0]), float(reduced[1])
        if converged:
            break

    # final gather to worker 0
    if wid == 0:
        out[part.begin:part.end] = f
        expected = {(w, "gather"): None for w in range(1, n_workers)}
        got = mailbox.collect(expected, _FINAL_TAG)
        for w in range(1, n_workers):
            p = parts[w]
            out[p.begin:p.end] = got[(w, "gather")].values.reshape(p.size, n, n)
    else:
        transport.send(ControlMessage(wid, 0, _FINAL_TAG, "gather", f.ravel()))


def distributed_solve(sino: Sinogram, image_side: int, params, cfg: SolverConfig,
                      n_workers: int, *, f0: Volume | None = None, transport=None,
                      nufft_tolerance: float = 1e-6, oversampling: float = 2.0,
                      on_record=None, snapshot_sink=None):
    """Slab-parallel reconstruction; algebraically identical to the
    single-worker solve (per-iteration states match to reduction roundoff).

    Returns ``(Volume, records)``.  ``snapshot_sink`` receives the assembled
    ``(iteration, volume_array)`` after every iteration when provided.
    """
    if n_workers < 1:
        raise ValueError("need at least one worker")
    if n_workers > sino.slices:
        raise ValueError("more workers than slices")
    geom = ScanGeometry(angles=sino.angles, detector_bins=sino.detector_bins,
                        image_side=image_side)
    sampling = polar_sampling(geom)
    plan = NufftPlan(image_side, sampling, nufft_tolerance, oversampling)
    psf = build_psf(sampling, image_side, nufft_tolerance, oversampling)
    L = cfg.lipschitz if cfg.lipschitz is not None else estimate_lipschitz(psf, params)
    cfg = SolverConfig(max_iters=cfg.max_iters, tol=cfg.tol, lipschitz=L,
                       restart=cfg.restart, log_every=cfg.log_every, nonneg=cfg.nonneg)
    if f0 is None:
        f0 = Volume(np.zeros((sino.slices, image_side, image_side)))
    if f0.slices != sino.slices or f0.side != image_side:
        raise ValueError("initial volume does not match the requested reconstruction")

    if n_workers == 1:
        ctx = fidelity_context(plan, psf, sino)
        sink = (lambda k, arr: snapshot_sink(k, arr)) if snapshot_sink else None
        vol, records = solve(ctx, params, cfg, f0, on_record=on_record,
                             snapshot_sink=sink)
        return vol, records

    parts = partition(sino.slices, n_workers)
    transport = transport or InProcessTransport(n_workers)
    out = np.empty((sino.slices, image_side, image_side))
    records: list[IterationRecord] = []

    def record_sink(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    errors = []

    def run(widx):
        part = parts[widx]
        try:
            _worker_loop(
                widx, parts, sino.slices, sino.data[part.begin:part.end], plan, psf,
                params, cfg, L, transport,
                f0.data[part.begin:part.end], out,
                record_sink if widx == 0 else None,
                snapshot_sink,
            )
        except Exception as exc:  # noqa: BLE001 - propagated to the driver below
            errors.append((widx, exc))

    threads = [threading.Thread(target=run, args=(p.worker_id,), daemon=True,
                                name=f"slab-worker-{p.worker_id}")
               for p in parts]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        widx, exc = errors[0]
        raise RuntimeError(f"worker {widx} failed: {exc}") from exc
    return Volume(out), records
