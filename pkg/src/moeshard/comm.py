"""Simulated multi-device fabric and the token-exchange collectives.

Device programs are generators. Each collective step is a ``yield`` of an
:class:`AllToAll` request carrying one payload per destination rank; the
scheduler resumes the generator with the list of payloads addressed to it,
indexed by source rank. Every exchange is a barrier: no device proceeds to
the next step before all devices have posted the current one.

Two schedulers drive the same programs:

* :class:`SequentialScheduler` steps all devices round by round in one
  thread (handy under a debugger);
* :class:`ThreadedScheduler` runs one worker thread per device, talking over
  blocking per-pair queues plus a ``threading.Barrier``.

Payloads are delivered as read-only arrays and are never copied, so both
schedulers see identical data regardless of timing.
"""

from __future__ import annotations

import queue
import threading
from collections.abc import Callable, Generator, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import BoundsError, ConfigError, ProtocolError, ShapeError
from .tensor import Matrix, concat_rows

METADATA_BYTES_PER_COUNT = 8


@dataclass(frozen=True)
class ClusterConfig:
    num_devices: int
    bytes_per_element: int = 4

    def __post_init__(self):
        if self.num_devices < 1:
            raise ConfigError(f"num_devices must be >= 1, got {self.num_devices}")
        if self.bytes_per_element < 1:
            raise ConfigError("bytes_per_element must be positive")


# -- bucketing --------------------------------------------------------------


@dataclass(frozen=True)
class ExpertBuckets:
    """Tokens grouped by expert (stable), with the inverse permutation."""

    buckets: list[Matrix]
    original_index: np.ndarray

    @property
    def sizes(self) -> np.ndarray:
        return np.array([b.shape[0] for b in self.buckets], dtype=np.int64)

    @property
    def num_tokens(self) -> int:
        return len(self.original_index)

    def concatenated(self) -> Matrix:
        return concat_rows(self.buckets)

    def permute(self, values: np.ndarray) -> np.ndarray:
        """Reorder a per-token vector into bucket order."""
        return np.asarray(values)[self.original_index]

    def ungroup(self, rows: Matrix) -> Matrix:
        """Put bucket-ordered ``rows`` back into input-token order."""
        if rows.shape[0] != self.num_tokens:
            raise ShapeError(f"{rows.shape[0]} rows for {self.num_tokens} tokens")
        out = np.empty_like(rows)
        out[self.original_index] = rows
        return out


def count_per_expert(m_expert: np.ndarray, num_experts: int) -> np.ndarray:
    m_expert = np.asarray(m_expert, dtype=np.int64)
    if len(m_expert) and (m_expert.min() < 0 or m_expert.max() >= num_experts):
        raise BoundsError(f"expert index outside [0, {num_experts})")
    return np.bincount(m_expert, minlength=num_experts).astype(np.int64)


def group_per_expert(x: Matrix, m_expert: np.ndarray, num_experts: int) -> ExpertBuckets:
    m_expert = np.asarray(m_expert, dtype=np.int64)
    if len(m_expert) != x.shape[0]:
        raise ShapeError(f"{len(m_expert)} routing entries for {x.shape[0]} tokens")
    sizes = count_per_expert(m_expert, num_experts)
    order = np.argsort(m_expert, kind="stable")
    grouped = x[order]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    buckets = [grouped[bounds[e] : bounds[e + 1]] for e in range(num_experts)]
    return ExpertBuckets(buckets, order)


# -- inbox tables -------------------------------------------------------------


class InboxTable:
    """``W[g][e]``: rows received from source device ``g`` for expert ``e``."""

    def __init__(self, W: list[list[Matrix]]):
        self.W = W

    @property
    def num_sources(self) -> int:
        return len(self.W)

    @property
    def num_experts(self) -> int:
        return len(self.W[0]) if self.W else 0

    def sizes(self) -> np.ndarray:
        return np.array([[m.shape[0] for m in row] for row in self.W], dtype=np.int64)

    def __getitem__(self, g: int) -> list[Matrix]:
        return self.W[g]

    def pack(self, g: int) -> Matrix:
        """Rows for source ``g`` concatenated in expert order."""
        return concat_rows(self.W[g])


def split_by_sizes(flat: Matrix, sizes: Sequence[int]) -> list[Matrix]:
    sizes = [int(s) for s in sizes]
    if flat.shape[0] != sum(sizes):
        raise ProtocolError(
            f"received {flat.shape[0]} rows but metadata announced {sum(sizes)}"
        )
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    return [flat[bounds[i] : bounds[i + 1]] for i in range(len(sizes))]


def unpack_inbox(received: Sequence[Matrix], size_table: np.ndarray) -> InboxTable:
    """Split each source's flat tensor into per-expert blocks using counts."""
    size_table = np.asarray(size_table)
    if len(received) != size_table.shape[0]:
        raise ProtocolError(f"{len(received)} payloads for {size_table.shape[0]} sources")
    return InboxTable([split_by_sizes(flat, size_table[g]) for g, flat in enumerate(received)])


# -- global-view collectives ---------------------------------------------------
#
# Each takes the per-device inputs of all devices at once and returns what
# every device holds afterwards. The engines' device programs perform the same
# steps through a scheduler.


def exchange_metadata(all_senders: Sequence[np.ndarray]) -> list[np.ndarray]:
    if not all_senders:
        raise ProtocolError("metadata exchange with no contributions")
    widths = {len(s) for s in all_senders}
    if len(widths) != 1:
        raise ProtocolError(f"size vectors of different lengths: {sorted(widths)}")
    table = np.array([np.asarray(s, dtype=np.int64) for s in all_senders])
    return [table.copy() for _ in all_senders]


def metadata_bytes(num_experts: int, num_devices: int) -> int:
    """Bytes one device sends during the metadata exchange (peers only)."""
    return (num_devices - 1) * num_experts * METADATA_BYTES_PER_COUNT


def scatter_tokens(all_buckets: Sequence[ExpertBuckets], size_table: np.ndarray) -> list[InboxTable]:
    """Replicate every device's concatenated buckets to all devices."""
    flats = [b.concatenated() for b in all_buckets]
    return [unpack_inbox(flats, size_table) for _ in all_buckets]


def scatter_bytes(n_tokens: int, h: int, num_devices: int, bytes_per_element: int = 4) -> int:
    """Bytes one device sends during the scatter: one full copy per peer."""
    return (num_devices - 1) * n_tokens * h * bytes_per_element


def gather_partials(processed: Sequence[InboxTable]) -> list[list[Matrix]]:
    """Return ``y[g][p]``: rows of device ``g`` as computed by device ``p``.

    Each block keeps the expert-order layout in which ``g`` sent its tokens.
    """
    n = len(processed)
    for p, table in enumerate(processed):
        if table.num_sources != n:
            raise ProtocolError(f"device {p} holds {table.num_sources} sources, expected {n}")
    return [[processed[p].pack(g) for p in range(n)] for g in range(n)]


# -- schedulers ---------------------------------------------------------------


@dataclass(frozen=True)
class AllToAll:
    """A collective step: ``payloads[dst]`` goes to device ``dst``."""

    phase: str
    payloads: Sequence[Any]


DeviceProgram = Generator[AllToAll, list, Any]


def _freeze(payload):
    if isinstance(payload, np.ndarray):
        view = payload.view()
        view.flags.writeable = False
        return view
    return payload


def _check_request(req, rank: int, n: int) -> AllToAll:
    if not isinstance(req, AllToAll):
        raise ProtocolError(f"device {rank} yielded {type(req).__name__}, not AllToAll")
    if len(req.payloads) != n:
        raise ProtocolError(
            f"device {rank} posted {len(req.payloads)} payloads for {n} devices in {req.phase!r}"
        )
    return req


class SequentialScheduler:
    name = "sequential"

    def run(self, programs: Sequence[DeviceProgram]) -> list:
        n = len(programs)
        results: list = [None] * n
        inbox: list | None = None
        while True:
            requests, done = [], []
            for rank, prog in enumerate(programs):
                try:
                    req = prog.send(None if inbox is None else inbox[rank])
                except StopIteration as stop:
                    results[rank] = stop.value
                    done.append(rank)
                else:
                    requests.append(_check_request(req, rank, n))
            if len(done) == n:
                return results
            if done:
                raise ProtocolError(f"devices {done} finished while others are still exchanging")
            phases = {r.phase for r in requests}
            if len(phases) != 1:
                raise ProtocolError(f"devices disagree on the collective step: {sorted(phases)}")
            inbox = [[_freeze(requests[src].payloads[dst]) for src in range(n)] for dst in range(n)]


class _Abort(Exception):
    pass


_DONE = object()


class ThreadedScheduler:
    """One thread per device; blocking point-to-point queues and a barrier."""

    name = "threaded"

    def __init__(self, timeout: float = 60.0, poll: float = 0.05):
        self.timeout = timeout
        self.poll = poll

    def run(self, programs: Sequence[DeviceProgram]) -> list:
        n = len(programs)
        queues = [[queue.SimpleQueue() for _ in range(n)] for _ in range(n)]
        barrier = threading.Barrier(n, timeout=self.timeout)
        aborted = threading.Event()
        results: list = [None] * n
        errors: list[BaseException | None] = [None] * n

        def receive(src: int, dst: int):
            waited = 0.0
            while True:
                try:
                    return queues[src][dst].get(timeout=self.poll)
                except queue.Empty:
                    if aborted.is_set():
                        raise _Abort
                    waited += self.poll
                    if waited > self.timeout:
                        raise ProtocolError(f"device {dst} timed out waiting for device {src}")

        def worker(rank: int):
            prog = programs[rank]
            reply = None
            try:
                while True:
                    try:
                        req = _check_request(prog.send(reply), rank, n)
                    except StopIteration as stop:
                        results[rank] = stop.value
                        for dst in range(n):
                            queues[rank][dst].put(_DONE)
                        barrier.wait()
                        return
                    for dst in range(n):
                        queues[rank][dst].put((req.phase, _freeze(req.payloads[dst])))
                    reply = []
                    for src in range(n):
                        msg = receive(src, rank)
                        if msg is _DONE:
                            raise ProtocolError(f"device {src} finished before step {req.phase!r}")
                        phase, payload = msg
                        if phase != req.phase:
                            raise ProtocolError(
                                f"device {rank} in {req.phase!r} got a {phase!r} message from {src}"
                            )
                        reply.append(payload)
                    barrier.wait()
            except (_Abort, threading.BrokenBarrierError):
                pass
            except BaseException as exc:  # re-raised in the caller's thread
                errors[rank] = exc
                aborted.set()
                barrier.abort()

        threads = [
            threading.Thread(target=worker, args=(r,), name=f"device-{r}", daemon=True)
            for r in range(n)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for exc in errors:
            if exc is not None:
                raise exc
        if aborted.is_set() or any(t.is_alive() for t in threads):
            raise ProtocolError("device workers aborted")
        return results


Scheduler = SequentialScheduler | ThreadedScheduler

_SCHEDULERS: dict[str, Callable[[], Scheduler]] = {
    "sequential": SequentialScheduler,
    "threaded": ThreadedScheduler,
}


def get_scheduler(scheduler: str | Scheduler | None) -> Scheduler:
    if scheduler is None:
        return SequentialScheduler()
    if isinstance(scheduler, str):
        try:
            return _SCHEDULERS[scheduler]()
        except KeyError:
            raise ConfigError(
                f"unknown scheduler {scheduler!r}; choose from {sorted(_SCHEDULERS)}"
            ) from None
    return scheduler
