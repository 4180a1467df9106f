"""X-direction rank decomposition with halo exchange over pluggable transports.

Ranks form a periodic ring along X.  Each rank owns a contiguous column range
and a HeteroRuntime; the outermost H columns on each side are halos holding
copies of the neighbors' edge columns.  Message payloads are the canonical
(p-major, then x, then y) serialization of H columns as little-endian float64,
framed as (tag u32, length u64, payload); they are always sourced from
host-resident buffers.

Two transports ship: in-process queues (tests, single-process runs) and TCP
sockets (multi-process capable, rendezvous via a host:port list).
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CommunicationFault, ConfigurationError
from .layouts import FieldBuffer

_HEADER = struct.Struct("<IQ")

TAG_TO_RIGHT = 1  # payload travels rank -> right neighbor
TAG_TO_LEFT = 2   # payload travels rank -> left neighbor


@dataclass(frozen=True)
class RankLayout:
    """One rank's slice of the global lattice (periodic ring in X)."""

    n_ranks: int
    rank: int
    x0: int
    width: int

    @property
    def left(self) -> int:
        return (self.rank - 1) % self.n_ranks

    @property
    def right(self) -> int:
        return (self.rank + 1) % self.n_ranks


def decompose_x(lx_global: int, n_ranks: int, halo: int = 3) -> list[RankLayout]:
    """Near-even contiguous slices; remainder columns go to the lowest ranks."""
    if n_ranks < 1:
        raise ConfigurationError("need at least one rank")
    base, rem = divmod(lx_global, n_ranks)
    if base < 2 * halo:
        raise ConfigurationError(
            f"slices of {base} columns are thinner than 2H={2 * halo}")
    layouts = []
    x0 = 0
    for rank in range(n_ranks):
        width = base + (1 if rank < rem else 0)
        layouts.append(RankLayout(n_ranks, rank, x0, width))
        x0 += width
    return layouts


# -- transports --------------------------------------------------------------

class Transport:
    """Point-to-point ordered messaging between ranks, with byte counters."""

    def __init__(self, rank: int):
        self.rank = rank
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, peer: int, tag: int, payload: bytes) -> None:
        raise NotImplementedError

    def recv(self, peer: int, tag: int) -> bytes:
        raise NotImplementedError

    def reset_counters(self) -> None:
        """Zero the byte counters (called once setup traffic is done, so the
        reported totals cover only the timed iterations)."""
        self.bytes_sent = 0
        self.bytes_received = 0

    def close(self) -> None:
        pass


class InMemoryFabric:
    """Queue-backed fabric connecting n ranks inside one process."""

    def __init__(self, n_ranks: int):
        self.n_ranks = n_ranks
        self._queues = {
            (src, dst): queue.Queue()
            for src in range(n_ranks) for dst in range(n_ranks) if src != dst
        }

    def transport(self, rank: int) -> "InMemoryTransport":
        return InMemoryTransport(rank, self)


class InMemoryTransport(Transport):
    def __init__(self, rank: int, fabric: InMemoryFabric):
        super().__init__(rank)
        self.fabric = fabric

    def send(self, peer: int, tag: int, payload: bytes) -> None:
        self.fabric._queues[(self.rank, peer)].put((tag, payload))
        self.bytes_sent += len(payload)

    def recv(self, peer: int, tag: int, timeout: float = 30.0) -> bytes:
        try:
            got_tag, payload = self.fabric._queues[(peer, self.rank)].get(
                timeout=timeout)
        except queue.Empty:
            raise CommunicationFault(
                f"rank {self.rank}: timeout waiting for rank {peer}") from None
        if got_tag != tag:
            raise CommunicationFault(
                f"rank {self.rank}: tag mismatch from rank {peer} "
                f"(expected {tag}, got {got_tag})")
        self.bytes_received += len(payload)
        return payload


class TcpTransport(Transport):
    """One socket per unordered rank pair, rendezvous via an endpoint list."""

    def __init__(self, rank: int, endpoints: list[str], peers: set[int],
                 connect_timeout: float = 15.0):
        super().__init__(rank)
        self.endpoints = endpoints
        self._socks: dict[int, socket.socket] = {}
        self._lock = threading.Lock()
        host, port = self._parse(endpoints[rank])
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        higher = sorted(p for p in peers if p > rank)
        lower = sorted(p for p in peers if p < rank)
        listener.listen(len(higher) + 1)
        # lower-numbered ranks accept, higher-numbered ranks dial
        accepted = 0
        for peer in lower:
            self._socks[peer] = self._dial(self.endpoints[peer],
                                           connect_timeout)
        while accepted < len(higher):
            conn, _addr = listener.accept()
            peer = struct.unpack("<I", _recv_exact(conn, 4, self.rank, -1))[0]
            self._socks[peer] = conn
            accepted += 1
        listener.close()

    @staticmethod
    def _parse(endpoint: str) -> tuple[str, int]:
        host, _, port = endpoint.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigurationError(f"bad endpoint {endpoint!r}")
        return host, int(port)

    def _dial(self, endpoint: str, timeout: float) -> socket.socket:
        host, port = self._parse(endpoint)
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=2.0)
                sock.sendall(struct.pack("<I", self.rank))
                return sock
            except OSError:
                if time.monotonic() > deadline:
                    raise CommunicationFault(
                        f"rank {self.rank}: cannot reach {endpoint}") from None
                time.sleep(0.05)

    def send(self, peer: int, tag: int, payload: bytes) -> None:
        sock = self._socks[peer]
        sock.sendall(_HEADER.pack(tag, len(payload)) + payload)
        self.bytes_sent += len(payload)

    def recv(self, peer: int, tag: int) -> bytes:
        sock = self._socks[peer]
        header = _recv_exact(sock, _HEADER.size, self.rank, peer)
        got_tag, length = _HEADER.unpack(header)
        if length > 1 << 32:
            raise CommunicationFault(
                f"rank {self.rank}: corrupt frame length {length} from {peer}")
        payload = _recv_exact(sock, length, self.rank, peer)
        if got_tag != tag:
            raise CommunicationFault(
                f"rank {self.rank}: tag mismatch from rank {peer} "
                f"(expected {tag}, got {got_tag})")
        self.bytes_received += len(payload)
        return payload

    def close(self) -> None:
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass


def _recv_exact(sock: socket.socket, count: int, rank: int, peer: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise CommunicationFault(
                f"rank {rank}: short read from rank {peer} "
                f"({count - remaining}/{count} bytes)")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


# -- halo exchange -----------------------------------------------------------

def _pack_columns(buf: FieldBuffer, x0: int, width: int) -> bytes:
    cube = buf.cube()
    return buf.prv[cube[:, x0:x0 + width, :]].astype("<f8").tobytes()


def _unpack_columns(buf: FieldBuffer, x0: int, width: int, payload: bytes) -> None:
    expected = buf.nq * width * buf.geom.ly * 8
    if len(payload) != expected:
        raise CommunicationFault(
            f"halo payload of {len(payload)} bytes, expected {expected}")
    cube = buf.cube()
    values = np.frombuffer(payload, dtype="<f8").reshape(
        buf.nq, width, buf.geom.ly)
    buf.prv[cube[:, x0:x0 + width, :]] = values


def exchange_rank_halos(buf: FieldBuffer, layout: RankLayout,
                        transport: Transport) -> None:
    """Fill the outer H halo columns with both neighbors' edge columns.

    Single-rank layouts degrade to the periodic X wrap.  With multiple ranks,
    even ranks send first and odd ranks receive first, which pairs up the
    blocking calls on a synchronous transport (ring ordering; for odd ring
    sizes the one even-even link relies on transport buffering).
    """
    g = buf.geom
    h = g.halo
    if h == 0:
        return
    if layout.n_ranks == 1:
        from .kernels import update_x_halos_periodic
        update_x_halos_periodic(buf, "prv")
        return
    left_edge = _pack_columns(buf, h, h)            # interior left edge
    right_edge = _pack_columns(buf, g.lx, h)        # interior right edge

    def send_right():
        transport.send(layout.right, TAG_TO_RIGHT, right_edge)

    def send_left():
        transport.send(layout.left, TAG_TO_LEFT, left_edge)

    def recv_left():
        _unpack_columns(buf, 0, h,
                        transport.recv(layout.left, TAG_TO_RIGHT))

    def recv_right():
        _unpack_columns(buf, h + g.lx, h,
                        transport.recv(layout.right, TAG_TO_LEFT))

    if layout.rank % 2 == 0:
        send_right(); send_left(); recv_left(); recv_right()
    else:
        recv_left(); recv_right(); send_right(); send_left()


# -- multi-rank driver -------------------------------------------------------

@dataclass
class RankResult:
    layout: RankLayout
    final: np.ndarray
    iteration_times: list[float] = field(default_factory=list)
    bytes_sent: int = 0
    bytes_received: int = 0
    dumps: list[tuple[int, np.ndarray]] = field(default_factory=list)


def _rank_body(cfg, layout: RankLayout, transport: Transport,
               initial_slice: np.ndarray, result_slot: list,
               start_barrier: threading.Barrier) -> None:
    from .hetero import make_partition, runtime_from_config

    local_cfg_geom_lx = layout.width
    import copy
    local_cfg = copy.copy(cfg)
    local_cfg.lx = local_cfg_geom_lx

    def exchanger(buf: FieldBuffer) -> None:
        exchange_rank_halos(buf, layout, transport)

    try:
        with runtime_from_config(local_cfg, rank_exchange=exchanger) as rt:
            start_barrier.wait(timeout=60)
            rt.load_state(initial_slice)
            plan = make_partition(rt.geom, local_cfg.m)
            transport.reset_counters()
            res = RankResult(layout=layout, final=None)
            if cfg.dump_every > 0:
                res.dumps.append((0, rt.state(plan)))
            for it in range(cfg.iterations):
                timing = rt.run_timestep(plan)
                res.iteration_times.append(timing.t_exe)
                if cfg.dump_every > 0 and (it + 1) % cfg.dump_every == 0:
                    res.dumps.append((it + 1, rt.state(plan)))
            res.final = rt.state(plan)
            res.bytes_sent = transport.bytes_sent
            res.bytes_received = transport.bytes_received
            result_slot[0] = res
    except BaseException as exc:  # surfaced by run_distributed with rank id
        result_slot[0] = exc
    finally:
        transport.close()


def run_distributed(cfg, n_ranks: int, transport_kind: str = "in_memory",
                    endpoints: list[str] | None = None,
                    initial_state: np.ndarray | None = None):
    """Run the configured simulation on n ranks and merge the results.

    Ranks execute as threads in this process; the TCP transport still moves
    every halo byte through real sockets, so the wire path matches a
    multi-process deployment.  Returns (BenchReport, merged canonical state,
    list of RankResult).
    """
    import statistics

    from .hetero import random_state
    from .model import builtin_model
    from .perf_model import mlups
    from .report import BenchReport

    model = builtin_model(cfg.model_name)
    layouts = decompose_x(cfg.lx, n_ranks, halo=3)
    if initial_state is None:
        initial_state = random_state(model, cfg.lx, cfg.ly, cfg.seed)

    if transport_kind == "in_memory":
        fabric = InMemoryFabric(n_ranks)
        transports = [fabric.transport(r) for r in range(n_ranks)]
    elif transport_kind == "tcp":
        if endpoints is None:
            endpoints = cfg.endpoints or _local_endpoints(n_ranks)
        if len(endpoints) != n_ranks:
            raise ConfigurationError(
                f"need {n_ranks} endpoints, got {len(endpoints)}")
        transports = _tcp_rendezvous(layouts, endpoints)
    else:
        raise ConfigurationError(f"unknown transport {transport_kind!r}")

    barrier = threading.Barrier(n_ranks)
    slots: list[list] = [[None] for _ in range(n_ranks)]
    threads = []
    for lay, transport, slot in zip(layouts, transports, slots):
        sl = initial_state[:, lay.x0:lay.x0 + lay.width, :].copy()
        th = threading.Thread(target=_rank_body,
                              args=(cfg, lay, transport, sl, slot, barrier),
                              name=f"lbhx-rank{lay.rank}")
        th.start()
        threads.append(th)
    for th in threads:
        th.join()

    results: list[RankResult] = []
    for rank, slot in enumerate(slots):
        if isinstance(slot[0], BaseException):
            raise CommunicationFault(
                f"rank {rank} failed during the run") from slot[0]
        results.append(slot[0])

    merged = np.concatenate([r.final for r in results], axis=1)
    report = BenchReport("distributed", metadata={
        "n_ranks": str(n_ranks), "transport": transport_kind,
        "lx": str(cfg.lx), "ly": str(cfg.ly), "model": model.name,
    })
    if cfg.iterations > 0:
        per_iter = [max(r.iteration_times[i] for r in results)
                    for i in range(cfg.iterations)]
        median_t = statistics.median(per_iter)
        report.metadata["median_t_exe"] = repr(median_t)
        report.metadata["mlups"] = repr(mlups(cfg.lx, cfg.ly, median_t))
    for r in results:
        report.add_row(rank=r.layout.rank, x0=r.layout.x0,
                       width=r.layout.width,
                       bytes_sent=r.bytes_sent,
                       bytes_received=r.bytes_received,
                       median_t_exe=(statistics.median(r.iteration_times)
                                     if r.iteration_times else 0.0))
    return report, merged, results


def _local_endpoints(n_ranks: int) -> list[str]:
    """Pick n free loopback ports."""
    endpoints = []
    socks = []
    for _ in range(n_ranks):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        endpoints.append(f"127.0.0.1:{s.getsockname()[1]}")
        socks.append(s)
    for s in socks:
        s.close()
    return endpoints


def _tcp_rendezvous(layouts: list[RankLayout],
                    endpoints: list[str]) -> list[TcpTransport]:
    """Build all rank transports concurrently (they block on each other)."""
    transports: list = [None] * len(layouts)
    errors: list = []

    def build(lay: RankLayout):
        try:
            peers = {lay.left, lay.right} - {lay.rank}
            transports[lay.rank] = TcpTransport(lay.rank, endpoints, peers)
        except Exception as exc:
            errors.append((lay.rank, exc))

    threads = [threading.Thread(target=build, args=(lay,)) for lay in layouts]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        rank, exc = errors[0]
        raise CommunicationFault(f"rank {rank} rendezvous failed") from exc
    return transports
