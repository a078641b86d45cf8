"""Rank-addressed message passing with non-blocking sends and collectives.

Two backends share one envelope-matching core: an in-process backend where
each rank is a thread with a lock-protected inbox, and a TCP backend with one
full-duplex connection per rank pair (dialed by the lower rank) using
length-prefixed frames: a 4-byte big-endian total length, a 16-byte header of
four big-endian int32 fields (source, dest, tag, payload length), then the
payload.

Collectives reduce in ascending rank order on rank 0 and broadcast the result,
so every rank sees bit-identical values on every backend, every run.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import ClosedEndpoint, PeerUnreachable, Timeout

ANY = None

# Tags at or above this value are reserved for collectives.
COLLECTIVE_TAG_BASE = 1 << 30
_COLLECTIVE_SEQ_MOD = 1 << 16
_HELLO_TAG = -1

_HEADER = struct.Struct(">iiii")
_LENGTH = struct.Struct(">I")


@dataclass(frozen=True)
class Envelope:
    """One delivered message."""

    source: int
    dest: int
    tag: int
    payload: bytes


class SendHandle:
    """Completion token for a non-blocking send.

    The payload buffer may be reused once wait() returns (both backends copy
    or hand off the bytes before completing).
    """

    def __init__(self, completed: bool = False):
        self._event = threading.Event()
        if completed:
            self._event.set()

    def mark_done(self) -> None:
        self._event.set()

    def done(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        ok = self._event.wait(timeout)
        if not ok:
            raise Timeout("send did not complete in time")
        return True


class _Inbox:
    """Arrival-ordered envelope buffer with (source, tag) matching."""

    def __init__(self):
        self._pending: list[Envelope] = []
        self._cond = threading.Condition()
        self._closed = False

    def put(self, env: Envelope) -> None:
        with self._cond:
            self._pending.append(env)
            self._cond.notify_all()

    def get(self, source, tag, timeout: float | None) -> Envelope:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                for i, env in enumerate(self._pending):
                    if source is not ANY and env.source != source:
                        continue
                    if tag is not ANY and env.tag != tag:
                        continue
                    return self._pending.pop(i)
                if self._closed:
                    raise ClosedEndpoint("endpoint closed while receiving")
                if deadline is None:
                    self._cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0 or not self._cond.wait(remaining):
                        raise Timeout(
                            f"no message from source={source} tag={tag} "
                            f"within {timeout}s"
                        )

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class Endpoint:
    """Shared endpoint behavior: validation, matching, collectives."""

    def __init__(self, rank: int, size: int, default_timeout: float | None = None):
        self.rank = int(rank)
        self.size = int(size)
        self.default_timeout = default_timeout
        self._inbox = _Inbox()
        self._coll_seq = 0
        self._closed = False

    # -- point to point ------------------------------------------------------

    def send_nonblocking(self, dest: int, tag: int, payload) -> SendHandle:
        """Queue payload for delivery and return immediately.

        Delivery is exactly-once and FIFO per (source, dest, tag).
        """
        if self._closed:
            raise ClosedEndpoint("send on closed endpoint")
        if dest == self.rank:
            raise ValueError("cannot send to self")
        if not 0 <= dest < self.size:
            raise ValueError(f"dest {dest} outside [0, {self.size})")
        if tag >= COLLECTIVE_TAG_BASE:
            raise ValueError(f"tags >= {COLLECTIVE_TAG_BASE} are reserved")
        return self._send_impl(dest, int(tag), bytes(payload))

    def receive(self, source=ANY, tag=ANY, timeout=...) -> Envelope:
        """Block until a matching envelope arrives and return it."""
        if self._closed:
            raise ClosedEndpoint("receive on closed endpoint")
        if timeout is ...:
            timeout = self.default_timeout
        return self._inbox.get(source, tag, timeout)

    def _send_impl(self, dest: int, tag: int, payload: bytes) -> SendHandle:
        raise NotImplementedError

    # -- collectives ---------------------------------------------------------
    # All ranks must call these in the same order. Rank 0 folds contributions
    # in ascending rank order and broadcasts, which makes results bit-exact
    # and backend-independent.

    def _next_coll_tag(self) -> int:
        tag = COLLECTIVE_TAG_BASE + (self._coll_seq % _COLLECTIVE_SEQ_MOD)
        self._coll_seq += 1
        return tag

    def _coll_send(self, dest: int, tag: int, payload: bytes) -> SendHandle:
        if self._closed:
            raise ClosedEndpoint("collective on closed endpoint")
        return self._send_impl(dest, tag, payload)

    def _gather_fold(self, vec: np.ndarray, fold) -> np.ndarray:
        tag = self._next_coll_tag()
        vec = np.ascontiguousarray(vec, dtype=np.float64)
        if self.size == 1:
            return fold([vec])
        if self.rank == 0:
            parts = [vec]
            for src in range(1, self.size):
                env = self.receive(source=src, tag=tag)
                parts.append(np.frombuffer(env.payload, dtype=np.float64))
            result = fold(parts)
            blob = result.tobytes()
            handles = [
                self._coll_send(dst, tag, blob) for dst in range(1, self.size)
            ]
            for h in handles:
                h.wait()
            return result
        self._coll_send(0, tag, vec.tobytes())
        env = self.receive(source=0, tag=tag)
        return np.frombuffer(env.payload, dtype=np.float64).copy()

    def allreduce_sum(self, vec) -> np.ndarray:
        """Element-wise sum over all ranks (rank-ascending fold)."""

        def fold(parts):
            acc = parts[0].copy()
            for p in parts[1:]:
                acc = acc + p
            return acc

        return self._gather_fold(np.atleast_1d(np.asarray(vec, dtype=np.float64)), fold)

    def allreduce_max(self, vec) -> np.ndarray:
        """Element-wise max over all ranks."""

        def fold(parts):
            acc = parts[0].copy()
            for p in parts[1:]:
                acc = np.maximum(acc, p)
            return acc

        return self._gather_fold(np.atleast_1d(np.asarray(vec, dtype=np.float64)), fold)

    def allgather(self, vec) -> np.ndarray:
        """Every rank's contribution, stacked in rank order: shape (P, len)."""
        v = np.atleast_1d(np.asarray(vec, dtype=np.float64))
        n = len(v)

        def fold(parts):
            return np.concatenate(parts)

        flat = self._gather_fold(v, fold)
        return flat.reshape(self.size, n)

    def barrier(self) -> None:
        """No rank exits before all ranks have entered."""
        self.allreduce_sum(np.zeros(1))

    # -- lifecycle -----------------------------------------------------------

    def close(self) -> None:
        self._closed = True
        self._inbox.close()


class InProcessEndpoint(Endpoint):
    """One rank of an in-process group; ranks are threads sharing inboxes."""

    def __init__(self, rank, size, group, default_timeout=None):
        super().__init__(rank, size, default_timeout)
        self._group = group

    def _send_impl(self, dest, tag, payload):
        self._group.inboxes[dest].put(Envelope(self.rank, dest, tag, payload))
        return SendHandle(completed=True)


class InProcessGroup:
    """P rank endpoints wired through shared in-memory inboxes."""

    def __init__(self, size: int, default_timeout: float | None = None):
        if size < 1:
            raise ValueError("size must be >= 1")
        self.size = size
        self.endpoints = [
            InProcessEndpoint(r, size, self, default_timeout) for r in range(size)
        ]
        self.inboxes = [ep._inbox for ep in self.endpoints]

    def endpoint(self, rank: int) -> InProcessEndpoint:
        return self.endpoints[rank]

    def close(self) -> None:
        for ep in self.endpoints:
            ep.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def pack_frame(source: int, dest: int, tag: int, payload: bytes) -> bytes:
    header = _HEADER.pack(source, dest, tag, len(payload))
    return _LENGTH.pack(len(header) + len(payload)) + header + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


class _Connection:
    """One full-duplex socket to a peer, with reader and writer threads."""

    def __init__(self, sock: socket.socket, owner: "TcpEndpoint", peer: int):
        self.sock = sock
        self.peer = peer
        self._owner = owner
        self._outq: list = []
        self._cond = threading.Condition()
        self._stop = False
        self.reader = threading.Thread(target=self._read_loop, daemon=True)
        self.writer = threading.Thread(target=self._write_loop, daemon=True)
        self.reader.start()
        self.writer.start()

    def send(self, frame: bytes, handle: SendHandle) -> None:
        with self._cond:
            self._outq.append((frame, handle))
            self._cond.notify_all()

    def _write_loop(self):
        while True:
            with self._cond:
                while not self._outq and not self._stop:
                    self._cond.wait()
                if self._stop and not self._outq:
                    return
                frame, handle = self._outq.pop(0)
            try:
                self.sock.sendall(frame)
            except OSError:
                return
            finally:
                handle.mark_done()

    def _read_loop(self):
        while True:
            try:
                head = _recv_exact(self.sock, _LENGTH.size)
                if head is None:
                    return
                (total,) = _LENGTH.unpack(head)
                body = _recv_exact(self.sock, total)
            except OSError:
                return
            if body is None:
                return
            source, dest, tag, plen = _HEADER.unpack(body[: _HEADER.size])
            payload = body[_HEADER.size : _HEADER.size + plen]
            self._owner._inbox.put(Envelope(source, dest, tag, payload))

    def close(self):
        with self._cond:
            self._stop = True
            self._cond.notify_all()
        self.writer.join(timeout=5)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self.reader.join(timeout=5)


class TcpEndpoint(Endpoint):
    """Socket-backed endpoint. Connections to lower-ranked peers are accepted;
    connections to higher-ranked peers are dialed by this side."""

    def __init__(
        self,
        rank: int,
        size: int,
        hosts: list,
        listener: socket.socket | None = None,
        default_timeout: float | None = None,
        dial_timeout: float = 20.0,
    ):
        super().__init__(rank, size, default_timeout)
        self.hosts = list(hosts)
        if len(self.hosts) < size:
            raise ValueError("need one host:port per rank")
        self._conns: dict[int, _Connection] = {}
        self._listener = listener or self._bind(self.hosts[rank])
        self._dial_timeout = dial_timeout
        self._connect_all()

    @staticmethod
    def _bind(addr) -> socket.socket:
        host, port = addr
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind((host, port))
        s.listen(64)
        return s

    def _connect_all(self):
        expected = self.rank  # all lower ranks dial us
        accept_thread = threading.Thread(
            target=self._accept_loop, args=(expected,), daemon=True
        )
        accept_thread.start()
        for peer in range(self.rank + 1, self.size):
            self._dial(peer)
        accept_thread.join(timeout=self._dial_timeout + 5)
        if len(self._conns) != self.size - 1:
            raise PeerUnreachable(
                f"rank {self.rank}: wired {len(self._conns)} of {self.size - 1} peers"
            )

    def _accept_loop(self, expected: int):
        got = 0
        self._listener.settimeout(self._dial_timeout)
        while got < expected:
            try:
                sock, _ = self._listener.accept()
            except (socket.timeout, OSError):
                return
            head = _recv_exact(sock, _LENGTH.size)
            if head is None:
                sock.close()
                continue
            (total,) = _LENGTH.unpack(head)
            body = _recv_exact(sock, total)
            if body is None:
                sock.close()
                continue
            source, _dest, tag, _plen = _HEADER.unpack(body[: _HEADER.size])
            if tag != _HELLO_TAG:
                sock.close()
                continue
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns[source] = _Connection(sock, self, source)
            got += 1

    def _dial(self, peer: int):
        host, port = self.hosts[peer]
        deadline = time.monotonic() + self._dial_timeout
        last_err = None
        while time.monotonic() < deadline:
            try:
                sock = socket.create_connection((host, port), timeout=2.0)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.sendall(pack_frame(self.rank, peer, _HELLO_TAG, b""))
                self._conns[peer] = _Connection(sock, self, peer)
                return
            except OSError as err:
                last_err = err
                time.sleep(0.05)
        raise PeerUnreachable(f"rank {self.rank} cannot dial rank {peer}: {last_err}")

    def _send_impl(self, dest, tag, payload):
        conn = self._conns.get(dest)
        if conn is None:
            raise PeerUnreachable(f"no connection to rank {dest}")
        handle = SendHandle()
        conn.send(pack_frame(self.rank, dest, tag, payload), handle)
        return handle

    def close(self):
        super().close()
        try:
            self._listener.close()
        except OSError:
            pass
        for conn in self._conns.values():
            conn.close()
        self._conns.clear()


class TcpGroup:
    """All-ranks-in-one-process TCP group on localhost (desk-scale harness).

    Listeners are bound up front on ephemeral ports (or the given host:port
    list), then endpoints are wired concurrently. The wire format is the same
    one a multi-process deployment would use.
    """

    def __init__(self, size: int, hosts: list | None = None, default_timeout=None):
        if size < 1:
            raise ValueError("size must be >= 1")
        self.size = size
        listeners = []
        if hosts is None:
            hosts = []
            for _ in range(size):
                s = TcpEndpoint._bind(("127.0.0.1", 0))
                listeners.append(s)
                hosts.append(("127.0.0.1", s.getsockname()[1]))
        else:
            hosts = list(hosts)
            listeners = [TcpEndpoint._bind(h) for h in hosts]
        self.hosts = hosts
        self.endpoints: list[TcpEndpoint | None] = [None] * size
        errors = []

        def build(r):
            try:
                self.endpoints[r] = TcpEndpoint(
                    r, size, hosts, listener=listeners[r], default_timeout=default_timeout
                )
            except Exception as err:  # propagate after join
                errors.append(err)

        threads = [threading.Thread(target=build, args=(r,)) for r in range(size)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]

    def endpoint(self, rank: int) -> TcpEndpoint:
        ep = self.endpoints[rank]
        assert ep is not None
        return ep

    def close(self) -> None:
        for ep in self.endpoints:
            if ep is not None:
                ep.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_hosts_file(path) -> list:
    """host:port lines, one per rank, rank order."""
    hosts = []
    for line in open(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        host, port = line.rsplit(":", 1)
        hosts.append((host, int(port)))
    return hosts


def make_group(kind: str, size: int, hosts=None, default_timeout=None):
    """Group factory: kind is 'inproc' or 'tcp'."""
    if kind == "inproc":
        return InProcessGroup(size, default_timeout)
    if kind == "tcp":
        return TcpGroup(size, hosts=hosts, default_timeout=default_timeout)
    raise ValueError(f"unknown transport {kind!r}")
