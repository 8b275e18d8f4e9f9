"""Publish/subscribe message delivery.

Two implementations share the same topic scheme and envelope format:

* ``LocalBus`` -- in-process, single-threaded and deterministic.
* ``Broker`` + ``TcpClient`` -- a small MQTT-like broker over TCP with
  length-prefixed frames.

Topics::

    so/shares/{agent_id}      operator -> agent i
    agents/{agent_id}/upload  agent i -> operator
    so/aggregate              operator -> all agents
    control/halt              operator -> all agents

Subscriptions may use ``+`` as a single-level wildcard. New subscribers get the
retained history of matching topics replayed first, so start-up order between
peers does not matter.
"""
from __future__ import annotations

import json
import logging
import queue
import re
import socket
import struct
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20
AGGREGATE = "so/aggregate"
HALT = "control/halt"

_TOPIC_RE = re.compile(r"^(so/shares/(?P<a>\d+)|agents/(?P<b>\d+)/upload|so/aggregate|control/halt)$")
_HEADER = struct.Struct(">I")


class TransportError(Exception):
    """Base class; carries nothing protocol-specific."""


class TopicError(TransportError, ValueError):
    pass


class FramingError(TransportError):
    pass


class SessionClosed(TransportError):
    """The peer went away; the session may be re-established."""


class BarrierTimeout(TransportError):
    pass


def shares_topic(agent_id: int) -> str:
    return f"so/shares/{agent_id}"


def upload_topic(agent_id: int) -> str:
    return f"agents/{agent_id}/upload"


def validate_topic(path: str, n: int | None = None) -> str:
    m = _TOPIC_RE.match(path)
    if not m:
        raise TopicError(f"invalid topic {path!r}")
    aid = m.group("a") or m.group("b")
    if aid is not None and (int(aid) < 1 or (n is not None and int(aid) > n)):
        raise TopicError(f"agent id {aid} out of range in {path!r}")
    return path


def topic_matches(pattern: str, topic: str) -> bool:
    p, t = pattern.split("/"), topic.split("/")
    return len(p) == len(t) and all(a == "+" or a == b for a, b in zip(p, t))


@dataclass(frozen=True)
class Envelope:
    topic: str
    sender: str
    seq: int
    body: bytes

    def to_bytes(self) -> bytes:
        return json.dumps({"topic": self.topic, "sender": self.sender, "seq": self.seq,
                           "body": self.body.decode()}, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        try:
            doc = json.loads(data)
            return cls(validate_topic(doc["topic"]), str(doc["sender"]), int(doc["seq"]), doc["body"].encode())
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise FramingError(f"malformed envelope: {exc}") from None


def frame(data: bytes, max_frame: int = MAX_FRAME) -> bytes:
    """4-byte big-endian length prefix followed by ``data``."""
    if len(data) > max_frame:
        raise FramingError(f"frame of {len(data)} bytes exceeds limit {max_frame}")
    return _HEADER.pack(len(data)) + data


def deframe(buf: bytes, max_frame: int = MAX_FRAME) -> tuple[bytes, bytes]:
    """Split the first frame off ``buf``; returns ``(payload, rest)``."""
    if len(buf) < _HEADER.size:
        raise FramingError("truncated frame header")
    (size,) = _HEADER.unpack_from(buf)
    if size > max_frame:
        raise FramingError(f"declared frame length {size} exceeds limit {max_frame}")
    end = _HEADER.size + size
    if len(buf) < end:
        raise FramingError(f"truncated frame: need {size} bytes, have {len(buf) - _HEADER.size}")
    return buf[_HEADER.size:end], buf[end:]


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < size:
        chunk = sock.recv(size - len(chunks))
        if not chunk:
            if chunks:
                raise FramingError("connection closed mid-frame")
            raise SessionClosed("connection closed")
        chunks += chunk
    return bytes(chunks)


def read_frame(sock: socket.socket, max_frame: int = MAX_FRAME) -> bytes:
    (size,) = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if size > max_frame:
        raise FramingError(f"declared frame length {size} exceeds limit {max_frame}")
    return _recv_exact(sock, size)


class Inbox:
    """Ordered delivery queue that drops envelopes already seen (same sender, topic, seq)."""

    def __init__(self):
        self._q = deque()
        self._seen = set()

    def offer(self, env: Envelope) -> bool:
        key = (env.sender, env.topic, env.seq)
        if key in self._seen:
            return False
        self._seen.add(key)
        self._q.append(env)
        return True

    def pop(self) -> Envelope:
        return self._q.popleft()

    def __len__(self):
        return len(self._q)

    def __bool__(self):
        return bool(self._q)


class _Sequencer:
    def __init__(self):
        self._next = defaultdict(int)

    def next(self, sender: str, topic: str) -> int:
        key = (sender, topic)
        self._next[key] += 1
        return self._next[key]


class LocalBus:
    """In-process bus; ``log`` keeps every envelope in publication order."""

    def __init__(self, n: int | None = None):
        self.n = n
        self.log: list[Envelope] = []
        self._subs: list[tuple[str, Inbox]] = []
        self._seq = _Sequencer()

    def subscribe(self, patterns, inbox: Inbox | None = None, replay: bool = True) -> Inbox:
        if isinstance(patterns, str):
            patterns = [patterns]
        inbox = inbox or Inbox()
        for p in patterns:
            if replay:
                for env in self.log:
                    if topic_matches(p, env.topic):
                        inbox.offer(env)
            self._subs.append((p, inbox))
        return inbox

    def publish(self, sender: str, topic: str, body: bytes) -> Envelope:
        env = Envelope(validate_topic(topic, self.n), sender, self._seq.next(sender, topic), body)
        self.log.append(env)
        for p, inbox in self._subs:
            if topic_matches(p, env.topic):
                inbox.offer(env)
        return env


class Broker:
    """Threaded TCP broker. One reader thread per connection; per-sender order is preserved."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, max_frame: int = MAX_FRAME):
        self.max_frame = max_frame
        self.log: list[Envelope] = []
        self._lock = threading.Lock()
        self._subs: list[tuple[str, "_Conn"]] = []
        self._conns: list[_Conn] = []
        self._server = socket.create_server((host, port))
        self._closing = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, name="broker-accept", daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._server.getsockname()[:2]

    def start(self) -> "Broker":
        self._thread.start()
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        self._closing.set()
        try:
            self._server.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            c.close()

    def wait_drained(self, timeout: float = 10.0) -> bool:
        """Block until every client has disconnected; False on timeout."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                if not self._conns:
                    return True
            time.sleep(0.02)
        return False

    def _accept_loop(self):
        while not self._closing.is_set():
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock, self.max_frame)
            with self._lock:
                self._conns.append(conn)
            threading.Thread(target=self._serve, args=(conn,), name="broker-conn", daemon=True).start()

    def _serve(self, conn: "_Conn"):
        try:
            while True:
                req = json.loads(read_frame(conn.sock, self.max_frame))
                op = req.get("op")
                if op == "sub":
                    pattern = req["pattern"]
                    with self._lock:
                        self._subs.append((pattern, conn))
                        backlog = [e for e in self.log if topic_matches(pattern, e.topic)]
                        # replay under the lock so no live message overtakes the backlog
                        for env in backlog:
                            conn.send(env.to_bytes())
                        conn.send(json.dumps({"op": "suback", "pattern": pattern}).encode())
                elif op == "pub":
                    env = Envelope.from_bytes(req["env"].encode())
                    with self._lock:
                        self.log.append(env)
                        targets = [c for p, c in self._subs if topic_matches(p, env.topic)]
                        for c in targets:
                            try:
                                c.send(env.to_bytes())
                            except SessionClosed:
                                log.debug("dropping delivery to a closed subscriber")
                else:
                    raise FramingError(f"unknown op {op!r}")
        except (TransportError, OSError, ValueError) as exc:
            if not self._closing.is_set():
                log.debug("broker connection ended: %s", exc)
        finally:
            with self._lock:
                self._subs = [(p, c) for p, c in self._subs if c is not conn]
                if conn in self._conns:
                    self._conns.remove(conn)
            conn.close()


class _Conn:
    def __init__(self, sock: socket.socket, max_frame: int):
        self.sock = sock
        self.max_frame = max_frame
        self._wlock = threading.Lock()

    def send(self, data: bytes) -> None:
        with self._wlock:
            try:
                self.sock.sendall(frame(data, self.max_frame))
            except OSError as exc:
                raise SessionClosed(str(exc)) from None

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpClient:
    """Broker session for one role."""

    def __init__(self, address: tuple[str, int], client_id: str, max_frame: int = MAX_FRAME,
                 connect_timeout: float = 10.0):
        self.client_id = client_id
        self.max_frame = max_frame
        try:
            sock = socket.create_connection(address, timeout=connect_timeout)
        except OSError as exc:
            raise SessionClosed(f"cannot reach broker at {address}: {exc}") from None
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._conn = _Conn(sock, max_frame)
        self._seq = _Sequencer()
        self._inbox = Inbox()
        self._ready: "queue.Queue[Envelope | Exception]" = queue.Queue()
        self._acks: "queue.Queue[str]" = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, name=f"{client_id}-reader", daemon=True)
        self._reader.start()

    def _read_loop(self):
        try:
            while True:
                data = read_frame(self._conn.sock, self.max_frame)
                doc = json.loads(data)
                if doc.get("op") == "suback":
                    self._acks.put(doc["pattern"])
                    continue
                env = Envelope.from_bytes(data)
                if self._inbox.offer(env):
                    self._ready.put(self._inbox.pop())
        except Exception as exc:  # surfaced to the consumer on its next recv
            self._ready.put(exc if isinstance(exc, TransportError) else SessionClosed(str(exc)))

    def subscribe(self, patterns, timeout: float = 10.0) -> None:
        if isinstance(patterns, str):
            patterns = [patterns]
        for p in patterns:
            self._conn.send(json.dumps({"op": "sub", "pattern": p}).encode())
            try:
                self._acks.get(timeout=timeout)
            except queue.Empty:
                raise BarrierTimeout(f"no subscription ack for {p!r}") from None

    def publish(self, topic: str, body: bytes) -> Envelope:
        env = Envelope(validate_topic(topic), self.client_id, self._seq.next(self.client_id, topic), body)
        self._conn.send(json.dumps({"op": "pub", "env": env.to_bytes().decode()}).encode())
        return env

    def recv(self, timeout: float | None = None) -> Envelope:
        try:
            item = self._ready.get(timeout=timeout)
        except queue.Empty:
            raise BarrierTimeout(f"{self.client_id}: nothing received within {timeout} s") from None
        if isinstance(item, Exception):
            self._ready.put(item)
            raise item
        return item

    def close(self) -> None:
        self._conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
