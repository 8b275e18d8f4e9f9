"""Encrypted operator/agent message protocol.

One round ``k`` consists of

1. the operator splitting ``c`` and ``d`` into fresh random additive shares
   and sending agent ``i`` the encryptions of its shares,
2. each agent uploading ``E(A_u[i] x_i + share_c)`` and ``E(A_g[i] x_i + share_d)``,
3. the operator multiplying the uploads coordinate-wise, which yields
   ``E(sum_i A_u[i] x_i + c)`` and ``E(sum_i A_g[i] x_i + d)``, and
   broadcasting both,
4. every agent decrypting the aggregates, taking a primal step on its own
   block and a dual step on its copy of ``lambda``, and voting on whether to
   stop.

The operator never holds the private key and agents never see ``c``, ``d`` or
another agent's variables. Both roles are plain state machines: ``handle``
consumes one message and returns the ``(topic, message)`` pairs to publish, so
the same code runs over the in-process bus and over TCP.
"""
from __future__ import annotations

import json
import math
import random
import threading
import warnings
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable

import numpy as np

from . import paillier as ph
from . import problem as pb
from . import spds
from . import transport as tp
from .encoding import DEFAULT_SIGMA, EncodingRangeError, FixedPointCodec

BROADCAST = "*"
DEFAULT_TIMEOUT = 30.0
TEST_BITS = 1024


class Kind(str, Enum):
    SHARES = "share_delivery"
    UPLOAD = "cipher_upload"
    AGGREGATE = "aggregate_broadcast"
    HALT = "halt"


class ProtocolError(Exception):
    pass


class RoundMismatchError(ProtocolError):
    pass


class BarrierError(ProtocolError):
    """Missing or duplicated contribution for a round."""


class CorruptedAggregateError(ProtocolError):
    pass


class ProtocolTransportError(ProtocolError):
    """Transport failure mid-run; ``checkpoint`` is the trace of completed rounds."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint or []


class PrivacyWarning(UserWarning):
    pass


# -- messages -----------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolMessage:
    """One arrow of a round.

    ``HALT`` messages carry only ``done``: from an agent they are its stop
    vote for round ``k``, from the operator they end the run.
    """

    kind: Kind
    k: int
    sender: str
    recipient: str
    key_id: str = ""
    c_payload: tuple = ()
    d_payload: tuple = ()
    done: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "c_payload", tuple(int(v) for v in self.c_payload))
        object.__setattr__(self, "d_payload", tuple(int(v) for v in self.d_payload))
        if self.kind is Kind.HALT:
            if self.c_payload or self.d_payload:
                raise ValueError("halt messages carry no ciphertexts")
        elif not (self.c_payload and self.d_payload and self.key_id):
            raise ValueError(f"{self.kind.value} needs both ciphertext streams and a key id")
        if self.k < 0:
            raise ValueError("negative round index")

    @classmethod
    def carrying(cls, kind, k, sender, recipient, c_cts, d_cts) -> "ProtocolMessage":
        key_ids = {ct.key_id for ct in (*c_cts, *d_cts)}
        if len(key_ids) != 1:
            raise ph.KeyMismatchError("payload mixes ciphertexts from different keys")
        return cls(kind, k, sender, recipient, key_ids.pop(),
                   tuple(ct.value for ct in c_cts), tuple(ct.value for ct in d_cts))

    def ciphertexts(self) -> tuple[list[ph.Ciphertext], list[ph.Ciphertext]]:
        return ([ph.Ciphertext(v, self.key_id) for v in self.c_payload],
                [ph.Ciphertext(v, self.key_id) for v in self.d_payload])

    def payload_values(self) -> tuple:
        return self.c_payload + self.d_payload

    def to_dict(self) -> dict:
        doc = {"kind": self.kind.value, "k": self.k, "sender": self.sender, "recipient": self.recipient}
        if self.kind is Kind.HALT:
            doc["done"] = self.done
        else:
            doc["key_id"] = self.key_id
            doc["c"] = [ph.to_hex(v) for v in self.c_payload]
            doc["d"] = [ph.to_hex(v) for v in self.d_payload]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ProtocolMessage":
        return cls(Kind(doc["kind"]), int(doc["k"]), doc["sender"], doc["recipient"],
                   doc.get("key_id", ""),
                   tuple(ph.from_hex(v) for v in doc.get("c", ())),
                   tuple(ph.from_hex(v) for v in doc.get("d", ())),
                   bool(doc.get("done", False)))

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProtocolMessage":
        try:
            return cls.from_dict(json.loads(data))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed protocol message: {exc}") from None


# -- shares -------------------------------------------------------------------

def _round_half_away(f: Fraction) -> int:
    q, r = divmod(abs(f.numerator), f.denominator)
    q += 2 * r >= f.denominator
    return q if f >= 0 else -q


def split_integer(total: int, weights: list[Fraction]) -> list[int]:
    """Integer shares proportional to ``weights`` that sum to ``total`` exactly."""
    shares = [_round_half_away(w * total) for w in weights[:-1]]
    shares.append(total - sum(shares))
    return shares


def draw_weights(n: int, rng) -> list[Fraction]:
    """Uniform draws on [0, 1], normalized to sum to one (exactly, as rationals)."""
    raw = [Fraction(rng.random()) for _ in range(n)]
    s = sum(raw)
    if s == 0:
        raw, s = [Fraction(1)] * n, Fraction(n)
    return [r / s for r in raw]


@dataclass(frozen=True)
class ShareSet:
    """Encrypted shares of one round; ``c_shares[i]`` is agent ``i``'s vector."""

    k: int
    c_shares: tuple
    d_shares: tuple


# -- roles --------------------------------------------------------------------

def _rng(seed, label: str):
    if seed is None:
        return random.SystemRandom()
    return random.Random(f"{seed}/{label}")


class SystemOperator:
    """Operator role: splits ``c``/``d`` into shares and aggregates ciphertexts.

    Holds the public key and its own coefficients only.
    """

    role = pb.SO

    def __init__(self, pk: ph.PublicKey, view: pb.OperatorView, codec: FixedPointCodec,
                 share_rng=None, nonce_rng=None):
        if codec.n != pk.n:
            raise ValueError("codec modulus does not match the public key")
        self.pk = pk
        self.view = view
        self.codec = codec
        self.n = view.n
        self._share_rng = share_rng or random.SystemRandom()
        self._nonce_rng = nonce_rng or random.SystemRandom()
        self._c_int = [codec.to_int(v) for v in view.c]
        self._d_int = [codec.to_int(v) for v in view.d]
        self.k = 0
        self.finished = False
        self._uploads: dict[int, tuple] = {}
        self._votes: dict[int, bool] = {}
        self._last_share_k = -1
        if self.n < 2:
            warnings.warn("with a single agent the shares cannot mask c and d", PrivacyWarning, stacklevel=2)

    def subscriptions(self) -> list[str]:
        return [tp.upload_topic("+")]

    def _encrypt_vector(self, ints) -> list[ph.Ciphertext]:
        return [ph.encrypt(self.pk, v % self.pk.n, self._nonce_rng) for v in ints]

    def make_shares(self, k: int) -> ShareSet:
        if k <= self._last_share_k:
            raise RoundMismatchError(f"shares for round {k} requested after round {self._last_share_k}")
        self._last_share_k = k
        gamma = draw_weights(self.n, self._share_rng)
        upsilon = draw_weights(self.n, self._share_rng)
        c_split = [split_integer(t, gamma) for t in self._c_int]      # coordinate-major
        d_split = [split_integer(t, upsilon) for t in self._d_int]
        c_shares = tuple(tuple(self._encrypt_vector(col[i] for col in c_split)) for i in range(self.n))
        d_shares = tuple(tuple(self._encrypt_vector(col[i] for col in d_split)) for i in range(self.n))
        return ShareSet(k, c_shares, d_shares)

    def aggregate(self, uploads: dict, k: int) -> tuple[list[ph.Ciphertext], list[ph.Ciphertext]]:
        """Coordinate-wise homomorphic sum of every agent's upload for round ``k``.

        ``uploads`` maps 0-based agent index to its ``(c_stream, d_stream)``.
        """
        if sorted(uploads) != list(range(self.n)):
            raise BarrierError(f"round {k}: uploads from agents {sorted(uploads)}, expected all {self.n}")
        order = sorted(uploads)
        zc = [ph.hom_sum((uploads[i][0][j] for i in order), self.pk) for j in range(len(self.view.c))]
        zd = [ph.hom_sum((uploads[i][1][j] for i in order), self.pk) for j in range(len(self.view.d))]
        return zc, zd

    def _share_messages(self) -> list:
        shares = self.make_shares(self.k)
        out = []
        for i in range(self.n):
            msg = ProtocolMessage.carrying(Kind.SHARES, self.k, self.role, pb.agent_role(i),
                                           shares.c_shares[i], shares.d_shares[i])
            out.append((tp.shares_topic(i + 1), msg))
        return out

    def start(self) -> list:
        return self._share_messages()

    def _agent_index(self, msg: ProtocolMessage) -> int:
        for i in range(self.n):
            if msg.sender == pb.agent_role(i):
                return i
        raise ProtocolError(f"message from unknown sender {msg.sender!r}")

    def handle(self, msg: ProtocolMessage) -> list:
        if self.finished:
            return []
        i = self._agent_index(msg)
        if msg.k != self.k:
            raise RoundMismatchError(f"operator at round {self.k} got {msg.kind.value} for round {msg.k}")
        if msg.kind is Kind.UPLOAD:
            if i in self._uploads:
                raise BarrierError(f"round {self.k}: duplicate upload from {msg.sender}")
            if msg.key_id != self.pk.key_id:
                raise ph.KeyMismatchError(f"upload from {msg.sender} bound to a foreign key")
            c_cts, d_cts = msg.ciphertexts()
            if len(c_cts) != len(self.view.c) or len(d_cts) != len(self.view.d):
                raise ProtocolError(f"upload from {msg.sender} has the wrong length")
            self._uploads[i] = (c_cts, d_cts)
            if len(self._uploads) < self.n:
                return []
            zc, zd = self.aggregate(self._uploads, self.k)
            return [(tp.AGGREGATE, ProtocolMessage.carrying(Kind.AGGREGATE, self.k, self.role, BROADCAST, zc, zd))]
        if msg.kind is Kind.HALT:
            if len(self._uploads) < self.n:
                raise BarrierError(f"round {self.k}: stop vote from {msg.sender} before aggregation")
            if i in self._votes:
                raise BarrierError(f"round {self.k}: duplicate stop vote from {msg.sender}")
            self._votes[i] = msg.done
            if len(self._votes) < self.n:
                return []
            if all(self._votes.values()):
                self.finished = True
                return [(tp.HALT, ProtocolMessage(Kind.HALT, self.k, self.role, BROADCAST, done=True))]
            self.k += 1
            self._uploads, self._votes = {}, {}
            return self._share_messages()
        raise ProtocolError(f"operator cannot handle {msg.kind.value}")


class Agent:
    """Agent role: holds the keypair, its own coefficient block and ``x_i``, ``lambda``."""

    def __init__(self, view: pb.AgentBlock, pk: ph.PublicKey, sk: ph.PrivateKey,
                 codec: FixedPointCodec, cfg: spds.SolverConfig, dual_lower, dual_upper,
                 rng=None, x0=None, lam0=None, rule: spds.UpdateRule = spds.SPDS):
        if codec.n != pk.n:
            raise ValueError("codec modulus does not match the public key")
        self.view = view
        self.index = view.index
        self.role = view.role
        self.pk, self.sk = pk, sk
        self.codec = codec
        self.cfg = cfg
        self.rule = rule
        self.dual_lower = np.asarray(dual_lower, dtype=float)
        self.dual_upper = np.asarray(dual_upper, dtype=float)
        self._rng = rng or random.SystemRandom()
        x0 = view.midpoint if x0 is None else x0
        lam0 = np.zeros_like(self.dual_lower) if lam0 is None else lam0
        self.x = spds.project_box(x0, view.lower, view.upper)
        self.lam = spds.project_box(lam0, self.dual_lower, self.dual_upper)
        self.k = 0
        self.history = [(0, self.x, self.lam, math.inf)]
        self._monitor = spds.StopMonitor(cfg.eps0, cfg.window)
        self.converged = False
        self.finished = False
        self._uploaded_k = -1

    @property
    def agent_id(self) -> int:
        return self.index + 1

    def subscriptions(self) -> list[str]:
        return [tp.shares_topic(self.agent_id), tp.AGGREGATE, tp.HALT]

    def start(self) -> list:
        return []

    def _decrypt_vector(self, cts) -> np.ndarray:
        return self.codec.decode_vector([ph.decrypt(self.pk, self.sk, ct) for ct in cts])

    def _encrypt_real_vector(self, v) -> list[ph.Ciphertext]:
        return [ph.encrypt(self.pk, m, self._rng) for m in self.codec.encode_vector(v)]

    def contribution(self, k: int, share_c, share_d) -> tuple[list[ph.Ciphertext], list[ph.Ciphertext]]:
        """Encrypted ``A_u x_i + share_c`` and ``A_g x_i + share_d`` for round ``k``."""
        if k != self.k:
            raise RoundMismatchError(f"{self.role} at round {self.k} got shares for round {k}")
        s_c = self._decrypt_vector(share_c)
        s_d = self._decrypt_vector(share_d)
        u = self.view.A_u @ self.x + s_c
        v = self.view.A_g @ self.x + s_d
        self._uploaded_k = k
        return self._encrypt_real_vector(u), self._encrypt_real_vector(v)

    def apply_aggregate(self, k: int, zc_cts, zd_cts) -> bool:
        """Decrypt the aggregates, update ``x_i`` and ``lambda``; returns this agent's stop vote."""
        if k != self.k or self._uploaded_k != k:
            raise RoundMismatchError(f"{self.role} at round {self.k} got the aggregate of round {k}")
        try:
            z_c = self._decrypt_vector(zc_cts)
            z_d = self._decrypt_vector(zd_cts)
        except (ph.PaillierError, EncodingRangeError) as exc:
            raise CorruptedAggregateError(f"round {k}: {exc}") from None
        grad = pb.block_subgradient(self.view, z_c, self.x, self.lam)
        x_new = self.rule.primal(self.cfg, self.index, self.x, grad, self.view.lower, self.view.upper)
        lam_new = self.rule.dual(self.cfg, self.lam, z_d, self.dual_lower, self.dual_upper)
        eps = spds.local_error(self.x, x_new, self.lam, lam_new)
        self.x, self.lam = x_new, lam_new
        self.k += 1
        self.history.append((self.k, x_new, lam_new, eps))
        self.converged = self._monitor.update(eps)
        return self.converged or self.k >= self.cfg.k_max

    def handle(self, msg: ProtocolMessage) -> list:
        if self.finished:
            return []
        if msg.sender != pb.SO:
            return []
        if msg.kind is Kind.SHARES:
            if msg.recipient != self.role:
                raise ProtocolError(f"{self.role} received shares addressed to {msg.recipient}")
            u, v = self.contribution(msg.k, *msg.ciphertexts())
            up = ProtocolMessage.carrying(Kind.UPLOAD, msg.k, self.role, pb.SO, u, v)
            return [(tp.upload_topic(self.agent_id), up)]
        if msg.kind is Kind.AGGREGATE:
            done = self.apply_aggregate(msg.k, *msg.ciphertexts())
            vote = ProtocolMessage(Kind.HALT, msg.k, self.role, pb.SO, done=done)
            return [(tp.upload_topic(self.agent_id), vote)]
        if msg.kind is Kind.HALT:
            self.finished = True
            return []
        raise ProtocolError(f"{self.role} cannot handle {msg.kind.value}")


# -- transcripts --------------------------------------------------------------

@dataclass(frozen=True)
class TranscriptRecord:
    index: int
    topic: str
    sender: str
    seq: int
    message: ProtocolMessage
    line: int | None = None

    def to_dict(self) -> dict:
        return {"type": "message", "index": self.index, "topic": self.topic, "sender": self.sender,
                "seq": self.seq, "message": self.message.to_dict()}


class TranscriptFormatError(ProtocolError):
    pass


@dataclass
class Transcript:
    public_key: ph.PublicKey
    sigma: int
    n: int
    records: list = field(default_factory=list)

    @classmethod
    def from_envelopes(cls, pk, sigma, n, envelopes: Iterable[tp.Envelope]) -> "Transcript":
        recs = [TranscriptRecord(i, e.topic, e.sender, e.seq, ProtocolMessage.from_bytes(e.body))
                for i, e in enumerate(envelopes)]
        return cls(pk, sigma, n, recs)

    def dumps(self) -> str:
        head = {"type": "header", "public_key": self.public_key.to_dict(), "sigma": self.sigma, "n": self.n}
        lines = [json.dumps(head, separators=(",", ":"))]
        lines += [json.dumps(r.to_dict(), separators=(",", ":")) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Transcript":
        lines = text.splitlines()
        if not lines:
            raise TranscriptFormatError("empty transcript")
        try:
            head = json.loads(lines[0])
            if head.get("type") != "header":
                raise ValueError("first line is not a header")
            pk = ph.PublicKey.from_dict(head["public_key"])
            out = cls(pk, int(head["sigma"]), int(head["n"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise TranscriptFormatError(f"line 1: bad header: {exc}") from None
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                msg = ProtocolMessage.from_dict(doc["message"])
                rec = TranscriptRecord(int(doc["index"]), doc["topic"], doc["sender"], int(doc["seq"]), msg, lineno)
            except (ValueError, KeyError, TypeError) as exc:
                raise TranscriptFormatError(f"line {lineno}: {exc}") from None
            out.records.append(rec)
        return out

    @classmethod
    def read(cls, path) -> "Transcript":
        with open(path) as fh:
            return cls.loads(fh.read())


# -- audit --------------------------------------------------------------------

@dataclass(frozen=True)
class Finding:
    index: int
    code: str
    detail: str
    line: int | None = None

    def __str__(self):
        where = f"line {self.line}" if self.line is not None else f"message {self.index}"
        return f"{where}: {self.code}: {self.detail}"


@dataclass
class AuditReport:
    findings: list
    messages: int
    ciphertexts: int

    @property
    def ok(self) -> bool:
        return not self.findings

    def format(self) -> str:
        head = (f"audited {self.messages} messages, {self.ciphertexts} ciphertexts: "
                f"{len(self.findings)} finding(s)")
        return "\n".join([head] + [str(f) for f in self.findings])


_KIND_TOPIC = {
    Kind.SHARES: lambda t: t.startswith("so/shares/"),
    Kind.UPLOAD: lambda t: t.startswith("agents/"),
    Kind.AGGREGATE: lambda t: t == tp.AGGREGATE,
}


def forbidden_plaintexts(codec: FixedPointCodec, trace=(), vectors=()) -> set[int]:
    """Encodings of every primal iterate in ``trace`` plus any extra vectors (e.g. ``c``, ``d``)."""
    out = set()
    for s in trace:
        for xi in s.x:
            out.update(codec.encode_vector(xi))
    for v in vectors:
        out.update(codec.encode_vector(v))
    return out


def audit_transcript(transcript: Transcript, forbidden: Iterable[int] = ()) -> AuditReport:
    """Check that only well-formed, fresh ciphertexts crossed the wire.

    Findings:

    ``invalid-residue``
        a payload integer is not a unit modulo ``n**2``;
    ``plaintext-range``
        a payload integer is below ``n`` -- an honest ciphertext lands there
        with probability about ``1/n``, a raw encoding always does;
    ``forbidden-plaintext``
        a payload integer equals one of the ``forbidden`` encodings;
    ``repeated-ciphertext``
        a fresh encryption (share or upload) repeats an earlier one;
    ``key-mismatch`` / ``misrouted``
        wrong key binding, or a message kind on the wrong topic.
    """
    pk = transcript.public_key
    n, n2 = pk.n, pk.nsquare
    forbidden = set(forbidden)
    findings = []
    seen: dict[int, int] = {}
    count = 0
    for rec in transcript.records:
        msg = rec.message

        def add(code, detail):
            findings.append(Finding(rec.index, code, detail, rec.line))

        check = _KIND_TOPIC.get(msg.kind)
        if check is not None and not check(rec.topic):
            add("misrouted", f"{msg.kind.value} published on {rec.topic}")
        if msg.kind is Kind.HALT:
            continue
        if msg.key_id != pk.key_id:
            add("key-mismatch", f"payload bound to key {msg.key_id}")
        for pos, v in enumerate(msg.payload_values()):
            count += 1
            if v in forbidden:
                add("forbidden-plaintext", f"payload[{pos}] equals a plaintext encoding")
            if not 0 < v < n2 or math.gcd(v, n2) != 1:
                add("invalid-residue", f"payload[{pos}] is not a unit modulo n^2")
            elif v < n:
                add("plaintext-range", f"payload[{pos}] lies in the plaintext range [0, n)")
            if msg.kind in (Kind.SHARES, Kind.UPLOAD):
                if v in seen:
                    add("repeated-ciphertext", f"payload[{pos}] repeats a ciphertext from message {seen[v]}")
                else:
                    seen[v] = rec.index
    return AuditReport(findings, len(transcript.records), count)


# -- running ------------------------------------------------------------------

@dataclass
class ProtocolResult:
    trace: list
    transcript: Transcript
    status: str
    public_key: ph.PublicKey
    info: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def final(self) -> spds.IterationState:
        return self.trace[-1]


def provision(inst: pb.ProblemInstance, cfg: spds.SolverConfig, pk: ph.PublicKey, sk: ph.PrivateKey,
              sigma: int = DEFAULT_SIGMA, seed=None, x0=None, lam0=None):
    """Build the operator and the agents, each with its own view and randomness stream."""
    codec = FixedPointCodec(sigma, pk.n)
    so = SystemOperator(pk, inst.operator_view(), codec, _rng(seed, "so/shares"), _rng(seed, "so/nonces"))
    xs = [None] * inst.n if x0 is None else inst.split(x0)
    agents = [
        Agent(inst.agent_view(i), pk, sk, codec, cfg, inst.dual_lower, inst.dual_upper,
              rng=_rng(seed, f"agent{i + 1}/nonces"), x0=xs[i], lam0=lam0)
        for i in range(inst.n)
    ]
    return so, agents


def assemble_trace(agents: list[Agent]) -> list[spds.IterationState]:
    """Join the agents' local histories into global iterates."""
    rounds = min(len(a.history) for a in agents)
    trace = []
    for r in range(rounds):
        rows = [a.history[r] for a in agents]
        lam = rows[0][2]
        if any(not np.array_equal(row[2], lam) for row in rows[1:]):
            raise ProtocolError(f"agents disagree on lambda after round {r}")
        trace.append(spds.IterationState(rows[0][0], tuple(row[1] for row in rows), lam,
                                         max(row[3] for row in rows)))
    return trace


def drive_local(so: SystemOperator, agents: list[Agent], bus: tp.LocalBus) -> None:
    """Run every role to completion on the deterministic in-process bus."""
    roles = [so, *agents]
    inboxes = [bus.subscribe(r.subscriptions()) for r in roles]
    for topic, msg in so.start():
        bus.publish(so.role, topic, msg.to_bytes())
    while not (so.finished and all(a.finished for a in agents)):
        progressed = False
        for role, inbox in zip(roles, inboxes):
            while inbox:
                env = inbox.pop()
                for topic, msg in role.handle(ProtocolMessage.from_bytes(env.body)):
                    bus.publish(role.role, topic, msg.to_bytes())
                progressed = True
        if not progressed:
            raise ProtocolError("protocol stalled with no messages in flight")


def drive_endpoint(role, client: tp.TcpClient, timeout: float = DEFAULT_TIMEOUT) -> None:
    """Run one role against a broker session until it finishes."""
    client.subscribe(role.subscriptions())
    for topic, msg in role.start():
        client.publish(topic, msg.to_bytes())
    while not role.finished:
        env = client.recv(timeout)
        for topic, msg in role.handle(ProtocolMessage.from_bytes(env.body)):
            client.publish(topic, msg.to_bytes())


def _drive_tcp(so, agents, address, timeout):
    broker = tp.Broker(*(address or ("127.0.0.1", 0))).start()
    errors = []

    def target(role):
        try:
            with tp.TcpClient(broker.address, role.role) as client:
                drive_endpoint(role, client, timeout)
        except Exception as exc:
            errors.append((role.role, exc))

    threads = [threading.Thread(target=target, args=(r,), name=r.role, daemon=True) for r in (so, *agents)]
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        broker.close()
    return broker.log, errors


def run_protocol(inst: pb.ProblemInstance, cfg: spds.SolverConfig, *, sigma: int = DEFAULT_SIGMA,
                 bits: int = TEST_BITS, seed=None, transport: str = "sim", keypair=None,
                 x0=None, lam0=None, address=None, timeout: float = DEFAULT_TIMEOUT) -> ProtocolResult:
    """Run the encrypted protocol end to end.

    Parameters
    ----------
    inst : ProblemInstance
        Coefficients; each role only receives its own view of them.
    cfg : SolverConfig
        Step sizes and stopping rule used by every agent.
    sigma : int
        Decimal digits kept by the fixed-point codec.
    bits : int
        Modulus size when ``keypair`` is not given.
    seed : optional
        Fixes key generation, shares and nonces so the transcript is
        reproducible. ``None`` draws everything from the OS CSPRNG.
    transport : {"sim", "tcp"}
        Deterministic in-process bus, or a loopback broker with one TCP
        session per role.

    Returns
    -------
    ProtocolResult
        Decoded iterate trace (initial state included) and the transcript
        of every published message.
    """
    if keypair is None:
        keypair = ph.keygen(bits, _rng(seed, "keygen"))
    pk, sk = keypair
    so, agents = provision(inst, cfg, pk, sk, sigma, seed, x0, lam0)
    if transport == "sim":
        bus = tp.LocalBus(inst.n)
        drive_local(so, agents, bus)
        envelopes = bus.log
    elif transport == "tcp":
        envelopes, errors = _drive_tcp(so, agents, address, timeout)
        if errors:
            role, exc = errors[0]
            checkpoint = assemble_trace(agents)
            if isinstance(exc, (tp.TransportError, OSError)):
                raise ProtocolTransportError(f"{role}: {exc}", checkpoint) from exc
            raise exc
    else:
        raise ValueError(f"unknown transport {transport!r}")
    trace = assemble_trace(agents)
    status = "converged" if all(a.converged for a in agents) else "max_iter"
    transcript = Transcript.from_envelopes(pk, sigma, inst.n, envelopes)
    return ProtocolResult(trace, transcript, status, pk, {"rounds": so.k + 1, "messages": len(envelopes)})
