"""Simulated inter-agent bus: message schema, serialization, Bernoulli drops
and exact byte accounting.

Broadcasts are expanded into unicasts at send time so every link has its own
independent drop decision and byte count. Within one (sender, receiver, kind)
stream the zero-latency bus never reorders.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (BadMagicError, ContractError, TruncatedBufferError,
                     VersionMismatchError, WireFormatError)
from .field import InstanceField, deserialize_field, serialize_field
from .geometry import Intrinsics

MESSAGE_MAGIC = b"OMMS"
MESSAGE_WIRE_VERSION = 1

KIND_PARAM = 1
KIND_RAY = 2
KIND_CLOUD = 3
KIND_NAMES = {KIND_PARAM: "param", KIND_RAY: "ray", KIND_CLOUD: "cloud"}

BROADCAST = -1

_HEADER = struct.Struct("<4sHBhhII")   # magic, version, kind, sender, receiver, round, len
MESSAGE_HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class Message:
    kind: int
    sender: int
    receiver: int
    round: int
    payload: bytes

    def __post_init__(self):
        if self.kind not in KIND_NAMES:
            raise ContractError(f"unknown message kind {self.kind}")


def serialize(msg: Message) -> bytes:
    header = _HEADER.pack(MESSAGE_MAGIC, MESSAGE_WIRE_VERSION, msg.kind,
                          msg.sender, msg.receiver, msg.round, len(msg.payload))
    return header + msg.payload


def deserialize(buf: bytes) -> Message:
    if len(buf) < MESSAGE_HEADER_SIZE:
        raise TruncatedBufferError("buffer shorter than the message header")
    magic, version, kind, sender, receiver, rnd, plen = _HEADER.unpack_from(buf)
    if magic != MESSAGE_MAGIC:
        raise BadMagicError(f"expected {MESSAGE_MAGIC!r}")
    if version != MESSAGE_WIRE_VERSION:
        raise VersionMismatchError(f"message wire version {version}")
    if kind not in KIND_NAMES:
        raise WireFormatError(f"unknown message kind {kind}")
    if len(buf) < MESSAGE_HEADER_SIZE + plen:
        raise TruncatedBufferError(
            f"payload truncated: {len(buf) - MESSAGE_HEADER_SIZE} < {plen}")
    if len(buf) > MESSAGE_HEADER_SIZE + plen:
        raise WireFormatError("trailing bytes after declared payload")
    return Message(kind=kind, sender=sender, receiver=receiver, round=rnd,
                   payload=buf[MESSAGE_HEADER_SIZE:])


# --- payload codecs ----------------------------------------------------------

def param_share(sender: int, receiver: int, rnd: int, field_: InstanceField,
                coverage: int = 0) -> Message:
    return Message(KIND_PARAM, sender, receiver, rnd,
                   serialize_field(field_, coverage))


def parse_param_share(msg: Message) -> tuple[InstanceField, int]:
    if msg.kind != KIND_PARAM:
        raise ContractError("not a parameter share")
    return deserialize_field(msg.payload)


_RAY_HEADER = struct.Struct("<qQ12d4dI")
_RAY_ITEM = struct.Struct("<HHd")


@dataclass(frozen=True)
class RayShareData:
    global_id: int
    seed: int
    pose: np.ndarray               # 4x4 camera-to-world of the sending agent
    intrinsics: Intrinsics
    pixels: np.ndarray             # (n, 2) uint16 (u, v)
    depths: np.ndarray             # (n,) sender-rendered ray-length depths


def ray_share(sender: int, receiver: int, rnd: int, data: RayShareData) -> Message:
    head = _RAY_HEADER.pack(
        data.global_id, data.seed,
        *data.pose[:3, :4].ravel().tolist(),
        data.intrinsics.fx, data.intrinsics.fy, data.intrinsics.cx, data.intrinsics.cy,
        len(data.pixels))
    body = b"".join(
        _RAY_ITEM.pack(int(u), int(v), float(d))
        for (u, v), d in zip(data.pixels, data.depths))
    return Message(KIND_RAY, sender, receiver, rnd, head + body)


def parse_ray_share(msg: Message) -> RayShareData:
    if msg.kind != KIND_RAY:
        raise ContractError("not a ray share")
    buf = msg.payload
    if len(buf) < _RAY_HEADER.size:
        raise TruncatedBufferError("ray share shorter than its header")
    gid, seed, *rest = _RAY_HEADER.unpack_from(buf)
    pose = np.eye(4)
    pose[:3, :4] = np.array(rest[:12]).reshape(3, 4)
    intr = Intrinsics(*rest[12:16])
    n = rest[16]
    need = _RAY_HEADER.size + n * _RAY_ITEM.size
    if len(buf) < need:
        raise TruncatedBufferError("ray share items truncated")
    pixels = np.empty((n, 2), dtype=np.int64)
    depths = np.empty(n)
    off = _RAY_HEADER.size
    for i in range(n):
        u, v, d = _RAY_ITEM.unpack_from(buf, off)
        pixels[i] = (u, v)
        depths[i] = d
        off += _RAY_ITEM.size
    return RayShareData(global_id=gid, seed=seed, pose=pose, intrinsics=intr,
                        pixels=pixels, depths=depths)


_CLOUD_HEADER = struct.Struct("<hidH")


@dataclass(frozen=True)
class CloudShareData:
    agent_id: int
    local_id: int
    confidence: float
    f_clip: np.ndarray
    f_caption: np.ndarray
    points: np.ndarray             # (n, 3) downsampled world points


def cloud_share(sender: int, receiver: int, rnd: int, data: CloudShareData) -> Message:
    dim = len(data.f_clip)
    head = _CLOUD_HEADER.pack(data.agent_id, data.local_id, data.confidence, dim)
    body = (np.asarray(data.f_clip, dtype="<f8").tobytes()
            + np.asarray(data.f_caption, dtype="<f8").tobytes()
            + struct.pack("<I", len(data.points))
            + np.asarray(data.points, dtype="<f8").tobytes())
    return Message(KIND_CLOUD, sender, receiver, rnd, head + body)


def parse_cloud_share(msg: Message) -> CloudShareData:
    if msg.kind != KIND_CLOUD:
        raise ContractError("not a cloud share")
    buf = msg.payload
    if len(buf) < _CLOUD_HEADER.size:
        raise TruncatedBufferError("cloud share shorter than its header")
    agent_id, local_id, confidence, dim = _CLOUD_HEADER.unpack_from(buf)
    off = _CLOUD_HEADER.size
    need = off + 16 * dim + 4
    if len(buf) < need:
        raise TruncatedBufferError("cloud share features truncated")
    f_clip = np.frombuffer(buf, dtype="<f8", count=dim, offset=off).copy()
    off += 8 * dim
    f_caption = np.frombuffer(buf, dtype="<f8", count=dim, offset=off).copy()
    off += 8 * dim
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) < off + 24 * n:
        raise TruncatedBufferError("cloud share points truncated")
    points = np.frombuffer(buf, dtype="<f8", count=3 * n, offset=off).reshape(n, 3).copy()
    return CloudShareData(agent_id=agent_id, local_id=local_id, confidence=confidence,
                          f_clip=f_clip, f_caption=f_caption, points=points)


# --- channel and traffic ------------------------------------------------------

@dataclass(frozen=True)
class ChannelModel:
    success_rate: float = 1.0
    seed: int = 0
    latency_rounds: int = 0

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ContractError("success_rate must be in [0,1]")
        if self.latency_rounds < 0:
            raise ContractError("latency must be >= 0 rounds")


@dataclass
class TrafficRow:
    sent_count: int = 0
    sent_bytes: int = 0
    delivered_count: int = 0
    delivered_bytes: int = 0


class TrafficLog:
    """Per-round, per-kind byte counters from serialized lengths."""

    def __init__(self) -> None:
        self.rows: dict[tuple[int, int], TrafficRow] = {}

    def _row(self, rnd: int, kind: int) -> TrafficRow:
        return self.rows.setdefault((rnd, kind), TrafficRow())

    def record_sent(self, rnd: int, kind: int, nbytes: int) -> None:
        row = self._row(rnd, kind)
        row.sent_count += 1
        row.sent_bytes += nbytes

    def record_delivered(self, rnd: int, kind: int, nbytes: int) -> None:
        row = self._row(rnd, kind)
        row.delivered_count += 1
        row.delivered_bytes += nbytes

    def totals(self) -> dict[str, TrafficRow]:
        agg: dict[str, TrafficRow] = {name: TrafficRow() for name in KIND_NAMES.values()}
        for (rnd, kind), row in self.rows.items():
            t = agg[KIND_NAMES[kind]]
            t.sent_count += row.sent_count
            t.sent_bytes += row.sent_bytes
            t.delivered_count += row.delivered_count
            t.delivered_bytes += row.delivered_bytes
        return agg

    def total_sent_bytes(self) -> int:
        return sum(r.sent_bytes for r in self.rows.values())

    def total_delivered_bytes(self) -> int:
        return sum(r.delivered_bytes for r in self.rows.values())

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["round", "kind", "sent_count", "sent_bytes",
                         "delivered_count", "delivered_bytes"])
        for (rnd, kind) in sorted(self.rows):
            row = self.rows[(rnd, kind)]
            writer.writerow([rnd, KIND_NAMES[kind], row.sent_count, row.sent_bytes,
                             row.delivered_count, row.delivered_bytes])
        return out.getvalue()

    def summary(self) -> dict:
        return {
            name: {"sent_count": r.sent_count, "sent_bytes": r.sent_bytes,
                   "delivered_count": r.delivered_count, "delivered_bytes": r.delivered_bytes}
            for name, r in sorted(self.totals().items())
        }


@dataclass
class _Pending:
    deliver_round: int
    order: tuple
    message: Message


class Bus:
    """Synchronous-round message bus with i.i.d. per-message Bernoulli drops."""

    def __init__(self, agents: list[int], channel: ChannelModel) -> None:
        self.agents = sorted(agents)
        self.channel = channel
        self.rng = np.random.default_rng(channel.seed)
        self.traffic = TrafficLog()
        self.dropped: list[Message] = []
        self._queue: list[_Pending] = []

    def exchange(self, outboxes: dict[int, list[Message]], rnd: int) -> dict[int, list[Message]]:
        """Send all outboxes for one round; returns this round's inboxes.

        Messages are processed in canonical (sender, emission index) order so a
        fixed channel seed reproduces the exact drop pattern.
        """
        for sender in sorted(outboxes):
            for idx, msg in enumerate(outboxes[sender]):
                for expanded in self._expand(msg):
                    raw = serialize(expanded)
                    self.traffic.record_sent(rnd, expanded.kind, len(raw))
                    ok = (self.channel.success_rate >= 1.0
                          or self.rng.random() < self.channel.success_rate)
                    if not ok:
                        self.dropped.append(expanded)
                        continue
                    self.traffic.record_delivered(rnd, expanded.kind, len(raw))
                    self._queue.append(_Pending(
                        deliver_round=rnd + self.channel.latency_rounds,
                        order=(sender, idx, expanded.receiver),
                        message=expanded))

        inboxes: dict[int, list[Message]] = {a: [] for a in self.agents}
        remaining = []
        due = []
        for p in self._queue:
            (due if p.deliver_round <= rnd else remaining).append(p)
        self._queue = remaining
        for p in sorted(due, key=lambda p: (p.deliver_round, p.order)):
            inboxes[p.message.receiver].append(p.message)
        return inboxes

    def _expand(self, msg: Message) -> list[Message]:
        if msg.receiver != BROADCAST:
            return [msg]
        return [Message(msg.kind, msg.sender, r, msg.round, msg.payload)
                for r in self.agents if r != msg.sender]
