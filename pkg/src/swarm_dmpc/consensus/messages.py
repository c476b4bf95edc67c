"""Neighbor-to-neighbor messages and in-process transports.

Wire format for a future networked transport: each record is a 4-byte
big-endian unsigned length followed by that many bytes of UTF-8 JSON::

    {"kind": "TrajectoryShare" | "EdgeResult", "from": int, "to": int,
     "iteration": int, "cycle": int, "payload": {name: [float, ...]}}
"""
from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

TRAJECTORY_SHARE = "TrajectoryShare"
EDGE_RESULT = "EdgeResult"
KINDS = (TRAJECTORY_SHARE, EDGE_RESULT)
_HEADER = struct.Struct(">I")


class LocalityError(RuntimeError):
    """A message was addressed to an agent that is not a graph neighbor."""


@dataclass
class Message:
    kind: str
    sender: int
    receiver: int
    payload: dict = field(default_factory=dict)
    iteration: int = 0
    cycle: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "from": self.sender,
            "to": self.receiver,
            "iteration": self.iteration,
            "cycle": self.cycle,
            "payload": {k: np.asarray(v, dtype=float).ravel().tolist()
                        for k, v in sorted(self.payload.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "Message":
        payload = {k: np.asarray(v, dtype=float) for k, v in d["payload"].items()}
        return cls(d["kind"], int(d["from"]), int(d["to"]), payload, int(d["iteration"]),
                   int(d["cycle"]))


def encode(msg: Message) -> bytes:
    body = json.dumps(msg.to_json(), separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(len(body)) + body


def decode_stream(data: bytes) -> list[Message]:
    out = []
    pos = 0
    while pos < len(data):
        if pos + _HEADER.size > len(data):
            raise ValueError("truncated length prefix")
        (size,) = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
        if pos + size > len(data):
            raise ValueError("truncated message body")
        out.append(Message.from_json(json.loads(data[pos:pos + size].decode("utf-8"))))
        pos += size
    return out


class QueueTransport:
    """Per-receiver mailboxes; safe for concurrent senders."""

    def __init__(self, graph):
        self.graph = graph
        self._boxes: dict[int, list] = {i: [] for i in range(graph.n_nodes)}
        self._lock = threading.Lock()

    def send(self, msg: Message) -> None:
        if not self.graph.are_neighbors(msg.sender, msg.receiver):
            raise LocalityError(f"agent {msg.sender} cannot message non-neighbor {msg.receiver}")
        with self._lock:
            self._boxes[msg.receiver].append(msg)

    def collect(self, receiver: int, kind: str | None = None) -> list[Message]:
        """Drain a mailbox (optionally one message kind) in a deterministic order."""
        with self._lock:
            box = self._boxes[receiver]
            take = [m for m in box if kind is None or m.kind == kind]
            self._boxes[receiver] = [m for m in box if not (kind is None or m.kind == kind)]
        return sorted(take, key=lambda m: (m.cycle, m.iteration, m.kind, m.sender))


class RecordingTransport(QueueTransport):
    """Queue transport that also keeps every message (for tests and audits)."""

    def __init__(self, graph, serialize: bool = False):
        super().__init__(graph)
        self.log: list[Message] = []
        self.serialize = serialize
        self.wire = bytearray()

    def send(self, msg: Message) -> None:
        super().send(msg)
        with self._lock:
            self.log.append(msg)
            if self.serialize:
                self.wire += encode(msg)
