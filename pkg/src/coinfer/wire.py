"""Edge <-> cloud message framing.

Frame layout: 4-byte little-endian payload length, 1-byte kind, payload.
The payload is ASCII tensor text.
"""
from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass

from .gating import Gate, dumps_gate, gate_from_block
from .models import TrainableEdgeModel, dumps_edge, edge_from_block
from .tensors import Image, RegionMaskSet, decode_block, dumps, read_blocks

HEADER = struct.Struct("<IB")
MAX_PAYLOAD = 64 * 1024 * 1024


class FrameError(ValueError):
    """Malformed or unexpected frame."""


class TransportError(RuntimeError):
    """The channel failed to deliver a message."""


class MessageKind(enum.IntEnum):
    UPLOAD_IMAGE = 0x01
    MASK_RESULT = 0x02
    MODEL_UPDATE = 0x03


@dataclass(frozen=True)
class ModelUpdate:
    edge: TrainableEdgeModel | None = None
    gate: Gate | None = None

    def __post_init__(self):
        if self.edge is None and self.gate is None:
            raise ValueError("a model update must carry an edge model or a gate")


@dataclass(frozen=True)
class WireMessage:
    kind: MessageKind
    body: object

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        expected = _BODY_TYPES[self.kind]
        if not isinstance(self.body, expected):
            raise TypeError(f"{self.kind.name} carries {expected.__name__}, "
                            f"got {type(self.body).__name__}")


_BODY_TYPES = {
    MessageKind.UPLOAD_IMAGE: Image,
    MessageKind.MASK_RESULT: RegionMaskSet,
    MessageKind.MODEL_UPDATE: ModelUpdate,
}


def _payload_text(msg: WireMessage) -> str:
    if msg.kind is MessageKind.MODEL_UPDATE:
        parts = []
        if msg.body.edge is not None:
            parts.append(dumps_edge(msg.body.edge))
        if msg.body.gate is not None:
            parts.append(dumps_gate(msg.body.gate))
        return "".join(parts)
    return dumps(msg.body)


def encode(msg: WireMessage) -> bytes:
    payload = _payload_text(msg).encode("ascii")
    return HEADER.pack(len(payload), int(msg.kind)) + payload


def _parse_body(kind: MessageKind, text: str):
    blocks = read_blocks(text)
    if kind is MessageKind.MODEL_UPDATE:
        edge = gate = None
        for tag, dims, tokens in blocks:
            if tag == "EW" and edge is None and gate is None:
                edge = edge_from_block(dims, tokens)
            elif tag == "GW" and gate is None:
                gate = gate_from_block(dims, tokens)
            else:
                raise FrameError(f"unexpected {tag} block in MODEL_UPDATE")
        return ModelUpdate(edge, gate)
    if len(blocks) != 1:
        raise FrameError(f"{kind.name} must carry exactly one block")
    body = decode_block(*blocks[0])
    if not isinstance(body, _BODY_TYPES[kind]):
        raise FrameError(f"{kind.name} payload decoded to {type(body).__name__}")
    return body


def decode(frame: bytes) -> WireMessage:
    """Decode one complete frame; raises FrameError on anything malformed."""
    if not isinstance(frame, (bytes, bytearray, memoryview)):
        raise FrameError("frame must be bytes")
    frame = bytes(frame)
    if len(frame) < HEADER.size:
        raise FrameError(f"frame shorter than the {HEADER.size}-byte header")
    length, kind_byte = HEADER.unpack_from(frame)
    if length > MAX_PAYLOAD:
        raise FrameError(f"declared payload length {length} exceeds limit")
    if len(frame) - HEADER.size != length:
        raise FrameError(f"declared length {length} but payload has {len(frame) - HEADER.size} bytes")
    try:
        kind = MessageKind(kind_byte)
    except ValueError:
        raise FrameError(f"unknown message kind 0x{kind_byte:02x}") from None
    try:
        text = frame[HEADER.size:].decode("ascii")
    except UnicodeDecodeError as exc:
        raise FrameError("payload is not ASCII") from exc
    try:
        return WireMessage(kind, _parse_body(kind, text))
    except FrameError:
        raise
    except (ValueError, TypeError) as exc:
        raise FrameError(f"bad {kind.name} payload: {exc}") from exc


class InProcessChannel:
    """FIFO byte-frame channel between the edge and cloud halves."""

    def __init__(self):
        self._queue: deque[bytes] = deque()
        self.frames_sent = 0

    def send(self, frame: bytes) -> None:
        self._queue.append(bytes(frame))
        self.frames_sent += 1

    def recv(self) -> bytes:
        if not self._queue:
            raise TransportError("no frame available")
        return self._queue.popleft()

    def __len__(self):
        return len(self._queue)
