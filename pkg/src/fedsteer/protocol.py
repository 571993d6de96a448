"""Framed message codec for the cloud-robot exchange.

Every exchange is one frame: magic ``FILM`` | protocol version u16 LE |
message type u8 | payload length u32 LE | payload. Payloads carry only
identifiers, round counters and serialized model parameters; there is no
message type capable of carrying demonstrations or scenes, so raw data
cannot leak by construction.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

from .obs import ModalityId

FRAME_MAGIC = b"FILM"
PROTOCOL_VERSION = 1
HEADER_SIZE = 11  # magic + version + type + payload length

TYPE_HELLO = 1
TYPE_UPLOAD_PARAMS = 2
TYPE_ACK = 3
TYPE_REQUEST_GUIDE = 4
TYPE_GUIDE = 5
TYPE_ERROR = 6

# Error codes carried by Error replies.
ERR_UNSUPPORTED_TYPE = "unsupported_type"
ERR_BAD_FRAME = "bad_frame"
ERR_DUPLICATE_ROBOT = "duplicate_robot"
ERR_UNKNOWN_ROBOT = "unknown_robot"
ERR_STALE_UPLOAD = "stale_upload"
ERR_BAD_PARAMS = "bad_params"
ERR_NO_GUIDE = "no_guide_available"
ERR_NO_BANK = "no_bank"


class ProtocolError(ValueError):
    """Malformed frame; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnknownTypeError(ProtocolError):
    """Frame is well-formed but the message type code is unknown."""


@dataclass(frozen=True)
class Hello:
    robot_id: str
    modality: ModalityId


@dataclass(frozen=True)
class UploadParams:
    robot_id: str
    round: int
    params: bytes  # a serialized parameter file


@dataclass(frozen=True)
class Ack:
    round: int


@dataclass(frozen=True)
class RequestGuide:
    robot_id: str
    modality: ModalityId


@dataclass(frozen=True)
class Guide:
    params: bytes
    fusion_round: int


@dataclass(frozen=True)
class Error:
    code: str
    text: str = ""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for the wire")
    return struct.pack("<H", len(raw)) + raw


def _pack_bytes(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _payload(msg) -> tuple[int, bytes]:
    if isinstance(msg, Hello):
        return TYPE_HELLO, _pack_str(msg.robot_id) + struct.pack(
            "<B", int(msg.modality))
    if isinstance(msg, UploadParams):
        return TYPE_UPLOAD_PARAMS, (_pack_str(msg.robot_id)
                                    + struct.pack("<I", msg.round)
                                    + _pack_bytes(msg.params))
    if isinstance(msg, Ack):
        return TYPE_ACK, struct.pack("<I", msg.round)
    if isinstance(msg, RequestGuide):
        return TYPE_REQUEST_GUIDE, _pack_str(msg.robot_id) + struct.pack(
            "<B", int(msg.modality))
    if isinstance(msg, Guide):
        return TYPE_GUIDE, struct.pack("<I", msg.fusion_round) + _pack_bytes(
            msg.params)
    if isinstance(msg, Error):
        return TYPE_ERROR, _pack_str(msg.code) + _pack_str(msg.text)
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def encode(msg) -> bytes:
    """One message to one frame."""
    mtype, payload = _payload(msg)
    return (FRAME_MAGIC
            + struct.pack("<HBI", PROTOCOL_VERSION, mtype, len(payload))
            + payload)


class _Reader:
    def __init__(self, data: bytes, base: int):
        self.data = data
        self.pos = 0
        self.base = base  # offset of this payload within the frame

    def _need(self, count: int, what: str):
        if self.pos + count > len(self.data):
            raise ProtocolError(f"payload truncated reading {what}",
                                self.base + self.pos)

    def u8(self, what="u8") -> int:
        self._need(1, what)
        v = self.data[self.pos]
        self.pos += 1
        return v

    def u32(self, what="u32") -> int:
        self._need(4, what)
        (v,) = struct.unpack_from("<I", self.data, self.pos)
        self.pos += 4
        return v

    def string(self, what="string") -> str:
        self._need(2, what)
        (n,) = struct.unpack_from("<H", self.data, self.pos)
        self.pos += 2
        self._need(n, what)
        raw = self.data[self.pos:self.pos + n]
        self.pos += n
        return raw.decode("utf-8")

    def blob(self, what="bytes") -> bytes:
        n = self.u32(what)
        self._need(n, what)
        raw = self.data[self.pos:self.pos + n]
        self.pos += n
        return raw

    def modality(self) -> ModalityId:
        tag = self.u8("modality")
        try:
            return ModalityId(tag)
        except ValueError:
            raise ProtocolError(f"unknown modality tag {tag}",
                                self.base + self.pos - 1) from None

    def done(self):
        if self.pos != len(self.data):
            raise ProtocolError(
                f"{len(self.data) - self.pos} unconsumed payload bytes",
                self.base + self.pos)


def decode(frame: bytes):
    """One frame back to one message.

    Raises ProtocolError on bad magic, truncation, length mismatch or
    unconsumed bytes, and UnknownTypeError for unrecognized type codes.
    """
    if len(frame) < HEADER_SIZE:
        raise ProtocolError("frame shorter than header", len(frame))
    if frame[:4] != FRAME_MAGIC:
        raise ProtocolError(f"bad frame magic {frame[:4]!r}", 0)
    version, mtype, length = struct.unpack_from("<HBI", frame, 4)
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}", 4)
    if HEADER_SIZE + length != len(frame):
        raise ProtocolError(
            f"declared payload length {length} != actual "
            f"{len(frame) - HEADER_SIZE}", 7)
    r = _Reader(frame[HEADER_SIZE:], HEADER_SIZE)
    if mtype == TYPE_HELLO:
        msg = Hello(robot_id=r.string("robot_id"), modality=r.modality())
    elif mtype == TYPE_UPLOAD_PARAMS:
        msg = UploadParams(robot_id=r.string("robot_id"),
                           round=r.u32("round"), params=r.blob("params"))
    elif mtype == TYPE_ACK:
        msg = Ack(round=r.u32("round"))
    elif mtype == TYPE_REQUEST_GUIDE:
        msg = RequestGuide(robot_id=r.string("robot_id"),
                           modality=r.modality())
    elif mtype == TYPE_GUIDE:
        fusion_round = r.u32("fusion_round")
        msg = Guide(params=r.blob("params"), fusion_round=fusion_round)
    elif mtype == TYPE_ERROR:
        msg = Error(code=r.string("code"), text=r.string("text"))
    else:
        raise UnknownTypeError(f"unknown message type {mtype:#x}", 6)
    r.done()
    return msg
