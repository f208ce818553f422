"""Wire protocol: length-prefixed JSON frames carrying envelopes.

A frame is a 4-byte big-endian body length followed by a UTF-8 JSON
object. The JSON form is compact (no whitespace); decoding an encoded
envelope gives back an equal envelope.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from typing import Any

PROTOCOL_VERSION = 1
HEADER_SIZE = 4
MAX_BODY_SIZE = 16 * 1024 * 1024
MAX_ID = 2**64 - 1

HELLO = "HELLO"
BYE = "BYE"
ADV = "ADV"
SUB = "SUB"
UNSUB = "UNSUB"
PUB = "PUB"
SRV_REG = "SRV_REG"
SRV_CALL = "SRV_CALL"
SRV_REP = "SRV_REP"
ERR = "ERR"

OPS = frozenset({HELLO, BYE, ADV, SUB, UNSUB, PUB, SRV_REG, SRV_CALL, SRV_REP, ERR})
# ops that must name a channel
CHANNEL_OPS = frozenset({ADV, SUB, UNSUB, PUB, SRV_REG, SRV_CALL})

_CHANNEL_RE = re.compile(r"[a-z0-9_/]+")


class FrameError(Exception):
    pass


class IncompleteFrame(FrameError):
    """Not enough bytes buffered yet; the caller may wait for more."""


class ProtocolError(FrameError):
    """Malformed frame or envelope. The broker drops the connection."""


class EncodeError(FrameError):
    pass


def valid_channel(ch: str) -> bool:
    return isinstance(ch, str) and _CHANNEL_RE.fullmatch(ch) is not None


@dataclass(frozen=True)
class Envelope:
    op: str
    ch: str = ""
    id: int = 0
    src: str = ""
    data: Any = None
    v: int = PROTOCOL_VERSION

    def check(self) -> None:
        """Raise ProtocolError if the envelope breaks a protocol invariant."""
        if self.v != PROTOCOL_VERSION or isinstance(self.v, bool):
            raise ProtocolError(f"unsupported protocol version {self.v!r}")
        if self.op not in OPS:
            raise ProtocolError(f"unknown op {self.op!r}")
        if not isinstance(self.ch, str):
            raise ProtocolError("ch must be a string")
        if self.op in CHANNEL_OPS or self.ch:
            if not valid_channel(self.ch):
                raise ProtocolError(f"invalid channel {self.ch!r} for {self.op}")
        if isinstance(self.id, bool) or not isinstance(self.id, int) or not 0 <= self.id <= MAX_ID:
            raise ProtocolError(f"id must be an unsigned 64-bit integer, got {self.id!r}")
        if not isinstance(self.src, str):
            raise ProtocolError("src must be a string")

    def to_dict(self) -> dict:
        return {"v": self.v, "op": self.op, "ch": self.ch, "id": self.id,
                "src": self.src, "data": self.data}

    @classmethod
    def from_dict(cls, obj: dict) -> "Envelope":
        if not isinstance(obj, dict):
            raise ProtocolError("frame body must be a JSON object")
        missing = {"v", "op"} - obj.keys()
        if missing:
            raise ProtocolError(f"envelope missing fields: {sorted(missing)}")
        env = cls(op=obj["op"], ch=obj.get("ch", ""), id=obj.get("id", 0),
                  src=obj.get("src", ""), data=obj.get("data"), v=obj["v"])
        env.check()
        return env


def encode_body(env: Envelope) -> bytes:
    env.check()
    try:
        text = json.dumps(env.to_dict(), separators=(",", ":"), ensure_ascii=False,
                          allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise EncodeError(f"envelope data is not JSON-representable: {exc}") from exc
    return text.encode("utf-8")


def encode_frame(env: Envelope) -> bytes:
    body = encode_body(env)
    if len(body) > MAX_BODY_SIZE:
        raise EncodeError(f"frame body of {len(body)} bytes exceeds {MAX_BODY_SIZE}")
    return struct.pack(">I", len(body)) + body


def decode_body(body: bytes) -> Envelope:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(f"invalid JSON body: {exc}") from exc
    return Envelope.from_dict(obj)


def decode_frame(buf: bytes | bytearray | memoryview) -> tuple[Envelope, int]:
    """Decode one frame from the start of ``buf``.

    Returns the envelope and the number of bytes consumed (4 + length).
    """
    if len(buf) < HEADER_SIZE:
        raise IncompleteFrame(f"need {HEADER_SIZE} header bytes, have {len(buf)}")
    (length,) = struct.unpack_from(">I", buf, 0)
    if length > MAX_BODY_SIZE:
        raise ProtocolError(f"frame length {length} exceeds {MAX_BODY_SIZE}")
    end = HEADER_SIZE + length
    if len(buf) < end:
        raise IncompleteFrame(f"frame claims {length} body bytes, have {len(buf) - HEADER_SIZE}")
    return decode_body(bytes(buf[HEADER_SIZE:end])), end


@dataclass
class FrameDecoder:
    """Incremental decoder for a byte stream."""

    _buf: bytearray = field(default_factory=bytearray)

    def feed(self, data: bytes) -> list[Envelope]:
        self._buf.extend(data)
        out = []
        while True:
            try:
                env, used = decode_frame(self._buf)
            except IncompleteFrame:
                return out
            del self._buf[:used]
            out.append(env)

    @property
    def pending(self) -> int:
        return len(self._buf)
