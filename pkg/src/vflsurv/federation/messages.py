"""Protocol messages and their bit-exact wire encoding.

Frame layout (all little-endian):

    magic "BVFM" | version u8=1 | type u8 | round u32 | client u16
    | subject-count u32 | subject ids (u64 each) | rows u32 | cols u32
    | payload (IEEE-754 f32, row-major) | crc32 of all prior bytes (u32)

Types: 0x01 embedding rows, 0x02 gradient rows, 0x03 control,
0x04 client-KL scalar.  An embedding message is one 0x01 frame followed by
one 0x04 frame carrying its KL value; gradient and control messages are a
single frame.  Payloads travel as 32-bit floats: that down-conversion is
the declared precision boundary of the socket transport (the in-process
transport hands over full-precision arrays and never serializes).

Control payload: [code, d0..d7] where code 0=start 1=stop 2=ack and
d0..d7 are the 128-bit config digest split into eight u16 chunks (each
exactly representable as f32).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

__all__ = ["MAGIC", "VERSION", "TYPE_EMBEDDING", "TYPE_GRADIENT",
           "TYPE_CONTROL", "TYPE_KL", "CONTROL_CODES", "Frame", "DecodeError",
           "EmbeddingMessage", "GradientMessage", "ControlMessage",
           "encode_frame", "decode_frame", "encode_message", "decode_message"]

MAGIC = b"BVFM"
VERSION = 1
TYPE_EMBEDDING = 0x01
TYPE_GRADIENT = 0x02
TYPE_CONTROL = 0x03
TYPE_KL = 0x04

CONTROL_CODES = {"start": 0, "stop": 1, "ack": 2}
_CODE_NAMES = {v: k for k, v in CONTROL_CODES.items()}


class DecodeError(ValueError):
    """Malformed frame; the message names the byte offset of the problem."""


@dataclass(frozen=True)
class Frame:
    ftype: int
    round: int
    client: int
    subjects: tuple[int, ...]
    payload: np.ndarray  # float32, shape (rows, cols)


@dataclass(frozen=True)
class EmbeddingMessage:
    round: int
    client: int
    subjects: tuple[int, ...]
    rows: np.ndarray           # (len(subjects), embed_dim) float64
    kl: float = 0.0

    def __post_init__(self):
        if self.rows.shape[0] != len(self.subjects):
            raise ValueError("row count must equal subject count")


@dataclass(frozen=True)
class GradientMessage:
    round: int
    client: int
    subjects: tuple[int, ...]
    rows: np.ndarray

    def __post_init__(self):
        if self.rows.shape[0] != len(self.subjects):
            raise ValueError("row count must equal subject count")


@dataclass(frozen=True)
class ControlMessage:
    kind: str                  # "start" | "stop" | "ack"
    client: int = 0
    round: int = 0
    digest: str = "0" * 32     # 128-bit hex config digest

    def __post_init__(self):
        if self.kind not in CONTROL_CODES:
            raise ValueError(f"unknown control kind {self.kind!r}")
        if len(self.digest) != 32:
            raise ValueError("digest must be 32 hex characters")
        int(self.digest, 16)


def encode_frame(ftype: int, round_no: int, client: int, subjects,
                 payload: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(payload, dtype="<f4")
    if payload.ndim != 2:
        raise ValueError("payload must be 2-D")
    parts = [MAGIC,
             struct.pack("<BBIH", VERSION, ftype, round_no, client),
             struct.pack("<I", len(subjects))]
    for sid in subjects:
        parts.append(struct.pack("<Q", int(sid)))
    parts.append(struct.pack("<II", payload.shape[0], payload.shape[1]))
    parts.append(payload.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_frame(buf: bytes, offset: int = 0) -> tuple[Frame, int]:
    def need(k, what):
        if offset_ + k > len(buf):
            raise DecodeError(f"truncated {what} at byte {offset_}")

    offset_ = offset
    need(4, "magic")
    if buf[offset_:offset_ + 4] != MAGIC:
        raise DecodeError(f"bad magic at byte {offset_}")
    offset_ += 4
    need(8, "header")
    version, ftype, round_no, client = struct.unpack_from("<BBIH", buf, offset_)
    offset_ += 8
    if version != VERSION:
        raise DecodeError(f"unsupported version {version} at byte {offset + 4}")
    need(4, "subject count")
    (n_subj,) = struct.unpack_from("<I", buf, offset_)
    offset_ += 4
    need(8 * n_subj, "subject ids")
    subjects = struct.unpack_from(f"<{n_subj}Q", buf, offset_) if n_subj else ()
    offset_ += 8 * n_subj
    need(8, "payload shape")
    rows, cols = struct.unpack_from("<II", buf, offset_)
    offset_ += 8
    need(4 * rows * cols, "payload")
    payload = np.frombuffer(buf, dtype="<f4", count=rows * cols,
                            offset=offset_).reshape(rows, cols).copy()
    offset_ += 4 * rows * cols
    need(4, "checksum")
    (crc_stored,) = struct.unpack_from("<I", buf, offset_)
    crc_actual = zlib.crc32(buf[offset:offset_]) & 0xFFFFFFFF
    offset_ += 4
    if crc_stored != crc_actual:
        raise DecodeError(f"checksum mismatch at byte {offset_ - 4}")
    return Frame(ftype=ftype, round=round_no, client=client,
                 subjects=tuple(int(s) for s in subjects),
                 payload=payload), offset_


def _digest_payload(code: int, digest: str) -> np.ndarray:
    chunks = [int(digest[i:i + 4], 16) for i in range(0, 32, 4)]
    return np.array([[float(code)] + [float(c) for c in chunks]], dtype="<f4")


def _digest_from_payload(payload: np.ndarray) -> tuple[int, str]:
    row = payload.reshape(-1)
    if row.size != 9:
        raise DecodeError("control payload must have 9 entries")
    code = int(row[0])
    digest = "".join(f"{int(v):04x}" for v in row[1:])
    return code, digest


def encode_message(msg) -> bytes:
    if isinstance(msg, EmbeddingMessage):
        emb = encode_frame(TYPE_EMBEDDING, msg.round, msg.client, msg.subjects,
                           msg.rows)
        kl = encode_frame(TYPE_KL, msg.round, msg.client, (),
                          np.array([[msg.kl]], dtype="<f4"))
        return emb + kl
    if isinstance(msg, GradientMessage):
        return encode_frame(TYPE_GRADIENT, msg.round, msg.client, msg.subjects,
                            msg.rows)
    if isinstance(msg, ControlMessage):
        payload = _digest_payload(CONTROL_CODES[msg.kind], msg.digest)
        return encode_frame(TYPE_CONTROL, msg.round, msg.client, (), payload)
    raise TypeError(f"cannot encode {type(msg).__name__}")


def decode_message(buf: bytes):
    """Parse exactly one logical message; trailing bytes are an error."""
    frame, offset = decode_frame(buf, 0)
    if frame.ftype == TYPE_EMBEDDING:
        kl_frame, offset = decode_frame(buf, offset)
        if kl_frame.ftype != TYPE_KL:
            raise DecodeError("embedding frame must be followed by its KL frame")
        if (kl_frame.round, kl_frame.client) != (frame.round, frame.client):
            raise DecodeError("KL frame round/client mismatch")
        msg = EmbeddingMessage(round=frame.round, client=frame.client,
                               subjects=frame.subjects,
                               rows=frame.payload.astype(np.float64),
                               kl=float(kl_frame.payload[0, 0]))
    elif frame.ftype == TYPE_GRADIENT:
        msg = GradientMessage(round=frame.round, client=frame.client,
                              subjects=frame.subjects,
                              rows=frame.payload.astype(np.float64))
    elif frame.ftype == TYPE_CONTROL:
        code, digest = _digest_from_payload(frame.payload)
        if code not in _CODE_NAMES:
            raise DecodeError(f"unknown control code {code}")
        msg = ControlMessage(kind=_CODE_NAMES[code], client=frame.client,
                             round=frame.round, digest=digest)
    elif frame.ftype == TYPE_KL:
        raise DecodeError("stray KL frame without its embedding frame")
    else:
        raise DecodeError(f"unknown frame type 0x{frame.ftype:02x}")
    if offset != len(buf):
        raise DecodeError(f"trailing bytes after message at byte {offset}")
    return msg
