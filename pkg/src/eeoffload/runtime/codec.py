"""Wire format for edge -> cloud offload requests and their responses.

Every frame is ``u32 length`` (bytes that follow) then::

    magic "EOFF" | u32 version | u8 message type | body

All integers are little-endian. Tensors are ``u32 ndim``, ``u32`` dims and
f32 little-endian data. Confidences and ``p_tar`` travel as f64 so a
decoded request reproduces the sender's exit decisions bit for bit.

Request body: ``u16 len + utf-8 model_id | u8 kind code | u32 partition
point | f64 p_tar | u32 n, then n x (u32 exit, u32 class, f64 conf) |
tensor``.

Response body: ``u32 class | f64 conf | u8 exit code | u32 exit id | u8
offloaded | records as above | f64 cloud_compute_ms``.

Error body: ``u16 code | u16 len + utf-8 message``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..distortion import Kind
from ..errors import EEOffloadError
from ..model import BranchRecord, ExitTaken, InferenceResult

MAGIC = b"EOFF"
PROTOCOL_VERSION = 1

MSG_REQUEST = 1
MSG_RESPONSE = 2
MSG_ERROR = 3

ERR_BAD_REQUEST = 1
ERR_UNKNOWN_MODEL = 2
ERR_SHAPE = 3
ERR_INTERNAL = 4

_EXIT_CODES = {ExitTaken.SIDE: 0, ExitTaken.FINAL: 1, ExitTaken.FALLBACK: 2}
_U8, _U16, _U32, _F64 = (struct.Struct(f) for f in ("<B", "<H", "<I", "<d"))
_RECORD = struct.Struct("<IId")
_PREFIX = struct.Struct("<I4sIB")


class CodecError(EEOffloadError, ValueError):
    pass


class BadMagicError(CodecError):
    def __init__(self, got: bytes):
        self.got = got
        super().__init__(f"bad frame magic {got!r}, expected {MAGIC!r}")


class VersionMismatchError(CodecError):
    def __init__(self, got: int, expected: int = PROTOCOL_VERSION):
        self.got, self.expected = got, expected
        super().__init__(f"protocol version mismatch: frame has version {got}, this build speaks {expected}")


class TruncatedFrameError(CodecError):
    pass


class FrameLengthError(CodecError):
    """Declared lengths or shapes disagree with the bytes present."""


class RemoteError(EEOffloadError):
    """Structured error returned by the peer."""

    def __init__(self, code: int, message: str):
        self.code, self.message = code, message
        super().__init__(f"remote error {code}: {message}")


@dataclass(frozen=True)
class OffloadRequest:
    model_id: str
    kind: Kind
    partition_point: int
    payload: np.ndarray
    per_branch: tuple[BranchRecord, ...]
    p_tar: float
    protocol_version: int = PROTOCOL_VERSION

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "per_branch", tuple(self.per_branch))
        arr = np.ascontiguousarray(self.payload, dtype="<f4")
        object.__setattr__(self, "payload", arr)
        _check_records(self.per_branch)
        if not 0.0 <= self.p_tar <= 1.0:
            raise ValueError(f"p_tar {self.p_tar} outside [0, 1]")


@dataclass(frozen=True)
class OffloadResponse:
    result: InferenceResult
    cloud_compute_ms: float


def _check_records(records):
    for r in records:
        if not 0.0 <= r.confidence <= 1.0:
            raise ValueError(f"confidence {r.confidence} outside [0, 1]")


# --- writing ------------------------------------------------------------------

def _frame(msg_type: int, body: bytes, version: int = PROTOCOL_VERSION) -> bytes:
    inner = _PREFIX.pack(0, MAGIC, version, msg_type)[4:] + body
    return _U32.pack(len(inner)) + inner


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string field too long")
    return _U16.pack(len(raw)) + raw


def _pack_records(records) -> bytes:
    return _U32.pack(len(records)) + b"".join(
        _RECORD.pack(r.exit_id, r.predicted_class, r.confidence) for r in records)


def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return _U32.pack(arr.ndim) + b"".join(_U32.pack(d) for d in arr.shape) + arr.tobytes()


def encode_request(req: OffloadRequest) -> bytes:
    body = (_pack_str(req.model_id) + _U8.pack(req.kind.code) + _U32.pack(req.partition_point)
            + _F64.pack(req.p_tar) + _pack_records(req.per_branch) + _pack_tensor(req.payload))
    return _frame(MSG_REQUEST, body, req.protocol_version)


def encode_response(resp: OffloadResponse) -> bytes:
    r = resp.result
    _check_records(r.per_branch)
    body = (_U32.pack(r.predicted_class) + _F64.pack(r.confidence) + _U8.pack(_EXIT_CODES[r.exit_taken])
            + _U32.pack(r.exit_id) + _U8.pack(int(r.offloaded)) + _pack_records(r.per_branch)
            + _F64.pack(resp.cloud_compute_ms))
    return _frame(MSG_RESPONSE, body)


def encode_error(code: int, message: str) -> bytes:
    return _frame(MSG_ERROR, _U16.pack(code) + _pack_str(message))


# --- reading ------------------------------------------------------------------

class _Reader:
    def __init__(self, buf: memoryview, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FrameLengthError(f"field at offset {self.pos} needs {n} bytes, frame has {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))[0]

    def string(self) -> str:
        return bytes(self.take(self.unpack(_U16))).decode("utf-8")

    def records(self) -> tuple[BranchRecord, ...]:
        n = self.unpack(_U32)
        out = []
        for _ in range(n):
            e, c, conf = _RECORD.unpack(self.take(_RECORD.size))
            if not 0.0 <= conf <= 1.0:
                raise FrameLengthError(f"confidence {conf} outside [0, 1]")
            out.append(BranchRecord(e, c, conf))
        return tuple(out)

    def tensor(self) -> np.ndarray:
        ndim = self.unpack(_U32)
        if ndim > 8:
            raise FrameLengthError(f"implausible tensor rank {ndim}")
        dims = tuple(self.unpack(_U32) for _ in range(ndim))
        count = int(np.prod(dims, dtype=np.int64))
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()

    def done(self):
        if self.pos != len(self.buf):
            raise FrameLengthError(f"{len(self.buf) - self.pos} unexpected trailing bytes in frame")


def frame_length(prefix: bytes) -> int:
    """Byte count that follows a 4-byte length prefix."""
    if len(prefix) < 4:
        raise TruncatedFrameError(f"need 4 bytes of length prefix, got {len(prefix)}")
    return _U32.unpack(prefix[:4])[0]


def _open(buf: bytes, expect: tuple[int, ...]) -> tuple[int, _Reader]:
    view = memoryview(bytes(buf))
    n = frame_length(view)
    if len(view) - 4 < n:
        raise TruncatedFrameError(f"frame declares {n} bytes, only {len(view) - 4} present")
    if len(view) - 4 > n:
        raise FrameLengthError(f"{len(view) - 4 - n} bytes beyond the declared frame length")
    if n < _PREFIX.size - 4:
        raise TruncatedFrameError("frame too short for its header")
    _, magic, version, msg = _PREFIX.unpack(view[:_PREFIX.size])
    if magic != MAGIC:
        raise BadMagicError(bytes(magic))
    if version != PROTOCOL_VERSION:
        raise VersionMismatchError(version)
    if msg == MSG_ERROR and MSG_ERROR not in expect:
        rd = _Reader(view, _PREFIX.size)
        code = rd.unpack(_U16)
        raise RemoteError(code, rd.string())
    if msg not in expect:
        raise CodecError(f"unexpected message type {msg}, wanted one of {expect}")
    return msg, _Reader(view, _PREFIX.size)


def decode_request(buf: bytes) -> OffloadRequest:
    _, rd = _open(buf, (MSG_REQUEST,))
    model_id = rd.string()
    kind = Kind.from_code(rd.unpack(_U8))
    partition_point = rd.unpack(_U32)
    p_tar = rd.unpack(_F64)
    records = rd.records()
    payload = rd.tensor()
    rd.done()
    if not 0.0 <= p_tar <= 1.0:
        raise FrameLengthError(f"p_tar {p_tar} outside [0, 1]")
    return OffloadRequest(model_id, kind, partition_point, payload, records, p_tar)


def decode_response(buf: bytes) -> OffloadResponse:
    """Decode a response frame; an error frame raises :class:`RemoteError`."""
    _, rd = _open(buf, (MSG_RESPONSE,))
    cls = rd.unpack(_U32)
    conf = rd.unpack(_F64)
    code = rd.unpack(_U8)
    taken = next((k for k, v in _EXIT_CODES.items() if v == code), None)
    if taken is None:
        raise CodecError(f"unknown exit code {code}")
    exit_id = rd.unpack(_U32)
    offloaded = bool(rd.unpack(_U8))
    records = rd.records()
    compute_ms = rd.unpack(_F64)
    rd.done()
    return OffloadResponse(InferenceResult(cls, conf, taken, exit_id, records, offloaded), compute_ms)


def decode_error(buf: bytes) -> RemoteError:
    _, rd = _open(buf, (MSG_ERROR,))
    code = rd.unpack(_U16)
    err = RemoteError(code, rd.string())
    rd.done()
    return err
