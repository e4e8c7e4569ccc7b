"""Binary framing for the external predictor protocol.

Every frame is a fixed 29-byte little-endian header followed by the payload::

    offset size field
    0      4    magic        b"WSPR"
    4      2    version      u16 (PROTOCOL_VERSION)
    6      1    kind         u8: 0 request, 1 response, 2 error
    7      8    patch_id     u64
    15     2    classes      u16 (0 in requests)
    17     2    height       u16
    19     2    width        u16
    21     4    payload_len  u32
    25     4    crc32        u32, CRC-32 of the payload

Request payload is height*width*3 bytes of interleaved 8-bit RGB. Response
payload is classes*height*width little-endian float32 logits, class-major.
Error payload is a UTF-8 message. A frame with patch_id 0 and an empty
payload is the handshake: the client sends it as a request, the server
answers with a response whose classes/height/width carry its class count
and preferred input size.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch, ProtocolError
from ..scoremap import SCORE_DTYPE

MAGIC = b"WSPR"
PROTOCOL_VERSION = 1
HEADER = struct.Struct("<4sHBQHHHII")
HEADER_SIZE = HEADER.size

KIND_REQUEST = 0
KIND_RESPONSE = 1
KIND_ERROR = 2

HANDSHAKE_ID = 0
MAX_PAYLOAD = 1 << 31


@dataclass(frozen=True)
class Frame:
    kind: int
    patch_id: int
    classes: int = 0
    height: int = 0
    width: int = 0
    payload: bytes = b""
    version: int = PROTOCOL_VERSION

    @property
    def is_handshake(self) -> bool:
        return self.patch_id == HANDSHAKE_ID and self.kind != KIND_ERROR


def expected_payload_len(kind: int, classes: int, height: int, width: int,
                         patch_id: int = 1) -> int | None:
    if kind == KIND_ERROR:
        return None
    if patch_id == HANDSHAKE_ID:
        return 0
    if kind == KIND_REQUEST:
        return height * width * 3
    if kind == KIND_RESPONSE:
        return classes * height * width * 4
    return None


def encode_frame(frame: Frame) -> bytes:
    if frame.kind not in (KIND_REQUEST, KIND_RESPONSE, KIND_ERROR):
        raise ProtocolError(f"unknown frame kind {frame.kind}")
    want = expected_payload_len(frame.kind, frame.classes, frame.height, frame.width, frame.patch_id)
    if want is not None and len(frame.payload) != want:
        raise DimensionMismatch(f"payload of {len(frame.payload)} bytes, dimensions require {want}")
    header = HEADER.pack(MAGIC, frame.version, frame.kind, frame.patch_id, frame.classes,
                         frame.height, frame.width, len(frame.payload), zlib.crc32(frame.payload))
    return header + frame.payload


def parse_header(header: bytes) -> tuple[Frame, int, int]:
    """Decode a header; returns a payload-less frame, the payload length and the CRC."""
    if len(header) != HEADER_SIZE:
        raise ProtocolError(f"short header ({len(header)} bytes)")
    magic, version, kind, pid, classes, height, width, length, crc = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if kind not in (KIND_REQUEST, KIND_RESPONSE, KIND_ERROR):
        raise ProtocolError(f"unknown frame kind {kind}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds limit")
    want = expected_payload_len(kind, classes, height, width, pid)
    if want is not None and length != want:
        raise ProtocolError(f"declared payload length {length} does not match dimensions ({want})")
    return Frame(kind, pid, classes, height, width, b"", version), length, crc


def decode_frame(blob: bytes) -> Frame:
    head, length, crc = parse_header(blob[:HEADER_SIZE])
    payload = blob[HEADER_SIZE:]
    if len(payload) != length:
        raise ProtocolError(f"frame carries {len(payload)} payload bytes, header declares {length}")
    return _finish(head, payload, crc)


def _finish(head: Frame, payload: bytes, crc: int) -> Frame:
    if zlib.crc32(payload) != crc:
        raise ProtocolError(f"checksum mismatch on frame {head.patch_id}")
    return Frame(head.kind, head.patch_id, head.classes, head.height, head.width, payload, head.version)


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    while n:
        chunk = stream.read(n)
        if not chunk:
            raise EOFError("stream closed mid-frame" if chunks else "stream closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(stream) -> Frame:
    """Read one frame from a binary file-like object; EOFError on a clean close."""
    head_bytes = stream.read(HEADER_SIZE)
    if not head_bytes:
        raise EOFError("stream closed")
    if len(head_bytes) < HEADER_SIZE:
        head_bytes += _read_exact(stream, HEADER_SIZE - len(head_bytes))
    head, length, crc = parse_header(head_bytes)
    payload = _read_exact(stream, length) if length else b""
    return _finish(head, payload, crc)


def write_frame(stream, frame: Frame) -> None:
    stream.write(encode_frame(frame))
    stream.flush()


# ---------------------------------------------------------------------------
# payload helpers


def request_frame(patch_id: int, patch: np.ndarray) -> Frame:
    patch = np.asarray(patch)
    if patch.ndim == 2:
        patch = np.repeat(patch[..., None], 3, axis=2)
    if patch.ndim != 3 or patch.shape[2] != 3 or patch.dtype != np.uint8:
        raise DimensionMismatch(f"patch must be (H, W, 3) uint8, got {patch.shape} {patch.dtype}")
    h, w = patch.shape[:2]
    return Frame(KIND_REQUEST, patch_id, 0, h, w, np.ascontiguousarray(patch).tobytes())


def response_frame(patch_id: int, scores: np.ndarray) -> Frame:
    scores = np.asarray(scores)
    if scores.ndim != 3:
        raise DimensionMismatch(f"scores must be (C, H, W), got {scores.shape}")
    c, h, w = scores.shape
    return Frame(KIND_RESPONSE, patch_id, c, h, w, np.ascontiguousarray(scores, dtype="<f4").tobytes())


def hello_frame() -> Frame:
    return Frame(KIND_REQUEST, HANDSHAKE_ID)


def hello_reply(classes: int, input_size: int) -> Frame:
    return Frame(KIND_RESPONSE, HANDSHAKE_ID, classes, input_size, input_size)


def error_frame(patch_id: int, message: str) -> Frame:
    return Frame(KIND_ERROR, patch_id, payload=message.encode("utf-8"))


def frame_patch(frame: Frame) -> np.ndarray:
    return np.frombuffer(frame.payload, dtype=np.uint8).reshape(frame.height, frame.width, 3)


def frame_scores(frame: Frame) -> np.ndarray:
    data = np.frombuffer(frame.payload, dtype="<f4").reshape(frame.classes, frame.height, frame.width)
    return data.astype(SCORE_DTYPE)
