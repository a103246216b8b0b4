"""Wire Protocol - bit-exact serialisation of the compressed representation

Layout (all integers little-endian):

    offset  size  field
    0       4     magic        b"DVTN"
    4       1     version      1
    5       1     dtype_code   1 = float32 little-endian
    6       4     rows         T'
    10      4     cols         D
    14      8     payload_len  T'·D·4
    22      ...   payload      row-major float32

The payload is not quantised, so decode(encode(x)) reproduces x bit for bit.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ContractError, MagicError, TruncationError, UnsupportedDtypeError, VersionError
from .pooling import pooled_length
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"DVTN"
VERSION = 1
DTYPE_FLOAT32_LE = 1
DTYPE_CODES = {DTYPE_FLOAT32_LE: np.dtype("<f4")}

HEADER = struct.Struct("<4sBBIIQ")
HEADER_SIZE = HEADER.size  # 22

FIELD_OFFSETS = {
    "magic": 0,
    "version": 4,
    "dtype_code": 5,
    "rows": 6,
    "cols": 10,
    "payload_len": 14,
    "payload": HEADER_SIZE,
}


@dataclass(frozen=True)
class MessageHeader:
    magic: bytes
    version: int
    dtype_code: int
    rows: int
    cols: int
    payload_len: int

    @property
    def total_size(self) -> int:
        return HEADER_SIZE + self.payload_len


def encode_message(h: Tensor) -> bytes:
    """Serialise a 2-D (T'×D) tensor; total size is 22 + T'·D·4 bytes"""
    if h.ndim != 2:
        raise ContractError(f"only 2-D tensors cross the wire, got shape {h.shape}")
    rows, cols = h.shape
    payload = np.ascontiguousarray(h.data, dtype=DTYPE_CODES[DTYPE_FLOAT32_LE]).tobytes()
    header = HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32_LE, rows, cols, len(payload))
    return header + payload


def parse_header(message: bytes) -> MessageHeader:
    """Validate and unpack the fixed 22-byte header.

    Raises:
        TruncationError: fewer than 22 bytes, or payload_len inconsistent with rows/cols
        MagicError: the first four bytes are not b"DVTN"
        VersionError: version byte is not 1
        UnsupportedDtypeError: unknown dtype_code
    """
    if len(message) < HEADER_SIZE:
        raise TruncationError(
            f"message has {len(message)} bytes, header needs {HEADER_SIZE}",
            field="header",
            offset=len(message),
        )
    magic, version, dtype_code, rows, cols, payload_len = HEADER.unpack_from(message)
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {MAGIC!r}", field="magic", offset=0)
    if version != VERSION:
        raise VersionError(
            f"unsupported version {version}, expected {VERSION}", field="version", offset=FIELD_OFFSETS["version"]
        )
    if dtype_code not in DTYPE_CODES:
        raise UnsupportedDtypeError(
            f"unknown dtype_code {dtype_code}", field="dtype_code", offset=FIELD_OFFSETS["dtype_code"]
        )
    if rows == 0 or cols == 0:
        field_name = "rows" if rows == 0 else "cols"
        raise TruncationError(
            f"{field_name} must be positive", field=field_name, offset=FIELD_OFFSETS[field_name]
        )
    expected = rows * cols * DTYPE_CODES[dtype_code].itemsize
    if payload_len != expected:
        raise TruncationError(
            f"payload_len {payload_len} != rows·cols·4 = {expected}",
            field="payload_len",
            offset=FIELD_OFFSETS["payload_len"],
        )
    return MessageHeader(magic, version, dtype_code, rows, cols, payload_len)


def decode_message(message: bytes) -> Tensor:
    """Inverse of ``encode_message``.

    Raises:
        WireFormatError subclasses naming the offending field and its byte offset
    """
    header = parse_header(message)
    available = len(message) - HEADER_SIZE
    if available != header.payload_len:
        raise TruncationError(
            f"payload_len declares {header.payload_len} bytes but {available} follow the header",
            field="payload",
            offset=HEADER_SIZE + min(available, header.payload_len),
        )
    values = np.frombuffer(message, dtype=DTYPE_CODES[header.dtype_code], offset=HEADER_SIZE)
    return Tensor(values.reshape(header.rows, header.cols), dtype=np.float32)


def payload_checksum(message: bytes) -> str:
    """SHA-256 hex digest of the payload bytes"""
    return hashlib.sha256(message[HEADER_SIZE:]).hexdigest()


def message_size(rows: int, cols: int) -> int:
    return HEADER_SIZE + rows * cols * DTYPE_CODES[DTYPE_FLOAT32_LE].itemsize


def communication_bytes(length: int, stages: int, width: int) -> Tuple[int, int, float]:
    """Uplink size without and with ``stages`` halvings of the sequence.

    Returns:
        (uncompressed bytes, compressed bytes, ratio), header included in both
    """
    if length < 1 or stages < 0 or width < 1:
        raise ContractError(f"communication_bytes needs T >= 1, k >= 0, D >= 1; got {length}, {stages}, {width}")
    uncompressed = message_size(length, width)
    compressed = message_size(pooled_length(length, 2, stages), width)
    return uncompressed, compressed, uncompressed / compressed
