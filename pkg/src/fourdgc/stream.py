"""Frame container: keyframes and inter-frames as sequences of typed blocks.

Record layout (all integers little-endian)::

    "4DGC" | version u8 | frame_type u8 | frame_index u32 | block_count u8 | blocks

The low nibble of ``frame_type`` is 0 (key) or 1 (inter); bit 0x10 marks an
inter-frame without compensated Gaussians. Coded blocks are
``id u8 | q f32 | offset i32 | table | payload_len u32 | payload`` and raw
blocks are ``id u8 | payload_len u32 | f32 values``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .entropy import SymbolTable

MAGIC = b"4DGC"
VERSION = 1

KEYFRAME = 0
INTERFRAME = 1
FLAG_EMPTY_DELTA = 0x10

# block ids
KEY_SH = 0x01
KEY_ATTRS = 0x02
MLP_MU = 0x03
MLP_R = 0x04
LAYOUT = 0x05
GRID = 0x10  # every grid level, concatenated
MAX_LEVELS = 16
DELTA_SH = 0x20
DELTA_ATTRS = 0x21

CODED_IDS = frozenset({KEY_SH, GRID, DELTA_SH})
RAW_IDS = frozenset({KEY_ATTRS, MLP_MU, MLP_R, LAYOUT, DELTA_ATTRS})

_FRAME_HEADER = struct.Struct("<4sBBIB")
_CODED_HEADER = struct.Struct("<Bfi")
_U32 = struct.Struct("<I")


class StreamFormatError(ValueError):
    pass


@dataclass
class CodedBlock:
    block_id: int
    q: float
    offset: int
    table: SymbolTable
    payload: bytes

    def to_bytes(self) -> bytes:
        return (
            _CODED_HEADER.pack(self.block_id, self.q, self.offset)
            + self.table.to_bytes()
            + _U32.pack(len(self.payload))
            + self.payload
        )


@dataclass
class RawBlock:
    block_id: int
    values: np.ndarray  # float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)

    def to_bytes(self) -> bytes:
        data = self.values.astype("<f4").tobytes()
        return struct.pack("<B", self.block_id) + _U32.pack(len(data)) + data


@dataclass
class FrameBitstream:
    frame_type: int
    frame_index: int
    blocks: list = field(default_factory=list)
    empty_delta: bool = False

    def __post_init__(self):
        if self.frame_type not in (KEYFRAME, INTERFRAME):
            raise StreamFormatError(f"unknown frame type {self.frame_type}")
        if not 1 <= self.frame_index < 2**32:
            raise StreamFormatError("frame index out of range")

    @property
    def is_key(self) -> bool:
        return self.frame_type == KEYFRAME

    def block(self, block_id: int):
        for b in self.blocks:
            if b.block_id == block_id:
                return b
        return None

    def require(self, block_id: int):
        b = self.block(block_id)
        if b is None:
            raise StreamFormatError(f"frame {self.frame_index} lacks block 0x{block_id:02x}")
        return b

    def to_bytes(self) -> bytes:
        if len(self.blocks) > 255:
            raise StreamFormatError("too many blocks in one frame")
        ids = [b.block_id for b in self.blocks]
        if len(set(ids)) != len(ids):
            raise StreamFormatError("duplicate block id")
        type_byte = self.frame_type | (FLAG_EMPTY_DELTA if self.empty_delta else 0)
        head = _FRAME_HEADER.pack(MAGIC, VERSION, type_byte, self.frame_index, len(self.blocks))
        return head + b"".join(b.to_bytes() for b in self.blocks)

    def byte_size(self) -> int:
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, pos: int = 0) -> tuple["FrameBitstream", int]:
        if len(data) - pos < _FRAME_HEADER.size:
            raise StreamFormatError("truncated frame header")
        magic, version, type_byte, index, n_blocks = _FRAME_HEADER.unpack_from(data, pos)
        if magic != MAGIC:
            raise StreamFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise StreamFormatError(f"unsupported version {version}")
        if type_byte & ~(0x0F | FLAG_EMPTY_DELTA):
            raise StreamFormatError(f"unknown frame flags 0x{type_byte:02x}")
        frame_type = type_byte & 0x0F
        empty = bool(type_byte & FLAG_EMPTY_DELTA)
        if frame_type == KEYFRAME and empty:
            raise StreamFormatError("empty-delta flag on a keyframe")
        pos += _FRAME_HEADER.size
        blocks = []
        for _ in range(n_blocks):
            block, pos = _read_block(data, pos)
            blocks.append(block)
        ids = [b.block_id for b in blocks]
        if len(set(ids)) != len(ids):
            raise StreamFormatError("duplicate block id")
        if frame_type not in (KEYFRAME, INTERFRAME):
            raise StreamFormatError(f"unknown frame type {frame_type}")
        return cls(frame_type, index, blocks, empty), pos


def _need(data: bytes, pos: int, n: int, what: str) -> None:
    if len(data) - pos < n:
        raise StreamFormatError(f"truncated {what}")


def _read_block(data: bytes, pos: int):
    _need(data, pos, 1, "block id")
    block_id = data[pos]
    if block_id in CODED_IDS:
        _need(data, pos, _CODED_HEADER.size, "coded block header")
        _, q, offset = _CODED_HEADER.unpack_from(data, pos)
        if not (np.isfinite(q) and q > 0):
            raise StreamFormatError(f"invalid quantisation step {q}")
        pos += _CODED_HEADER.size
        try:
            table, pos = SymbolTable.from_bytes(data, pos)
        except ValueError as exc:
            raise StreamFormatError(str(exc)) from exc
        _need(data, pos, 4, "payload length")
        (n,) = _U32.unpack_from(data, pos)
        pos += 4
        _need(data, pos, n, "coded payload")
        return CodedBlock(block_id, float(q), offset, table, bytes(data[pos : pos + n])), pos + n
    if block_id in RAW_IDS:
        _need(data, pos, 5, "raw block header")
        (n,) = _U32.unpack_from(data, pos + 1)
        pos += 5
        if n % 4:
            raise StreamFormatError("raw block length is not a multiple of 4")
        _need(data, pos, n, "raw payload")
        values = np.frombuffer(data[pos : pos + n], dtype="<f4").astype(np.float32)
        return RawBlock(block_id, values), pos + n
    raise StreamFormatError(f"unknown block id 0x{block_id:02x}")


def encode_frames(frames) -> bytes:
    frames = list(frames)
    _check_sequence(frames)
    return b"".join(f.to_bytes() for f in frames)


def _check_sequence(frames) -> None:
    if not frames:
        return
    if not frames[0].is_key:
        raise StreamFormatError("stream must start with a keyframe")
    for a, b in zip(frames, frames[1:]):
        if b.frame_index <= a.frame_index:
            raise StreamFormatError("frame indices must increase along the stream")


def decode_frames(data: bytes) -> list[FrameBitstream]:
    frames, pos = [], 0
    while pos < len(data):
        frame, pos = FrameBitstream.from_bytes(data, pos)
        frames.append(frame)
    _check_sequence(frames)
    return frames


def frame_sizes(frames) -> list[int]:
    """Bytes per frame record, as stored on disk."""
    return [f.byte_size() for f in frames]


def write_stream(frames, sink) -> int:
    """Write frames to a path or binary file object; returns the byte count."""
    data = encode_frames(frames)
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        Path(sink).write_bytes(data)
    return len(data)


def read_stream(source) -> list[FrameBitstream]:
    data = source.read() if hasattr(source, "read") else Path(source).read_bytes()
    return decode_frames(data)
