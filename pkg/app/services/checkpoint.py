"""Binary parameter checkpoints.

Layout (little-endian)::

    b"TCC1"  u16 version  u32 record count
    per record: u32 name length, UTF-8 name, u32 rank, u64 extents[rank], f64 values
    8-byte BLAKE2b digest of every preceding byte
"""
import hashlib
import logging
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from app.core.exceptions import CheckpointError
from app.core.module import Module
from app.services.io_utils import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"TCC1"
FORMAT_VERSION = 1
DIGEST_SIZE = 8
_HEADER = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=DIGEST_SIZE).digest()


def encode_state(state: Dict[str, np.ndarray]) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(state))]
    for name, values in state.items():
        encoded = name.encode("utf-8")
        values = np.asarray(values, dtype="<f8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(values.ndim))
        parts.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        parts.append(np.ascontiguousarray(values).tobytes())
    payload = b"".join(parts)
    return payload + _digest(payload)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.payload):
            raise CheckpointError(f"checkpoint truncated at byte {self.offset}")
        chunk = self.payload[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_state(blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) < _HEADER.size + DIGEST_SIZE:
        raise CheckpointError(f"checkpoint too short ({len(blob)} bytes)")
    payload, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if _digest(payload) != digest:
        raise CheckpointError("checkpoint checksum mismatch")

    reader = _Reader(payload)
    magic, version, count = reader.unpack(_HEADER.format)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    state = {}
    for _ in range(count):
        (length,) = reader.unpack("<I")
        try:
            name = reader.take(length).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"parameter name at byte {reader.offset} is not UTF-8")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64)
        if name in state:
            raise CheckpointError(f"duplicate parameter record '{name}'")
        state[name] = values.reshape(shape)
    if reader.offset != len(payload):
        raise CheckpointError(f"{len(payload) - reader.offset} trailing bytes after the last record")
    return state


def save_checkpoint(model: Module, path: Path) -> Path:
    path = atomic_write_bytes(path, encode_state(model.state_dict()))
    logger.info(f"Saved checkpoint with {model.num_parameters()} parameters to {path}")
    return path


def load_checkpoint(model: Module, path: Path) -> Module:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    model.load_state_dict(decode_state(path.read_bytes()))
    logger.info(f"Loaded checkpoint {path}")
    return model
