"""
Binary checkpoint codec.

Layout (all little-endian):
    magic "WEGA1" | u32 tensor count |
    per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims, float64 payload |
    u32 metadata length, UTF-8 JSON metadata (config echo, seed, extras)

The metadata trailer is optional when reading.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from config import CHECKPOINT_MAGIC

logger = logging.getLogger(__name__)


class CheckpointError(Exception):
    """Custom exception for unreadable or incompatible checkpoints"""
    pass


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {count} bytes at offset {self.offset}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.data)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(checkpoint.tensors))]
    for name in sorted(checkpoint.tensors):
        values = np.asarray(checkpoint.tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if values.ndim > 0xFF:
            raise CheckpointError(f"tensor {name} has too many axes")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(np.ascontiguousarray(values).tobytes())

    metadata = {"config": checkpoint.config, "seed": checkpoint.seed, "extra": checkpoint.extra}
    blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointError: on a bad magic, truncation or a malformed trailer
    """
    reader = _Reader(data)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a WeGA checkpoint (bad magic)")
    (count,) = reader.unpack("<I")

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        try:
            name = reader.take(name_length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor name is not UTF-8: {e}") from e
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        payload = reader.take(8 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)

    checkpoint = Checkpoint(tensors=tensors)
    if reader.exhausted:
        return checkpoint

    (length,) = reader.unpack("<I")
    try:
        metadata = json.loads(reader.take(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint metadata: {e}") from e
    checkpoint.config = metadata.get("config", {})
    checkpoint.seed = int(metadata.get("seed", 0))
    checkpoint.extra = metadata.get("extra", {})
    return checkpoint


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info(f"Saved checkpoint with {len(checkpoint.tensors)} tensors to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    checkpoint = decode_checkpoint(data)
    logger.info(f"Loaded checkpoint with {len(checkpoint.tensors)} tensors from {path}")
    return checkpoint
