# services/checkpoints.py
"""
SHAD binary checkpoints.

Layout (little-endian):
    magic   4 bytes  b"SHAD"
    version u16
    then until EOF, one record per entry:
        name length u16, name bytes (utf-8), rows u32, cols u32,
        rows * cols float64 values in row-major order

Model and adapter checkpoints share the format; entry names carry a
"model." / "buffer." / "adapter." prefix.
"""
import logging
import os
import struct
from typing import Dict

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"SHAD"
VERSION = 1
_HEADER = struct.Struct("<4sH")
_NAME_LEN = struct.Struct("<H")
_SHAPE = struct.Struct("<II")


def encode(entries: Dict[str, np.ndarray]) -> bytes:
    """Serialize entries in sorted-name order so equal inputs give equal bytes."""
    chunks = [_HEADER.pack(MAGIC, VERSION)]
    for name in sorted(entries):
        arr = np.asarray(entries[name], dtype=np.float64)
        if arr.ndim != 2:
            raise CheckpointError(f"entry {name!r} must be 2-D, got shape {arr.shape}")
        raw = name.encode("utf-8")
        chunks.append(_NAME_LEN.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_SHAPE.pack(*arr.shape))
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


def decode(data: bytes) -> Dict[str, np.ndarray]:
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint is truncated before the header ends")
    magic, version = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    entries = {}
    offset = _HEADER.size
    try:
        while offset < len(data):
            (name_len,) = _NAME_LEN.unpack_from(data, offset)
            offset += _NAME_LEN.size
            if offset + name_len > len(data):
                raise CheckpointError(f"entry name at byte {offset} is truncated")
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            rows, cols = _SHAPE.unpack_from(data, offset)
            offset += _SHAPE.size
            size = rows * cols * 8
            if offset + size > len(data):
                raise CheckpointError(f"entry {name!r} is truncated")
            arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset)
            entries[name] = arr.reshape(rows, cols).astype(np.float64)
            offset += size
    except struct.error as e:
        raise CheckpointError(f"checkpoint is truncated: {e}") from e
    except UnicodeDecodeError as e:
        raise CheckpointError(f"entry name is not valid utf-8: {e}") from e
    return entries


def save_checkpoint(path: str, entries: Dict[str, np.ndarray]):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode(entries))
    logger.info(f"Checkpoint saved to: {path} ({len(entries)} entries)")


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode(f.read())


def with_prefix(entries: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{name}": value for name, value in entries.items()}


def strip_prefix(entries: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    head = f"{prefix}."
    return {name[len(head):]: value for name, value in entries.items() if name.startswith(head)}


def model_entries(model) -> Dict[str, np.ndarray]:
    entries = with_prefix(dict(model.params.items()), "model")
    entries.update(with_prefix(model.buffers(), "buffer"))
    return entries


def restore_model(model, entries: Dict[str, np.ndarray]):
    """Load parameters and running statistics saved by `model_entries`."""
    params = strip_prefix(entries, "model")
    if not params:
        raise CheckpointError("no model entries in checkpoint")
    missing = set(model.params) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    model.params.load(params)
    model.load_buffers(strip_prefix(entries, "buffer"))
