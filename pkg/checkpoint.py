# checkpoint.py - Binary checkpoint format for model parameters and buffers
#
# Layout (little-endian):
#   b"ABNN" | version:u8 | count:u32
#   count x ( name_len:u16 | name utf-8 | dtype:u8 | ndim:u8 | dims:u32*ndim | raw bytes )
#   meta_len:u32 | metadata JSON utf-8

import json
import logging
import os
import struct
from collections import OrderedDict
from typing import Any, Dict, Tuple

import numpy as np

from error_handler import ABNNError, CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"ABNN"
FORMAT_VERSION = 1

DTYPE_CODES = {
    np.dtype("float64"): 1,
    np.dtype("float32"): 2,
    np.dtype("int64"): 3,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


class _Reader:
    def __init__(self, payload: bytes, path: str):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise CheckpointError("checkpoint is truncated", details=f"{self.path} ends at byte {len(self.payload)}")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def write_tensors(path: str, tensors: Dict[str, np.ndarray], metadata: Dict[str, Any] = None):
    parts = [MAGIC, struct.pack("<BI", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value)
        if value.dtype not in DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {value.dtype} for {name}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", DTYPE_CODES[value.dtype], value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=value.dtype.newbyteorder("<")).tobytes())
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_tensors(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}", user_action="Run the pretrain/train stage first.")
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)

    if reader.take(4) != MAGIC:
        raise CheckpointError("not an ABNN checkpoint", details=f"{path} has the wrong magic bytes")
    version, count = reader.unpack("<BI")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", details=f"expected {FORMAT_VERSION}")

    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        dtype = CODE_DTYPES[code].newbyteorder("<")
        raw = reader.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(CODE_DTYPES[code])

    (meta_len,) = reader.unpack("<I")
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except ValueError as e:
        raise CheckpointError("checkpoint metadata is not valid JSON", details=str(e))
    return tensors, metadata


def save_checkpoint(model, path: str, metadata: Dict[str, Any] = None):
    """Write the model's parameters and buffers; metadata is stored as JSON"""
    state = model.state_dict()
    write_tensors(path, state, metadata)
    logger.info("✓ checkpoint saved: %s (%d entries)", path, len(state))


def load_checkpoint(model, path: str) -> Dict[str, Any]:
    """Restore parameters and buffers bit-exactly; returns the stored metadata"""
    tensors, metadata = read_tensors(path)
    try:
        model.load_state_dict(tensors)
    except ABNNError:
        raise
    except (ValueError, TypeError) as e:
        raise CheckpointError("checkpoint does not fit the model", details=str(e))
    logger.info("✓ checkpoint loaded: %s", path)
    return metadata
