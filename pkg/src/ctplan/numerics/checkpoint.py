"""Self-describing binary checkpoint container.

Layout::

    magic      8 bytes  b"CTPCKPT\\0"
    version    uint32 little-endian
    hdr_len    uint32 little-endian
    header     hdr_len bytes of UTF-8 JSON: {"tensors": [{"name", "shape"}], "meta": {...}}
    payload    each tensor as contiguous float64 little-endian, in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError, MissingArtifact

MAGIC = b"CTPCKPT\0"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ContractError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    offset = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        tensors[entry["name"]] = arr
        offset += 8 * n
    if offset != len(raw):
        raise ContractError(f"{path}: trailing or missing payload bytes")
    return tensors, header["meta"]
