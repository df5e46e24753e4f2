"""Self-describing, byte-deterministic container for model checkpoints.

Layout (documented here and in the README; stable across versions):

    bytes 0..7    magic ``VEILCKPT``
    bytes 8..15   header length H as little-endian uint64
    bytes 16..16+H  canonical JSON header (UTF-8, sorted keys, no spaces):
                    {"format_version": 1,
                     "meta": <caller metadata, JSON-serializable>,
                     "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}…]}
    remainder     tensor payload: raw little-endian C-order buffers,
                  concatenated in tensor-index order

Tensors are written sorted by name and offsets are relative to the payload
start, so identical contents always produce identical bytes. No pickling.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VEILCKPT"
FORMAT_VERSION = 1

_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "int32": "<i4"}


class CheckpointError(ValueError):
    """The file is not a valid checkpoint container."""


def save_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write metadata and named arrays to ``path`` deterministically."""
    path = Path(path)
    index = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype} for {name!r}")
        buf = arr.astype(np.dtype(_DTYPES[dtype]), copy=False).tobytes()
        index.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(buf),
            }
        )
        payload.extend(buf)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (meta, tensors) written by :func:`save_container`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"not a checkpoint container: {path}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {path}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {header.get('format_version')}"
        )
    payload = blob[16 + header_len :]
    tensors = {}
    for t in header["tensors"]:
        raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(_DTYPES[t["dtype"]]))
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(t["dtype"], copy=True)
    return header["meta"], tensors
