"""SQVC checkpoint files.

Layout (all integers little-endian)::

    b"SQVC"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 n_arrays
    repeated: u16 name_len  name (UTF-8)  u8 ndim  u64 dims[ndim]  float64 data

The JSON header holds the materialized config, master seed, step/epoch
counters, optimizer scalars, plateau state and random-stream positions.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .data import DataFormatError

MAGIC = b"SQVC"
VERSION = 1


class CheckpointError(DataFormatError):
    """Unreadable or incompatible checkpoint."""


def encode(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")  # tobytes() is C-order; keeps 0-d shape
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(raw: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad checkpoint magic")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{source}: truncated checkpoint at offset {pos}")
        out = raw[pos:pos + n]
        pos += n
        return out

    version, head_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} "
                              f"(expected {VERSION})")
    try:
        header = json.loads(take(head_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{source}: trailing bytes at offset {pos}")
    return header, arrays


def save(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write atomically (temporary file, then rename)."""
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(header, arrays))
    os.replace(tmp, path)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode(raw, os.fspath(path))


def save_state(path, state) -> None:
    from .training import state_arrays, state_header

    header = {"config": state.config.to_dict(), "state": state_header(state)}
    save(path, header, state_arrays(state))


def load_state(path, dataset=None):
    """Rebuild a RunState from a checkpoint; the dataset is regenerated from
    the embedded config unless given."""
    from .training import TrainConfig, restore_state

    header, arrays = load(path)
    if "config" not in header or "state" not in header:
        raise CheckpointError(f"{path}: header lacks config/state")
    config = TrainConfig.from_dict(header["config"])
    return restore_state(config, header["state"], arrays, dataset)
