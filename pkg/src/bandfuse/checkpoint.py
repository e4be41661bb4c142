"""Versioned named-parameter checkpoint with embedded configuration.

Layout, little-endian:
    magic "PVCK" | u16 version=1 | u32 config_len | config UTF-8 bytes |
    u32 n_tensors | per tensor: u32 name_len | name UTF-8 | u8 rank |
    u32 dims[rank] | float32 data
Round-trips reproduce every tensor bitwise and the config text exactly.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .params import ParamStore

MAGIC = b"PVCK"
VERSION = 1


def save_checkpoint(path: str | Path, store: ParamStore, config_text: str) -> None:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", VERSION))
    cfg = config_text.encode("utf-8")
    out.write(struct.pack("<I", len(cfg)))
    out.write(cfg)
    names = store.names()
    out.write(struct.pack("<I", len(names)))
    for name in names:
        nb = name.encode("utf-8")
        arr = store[name].data
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(out.getvalue())


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    """Returns (config_text, name -> float32 array)."""
    blob = Path(path).read_bytes()
    if len(blob) < 10:
        raise DataFormatError(f"checkpoint truncated: {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    off = 6

    def need(n: int, what: str) -> None:
        if off + n > len(blob):
            raise DataFormatError(f"checkpoint truncated inside {what}")

    need(4, "config length")
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    need(cfg_len, "config text")
    config_text = blob[off:off + cfg_len].decode("utf-8")
    off += cfg_len
    need(4, "tensor count")
    (n_tensors,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        need(name_len + 1, "tensor name")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        rank = blob[off]
        off += 1
        need(4 * rank, "tensor dims")
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(4 * count, f"tensor data for {name!r}")
        arrays[name] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        )
        off += 4 * count
    if off != len(blob):
        raise DataFormatError(f"{len(blob) - off} trailing bytes in checkpoint")
    return config_text, arrays
