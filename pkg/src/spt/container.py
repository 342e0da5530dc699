"""Flat binary container for named float32 arrays.

Layout: 8-byte magic "SPTTENS1", then a little-endian u32 tensor count, then
per tensor: u32 name length, UTF-8 name bytes, u8 rank, rank u64 dims, and the
row-major float32 payload. Entry order is preserved on load.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SPTTENS1"

__all__ = ["MAGIC", "save_tensors", "load_tensors"]


def save_tensors(path, arrays) -> None:
    """Write a name -> array mapping; values are cast to float32."""
    items = list(arrays.items())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(items)))
        for name, arr in items:
            # asarray, not ascontiguousarray: the latter promotes rank 0 to rank 1
            a = np.asarray(arr, dtype="<f4")
            if a.ndim > 255:
                raise ValueError(f"tensor {name!r} rank {a.ndim} exceeds the u8 rank field")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", a.ndim))
            if a.ndim:
                f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(a.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container back into an ordered name -> float32 array dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: bad magic, not a tensor container")
    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"{path}: truncated container")
        chunk = blob[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n_items = 1
        for d in dims:
            n_items *= d
        data = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(tuple(dims))
        if name in out:
            raise ValueError(f"{path}: duplicate tensor name {name!r}")
        out[name] = data.astype(np.float32)
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes after last tensor")
    return out
