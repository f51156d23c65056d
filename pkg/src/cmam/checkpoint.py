"""Binary checkpoint format.

Layout (little-endian):
  b"CMAM" | u32 version (1) | u32 tensor count
  per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | float64 data
  u32 config length | UTF-8 config snapshot
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CMAM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], config_text: str = "") -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    cfg = config_text.encode("utf-8")
    out.append(struct.pack("<I", len(cfg)) + cfg)
    return b"".join(out)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], str]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a CMAM checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for k in range(count):
        what = f"tensor #{k}"
        (n,) = struct.unpack("<H", take(2, f"{what} name length"))
        name = take(n, f"{what} name").decode("utf-8")
        what = f"tensor {name!r}"
        if name in tensors:
            raise CheckpointError(f"duplicate {what}")
        (rank,) = struct.unpack("<B", take(1, f"{what} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{what} shape"))
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(8 * size, f"{what} data"), dtype="<f8").reshape(dims)
        tensors[name] = arr.astype(np.float64)
    (n,) = struct.unpack("<I", take(4, "config length"))
    config = take(n, "config snapshot").decode("utf-8")
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after config snapshot")
    return tensors, config


def save(path, tensors: dict[str, np.ndarray], config_text: str = "") -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_bytes(encode(tensors, config_text))
    tmp.replace(p)
    return p


def load(path) -> tuple[dict[str, np.ndarray], str]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    try:
        return decode(p.read_bytes())
    except CheckpointError as e:
        raise CheckpointError(f"{p}: {e}") from None


def checkpoint_roundtrip(tensors: dict[str, np.ndarray], path, config_text: str = "") -> dict[str, np.ndarray]:
    save(path, tensors, config_text)
    return load(path)[0]
