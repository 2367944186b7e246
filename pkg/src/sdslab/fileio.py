"""Binary file formats: PGM images and DTCK model checkpoints.

Checkpoint layout (all little-endian)::

    b"DTCK" | version u32 | tensor count u32
    per tensor: name length u32 | name bytes (utf-8) | rank u32 | dims u32[rank] | float32 data
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, InvalidArgument
from .teacher import COND_KINDS, DenoiserModel

MAGIC = b"DTCK"
VERSION = 1


def write_pgm(grid, path) -> None:
    """Binary P5, maxval 255; values are clamped to [0, 1] then rounded."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise InvalidArgument("PGM needs a 2D grid")
    data = np.rint(np.clip(g, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(x) for x in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    payload = raw[m.end() :]
    if len(payload) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_b)) + name_b)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CorruptCheckpointError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CorruptCheckpointError(f"{path}: truncated at byte {off}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
    if off != len(raw):
        raise CorruptCheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def save_checkpoint(model: DenoiserModel, path) -> None:
    params32 = model.params.astype(np.float32)
    if not np.array_equal(params32.astype(np.float64), model.params):
        raise InvalidArgument("model parameters are not float32-representable; round them before saving")
    meta = np.array(
        [COND_KINDS.index(model.cond_kind), model.n_classes, model.T, model.n_freq], dtype=np.float32
    )
    save_tensors(
        {"meta": meta, "widths": np.array(model.widths, dtype=np.float32), "params": params32},
        path,
    )


def load_checkpoint(path) -> DenoiserModel:
    t = load_tensors(path)
    try:
        meta, widths, params = t["meta"], t["widths"], t["params"]
        kind, n_classes, T, n_freq = (int(v) for v in meta)
        model = DenoiserModel(
            tuple(int(w) for w in widths),
            params.astype(np.float64),
            COND_KINDS[kind],
            n_classes,
            T,
            n_freq,
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: inconsistent checkpoint contents ({exc})") from exc
    return model
