"""TSR1 tensor files and checkpoint directories.

TSR1 layout: magic ``TSR1``, u8 dtype code (0=f32, 1=f64), u8 rank,
rank x u32 little-endian extents, then the row-major little-endian payload.
Round-trips are bitwise exact; used for datasets and checkpoints.

A checkpoint is a directory of TSR1 files plus ``manifest.txt`` mapping
entry name -> file -> shape, one tab-separated line per entry.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"TSR1"
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_KIND_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tsr(path: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _KIND_TO_CODE:
        arr = arr.astype(np.float64)
    code = _KIND_TO_CODE[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tsr(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6:
        raise FormatError(f"{path}: truncated header at byte {len(blob)} (need 6)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"{path}: unknown dtype code {code} at byte 4")
    offset = 6
    if len(blob) < offset + 4 * rank:
        raise FormatError(f"{path}: truncated extents at byte {len(blob)} (need {offset + 4 * rank})")
    shape = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    need = offset + count * dtype.itemsize
    if len(blob) != need:
        raise FormatError(f"{path}: payload is {len(blob) - offset} bytes at byte {offset}, expected {need - offset}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return np.ascontiguousarray(arr.reshape(shape)).astype(dtype.newbyteorder("="))


def save_checkpoint_arrays(ckpt_dir: str, entries: dict[str, np.ndarray]) -> None:
    os.makedirs(ckpt_dir, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(entries.items()):
        fname = f"{i:04d}.tsr"
        write_tsr(os.path.join(ckpt_dir, fname), arr)
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name}\t{fname}\t{shape}")
    with open(os.path.join(ckpt_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint_arrays(ckpt_dir: str) -> dict[str, np.ndarray]:
    manifest = os.path.join(ckpt_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise FormatError(f"{ckpt_dir}: missing manifest.txt")
    entries: dict[str, np.ndarray] = {}
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{manifest}:{lineno}: expected 3 tab-separated fields")
            name, fname, shape_txt = parts
            arr = read_tsr(os.path.join(ckpt_dir, fname))
            got = "x".join(str(s) for s in arr.shape) or "scalar"
            if got != shape_txt:
                raise FormatError(f"{manifest}:{lineno}: {name} shape {got}, manifest says {shape_txt}")
            entries[name] = arr
    return entries
