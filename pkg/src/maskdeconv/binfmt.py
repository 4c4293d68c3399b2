"""Little-endian binary record layout shared by kernels, masks, measurements and solutions.

Header (60 bytes, ``<4sHHIQQQqqII``):

======  ======  ==========================================================
offset  type    field
======  ======  ==========================================================
0       4s      magic ``b"MDCV"``
4       u16     format version (1)
6       u16     record kind (see ``KIND_*``)
8       u32     flags; bit 0 set when the payload is complex
12      u64     ambient signal length ``L``
20      u64     payload rows
28      u64     payload columns
36      i64     aux0 (kernel: first support index; measurements: period T)
44      i64     aux1 (same, second axis of 2D data; 0 in 1D)
52      u32     grid0 (first grid dimension; ``L`` in 1D)
56      u32     grid1 (second grid dimension; 1 in 1D)
======  ======  ==========================================================

Payload: ``rows * cols`` float64 values in row-major order; complex payloads
store interleaved ``(re, im)`` pairs.
"""

import struct
from typing import NamedTuple

import numpy as np

MAGIC = b"MDCV"
VERSION = 1
HEADER = struct.Struct("<4sHHIQQQqqII")

KIND_KERNEL = 1
KIND_MASKS = 2
KIND_MEASUREMENTS = 3
KIND_MATRIX = 4

FLAG_COMPLEX = 1


class Record(NamedTuple):
    kind: int
    L: int
    data: np.ndarray
    aux: tuple
    grid: tuple


def write_record(path, kind, data, L, aux=(0, 0), grid=None):
    data = np.asarray(data)
    if data.ndim == 1:
        data = data[None, :] if kind != KIND_KERNEL else data[:, None]
    if data.ndim != 2:
        raise ValueError(f"payload must be 1D or 2D, got shape {data.shape}")
    grid = tuple(grid) if grid is not None else (L, 1)
    is_complex = np.iscomplexobj(data)
    header = HEADER.pack(
        MAGIC,
        VERSION,
        kind,
        FLAG_COMPLEX if is_complex else 0,
        L,
        data.shape[0],
        data.shape[1],
        int(aux[0]),
        int(aux[1]),
        int(grid[0]),
        int(grid[1]),
    )
    if is_complex:
        payload = np.ascontiguousarray(data, dtype="<c16").view("<f8")
    else:
        payload = np.ascontiguousarray(data, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_record(path, expect_kind=None):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, kind, flags, L, rows, cols, a0, a1, g0, g1 = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"{path}: expected record kind {expect_kind}, found {kind}")
    is_complex = bool(flags & FLAG_COMPLEX)
    count = rows * cols * (2 if is_complex else 1)
    body = raw[HEADER.size:]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: payload has {len(body)} bytes, expected {8 * count}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if is_complex:
        values = values.view(np.complex128)
    return Record(kind, L, values.reshape(rows, cols), (a0, a1), (g0, g1))
