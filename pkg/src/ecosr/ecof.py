"""ECOF1 on-disk field container.

Layout, all little-endian:

* 8-byte magic ``ECOF\\x00\\x00\\x00\\x01`` (format version 1);
* four u32: kind code, channel count C, edge voxels n, dtype code
  (4 = float32, 8 = float64, the byte width);
* C * n^3 values, channel-major; within a channel x-major, then y, then z,
  so z varies fastest (C-order of a ``(C, nx, ny, nz)`` array).

Kind codes: 0 scalar, 1 vector, 2 symtensor, 3 tensor2. The channel count is
stored redundantly and must agree with the kind.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ecosr.fieldcore import Field, FieldKind, GridSpec

__all__ = ["MAGIC", "read_field", "write_field"]

MAGIC = b"ECOF\x00\x00\x00\x01"

_KIND_CODES = {
    FieldKind.SCALAR: 0,
    FieldKind.VECTOR: 1,
    FieldKind.SYMTENSOR: 2,
    FieldKind.TENSOR2: 3,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_CODE_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_field(path, f: Field) -> None:
    dtype = np.dtype(f.data.dtype)
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    header = MAGIC + struct.pack(
        "<4I",
        _KIND_CODES[f.kind],
        f.kind.channels,
        f.grid.n,
        _DTYPE_CODES[dtype],
    )
    payload = np.ascontiguousarray(f.data, dtype=dtype.newbyteorder("<"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_field(path) -> Field:
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    kind_code, channels, n, dtype_code = struct.unpack("<4I", raw[8:24])
    if kind_code not in _CODE_KINDS:
        raise ValueError(f"{path}: unknown kind code {kind_code}")
    kind = _CODE_KINDS[kind_code]
    if channels != kind.channels:
        raise ValueError(
            f"{path}: channel count {channels} does not match "
            f"{kind.value} (expects {kind.channels})"
        )
    if dtype_code not in _CODE_DTYPES:
        raise ValueError(f"{path}: unknown dtype code {dtype_code}")
    dtype = _CODE_DTYPES[dtype_code]
    expected = channels * n**3 * dtype.itemsize
    body = raw[24:]
    if len(body) != expected:
        raise ValueError(
            f"{path}: truncated or oversized payload "
            f"({len(body)} bytes, expected {expected})"
        )
    data = np.frombuffer(body, dtype=dtype).reshape(channels, n, n, n)
    # Native-endian writable copy.
    data = data.astype(dtype.newbyteorder("="), copy=True)
    return Field(GridSpec.cubic(n), kind, data)
