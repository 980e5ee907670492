"""Matrix and mask exchange formats for the CLI.

Matrices travel either as plain CSV of reals (row-major) or as a raw
little-endian float32 binary with a 16-byte header: magic "MAT1", rows u32,
cols u32, pad u32.  Clip masks use magic "MSK1", rows u32, cols u32, then
ceil(cols/8) packed little-bit-order bytes per row.
"""

from __future__ import annotations

import struct

import numpy as np

from .codec import FormatError

_MAT_MAGIC = b"MAT1"
_MAT_HEADER = struct.Struct("<4sIII")
_MSK_MAGIC = b"MSK1"
_MSK_HEADER = struct.Struct("<4sII")


def write_matrix_csv(path, m: np.ndarray):
    x = np.asarray(m, dtype=np.float64)
    with open(path, "w") as f:
        for row in x:
            f.write(",".join(repr(float(v)) for v in row))
            f.write("\n")


def write_matrix_bin(path, m: np.ndarray):
    x = np.ascontiguousarray(m, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_MAT_HEADER.pack(_MAT_MAGIC, x.shape[0], x.shape[1], 0))
        f.write(x.tobytes())


def write_matrix(path, m: np.ndarray, fmt: str = "csv"):
    if fmt == "csv":
        write_matrix_csv(path, m)
    elif fmt == "bin":
        write_matrix_bin(path, m)
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")


def read_matrix(path) -> np.ndarray:
    """Reads either format, sniffing the binary magic."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == _MAT_MAGIC:
        return _read_matrix_bin(path)
    return _read_matrix_csv(path)


def _read_matrix_bin(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _MAT_HEADER.size:
        raise FormatError("truncated matrix header")
    magic, rows, cols, _ = _MAT_HEADER.unpack_from(data)
    if magic != _MAT_MAGIC:
        raise FormatError(f"bad matrix magic {magic!r}")
    expected = _MAT_HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise FormatError(f"matrix payload length {len(data)}, expected {expected}")
    body = np.frombuffer(data, dtype="<f4", offset=_MAT_HEADER.size)
    return body.reshape(rows, cols).astype(np.float64)


def _read_matrix_csv(path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            rows.append(row)
    if not rows:
        raise FormatError(f"{path}: empty matrix")
    return np.array(rows, dtype=np.float64)


def write_mask(path, mask: np.ndarray):
    m = np.asarray(mask, dtype=bool)
    packed = np.packbits(m, axis=1, bitorder="little")
    with open(path, "wb") as f:
        f.write(_MSK_HEADER.pack(_MSK_MAGIC, m.shape[0], m.shape[1]))
        f.write(np.ascontiguousarray(packed).tobytes())


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _MSK_HEADER.size:
        raise FormatError("truncated mask header")
    magic, rows, cols = _MSK_HEADER.unpack_from(data)
    if magic != _MSK_MAGIC:
        raise FormatError(f"bad mask magic {magic!r}")
    per_row = (cols + 7) // 8
    expected = _MSK_HEADER.size + rows * per_row
    if len(data) != expected:
        raise FormatError(f"mask payload length {len(data)}, expected {expected}")
    body = np.frombuffer(data, dtype=np.uint8, offset=_MSK_HEADER.size).reshape(rows, per_row)
    bits = np.unpackbits(body, axis=1, bitorder="little")[:, :cols]
    return bits.astype(bool)


def read_keyvalue_config(path) -> dict[str, str]:
    """key = value lines; # starts a comment."""
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            out[key.strip()] = value.strip()
    return out
