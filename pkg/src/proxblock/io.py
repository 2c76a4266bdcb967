"""Matrix files, key=value configs and atomic writes.

Two matrix formats are supported:

``csv``
    One row per line, comma-separated decimal reals.
``bin``
    Magic ``b"PBM1"``, rows and cols as little-endian uint64, then
    ``rows*cols`` little-endian float64 values in row-major order.
"""
import os
import struct
import tempfile

import numpy as np

__all__ = [
    "MatrixFormatError",
    "MAGIC",
    "load_matrix",
    "save_matrix",
    "atomic_write_bytes",
    "atomic_write_text",
    "parse_config",
    "format_for",
]

MAGIC = b"PBM1"
_HEADER = struct.Struct("<4sQQ")


class MatrixFormatError(ValueError):
    pass


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def format_for(path):
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".csv":
        return "csv"
    if ext in (".bin", ".pbm"):
        return "bin"
    raise MatrixFormatError(f"cannot infer matrix format from {path!r}")


def _parse_csv(text, name):
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        tokens = line.split(",")
        try:
            row = [float(t) for t in tokens]
        except ValueError:
            bad = next(t for t in tokens if not _is_float(t))
            raise MatrixFormatError(
                f"{name}: line {lineno}: non-numeric token {bad.strip()!r}"
            ) from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise MatrixFormatError(
                f"{name}: line {lineno}: expected {width} values, "
                f"got {len(row)}")
        rows.append(row)
    if not rows:
        raise MatrixFormatError(f"{name}: empty matrix file")
    return np.array(rows, dtype=float)


def _is_float(token):
    try:
        float(token)
    except ValueError:
        return False
    return True


def _parse_bin(data, name):
    if len(data) < _HEADER.size:
        raise MatrixFormatError(
            f"{name}: truncated header ({len(data)} of {_HEADER.size} bytes)")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MatrixFormatError(f"{name}: offset 0: bad magic {magic!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise MatrixFormatError(
            f"{name}: offset {min(len(data), expected)}: {rows}x{cols} "
            f"matrix needs {expected} bytes, file has {len(data)}")
    values = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    return values.reshape(rows, cols).astype(float)


def load_matrix(path, format=None):
    """Read a matrix; returns a 2-d float array (row-major)."""
    fmt = format or format_for(path)
    name = os.fspath(path)
    if fmt == "csv":
        with open(path, encoding="utf-8") as fh:
            return _parse_csv(fh.read(), name)
    if fmt == "bin":
        with open(path, "rb") as fh:
            return _parse_bin(fh.read(), name)
    raise MatrixFormatError(f"unknown matrix format {fmt!r}")


def save_matrix(path, M, format=None):
    """Write a matrix (1-d input is stored as a single column)."""
    fmt = format or format_for(path)
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise MatrixFormatError(f"can only store 1-d or 2-d arrays, got {M.ndim}-d")
    if fmt == "csv":
        text = "".join(",".join(repr(float(v)) for v in row) + "\n" for row in M)
        atomic_write_text(path, text)
    elif fmt == "bin":
        rows, cols = M.shape
        data = _HEADER.pack(MAGIC, rows, cols) + M.astype("<f8").tobytes()
        atomic_write_bytes(path, data)
    else:
        raise MatrixFormatError(f"unknown matrix format {fmt!r}")


def parse_config(text, name="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{name}: line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"{name}: line {lineno}: empty key")
        out[key] = value
    return out
