"""Binary tables of 3D points and their CSV debug forms.

Layout: two little-endian uint64 header values ``(rows, cols)`` followed by
``rows * cols * 3`` little-endian float64 values, row-major. A square
distance matrix uses the same header with one float per cell instead of
three (``kind="scalar"``).
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import MeshIOError, ParseError

_HEADER = np.dtype("<u8")
_BODY = np.dtype("<f8")


def write_table(path, array, kind="points"):
    a = np.asarray(array, dtype=np.float64)
    if kind == "points":
        if a.ndim == 2:
            a = a[:, None, :]
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError("point table must be (rows, cols, 3) or (rows, 3)")
    elif kind == "scalar":
        if a.ndim != 2:
            raise ValueError("scalar table must be 2-D")
    else:
        raise ValueError(f"unknown table kind {kind!r}")
    try:
        with open(path, "wb") as fh:
            fh.write(np.array(a.shape[:2], dtype=_HEADER).tobytes())
            fh.write(np.ascontiguousarray(a, dtype=_BODY).tobytes())
    except OSError as exc:
        raise MeshIOError(f"cannot write {path}: {exc}") from exc


def read_table(path, kind="points"):
    """Inverse of :func:`write_table`; point tables come back as (rows, cols, 3)."""
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise MeshIOError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 16:
        raise ParseError(f"{path}: truncated table header")
    rows, cols = (int(x) for x in np.frombuffer(raw[:16], dtype=_HEADER))
    per = 3 if kind == "points" else 1
    n = rows * cols * per
    if len(raw) != 16 + 8 * n:
        raise ParseError(f"{path}: expected {n} values after the header")
    body = np.frombuffer(raw[16:], dtype=_BODY).astype(np.float64)
    return body.reshape((rows, cols, 3) if per == 3 else (rows, cols))


def write_trajectories_csv(path, positions):
    """``center_id,frame,x,y,z`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["center_id", "frame", "x", "y", "z"])
        k, n, _ = positions.shape
        for i in range(k):
            for f in range(n):
                w.writerow([i, f] + [repr(float(c)) for c in positions[i, f]])
