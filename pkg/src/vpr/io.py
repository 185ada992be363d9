"""Grid files and plot-ready CSV exports.

Grid layout: magic ``VPRG``, u32 little-endian ``nx``, u32 ``nz``, then
``nz * nx`` little-endian float32 values, row-major with one row per depth.
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

_MAGIC_G = b"VPRG"
_HEADER = 12
# refuse headers that would describe more than 2^31 cells
MAX_CELLS = 1 << 31


def write_grid(path, field) -> None:
    g = np.asarray(field)
    if g.ndim != 2:
        raise ValueError(f"grid must be 2D (nz, nx), got shape {g.shape}")
    nz, nx = g.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC_G)
        fh.write(struct.pack("<II", nx, nz))
        fh.write(np.ascontiguousarray(g, dtype="<f4").tobytes())


def read_grid(path) -> np.ndarray:
    """Return the stored field as float64 with shape ``(nz, nx)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC_G:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC_G!r}")
    if len(raw) < _HEADER:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    nx, nz = struct.unpack_from("<II", raw, 4)
    if nx * nz > MAX_CELLS:
        raise FormatError(f"{path}: header dimensions {nz}x{nx} overflow the cell limit")
    need = _HEADER + 4 * nx * nz
    if len(raw) < need:
        raise FormatError(f"{path}: truncated data, expected {need} bytes, found {len(raw)}")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after the grid")
    return np.frombuffer(raw, dtype="<f4", count=nx * nz, offset=_HEADER).astype(np.float64).reshape(nz, nx)


def read_grid_header(path) -> tuple[int, int]:
    """``(nx, nz)`` from the header only."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER)
    if head[:4] != _MAGIC_G:
        raise FormatError(f"{path}: bad magic {head[:4]!r}, expected {_MAGIC_G!r}")
    if len(head) < _HEADER:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack_from("<II", head, 4)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)


def write_histograms(path, hists) -> None:
    rows = []
    for h in hists:
        for lo, hi, p in zip(h.edges[:-1], h.edges[1:], h.probs):
            rows.append((h.cell, float(lo), float(hi), float(p)))
    write_csv(path, ["cell", "lo", "hi", "prob"], rows)


def write_matrix(path, M, labels) -> None:
    M = np.asarray(M)
    write_csv(path, ["cell"] + [str(int(c)) for c in labels],
              [[int(c)] + [float(v) for v in row] for c, row in zip(labels, M)])
