"""File formats: VAF1 binary grids and CSV seismograms.

VAF1 layout (little endian)::

    b"VAF1"  u32 nx  u32 nz  u32 ncomp  u32 nt  f64 h  f64 dt   (36 bytes)
    f64 data[nt][ncomp][nx][nz]                                   (z fastest)

``nx, nz`` are the dimensions of the stored array (node counts for
velocity snapshots, cell counts for parameter fields); static fields use
``nt = 1`` and ``dt = 0``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"VAF1"
HEADER = struct.Struct("<4s4I2d")


class FormatError(ValueError):
    """Malformed or inconsistent file."""


@dataclass(frozen=True)
class VafArray:
    data: np.ndarray  # (nt, ncomp, nx, nz)
    h: float
    dt: float

    @property
    def nt(self) -> int:
        return self.data.shape[0]


def write_vaf(path, data: np.ndarray, h: float, dt: float = 0.0) -> None:
    """Write ``(nt, ncomp, nx, nz)`` or ``(ncomp, nx, nz)`` data."""
    a = np.asarray(data, dtype="<f8")
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise FormatError(f"VAF1 data must be 3 or 4 dimensional, got shape {a.shape}")
    nt, ncomp, nx, nz = a.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, nx, nz, ncomp, nt, float(h), float(dt)))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_vaf(path) -> VafArray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: shorter than the VAF1 header")
    magic, nx, nz, ncomp, nt, h, dt = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    n = nt * ncomp * nx * nz
    if len(raw) != HEADER.size + 8 * n:
        raise FormatError(f"{path}: payload of {len(raw) - HEADER.size} bytes does not match header "
                          f"(nt={nt}, ncomp={ncomp}, nx={nx}, nz={nz})")
    if not (h > 0 and np.isfinite(h)) or not (dt >= 0 and np.isfinite(dt)):
        raise FormatError(f"{path}: invalid spacing h={h}, dt={dt}")
    data = np.frombuffer(raw, dtype="<f8", offset=HEADER.size).reshape(nt, ncomp, nx, nz)
    return VafArray(data.astype(float), h, dt)


def write_field(path, values: np.ndarray, h: float) -> None:
    """Five-component cell field (parameters, directions or gradients)."""
    v = np.asarray(values)
    if v.ndim != 3 or v.shape[0] != 5:
        raise FormatError("a parameter field has shape (5, nx, nz)")
    write_vaf(path, v, h)


def read_field(path, shape: tuple | None = None, h: float | None = None) -> np.ndarray:
    a = read_vaf(path)
    if a.nt != 1 or a.data.shape[1] != 5:
        raise FormatError(f"{path}: expected a static 5-component field, got nt={a.nt}, "
                          f"ncomp={a.data.shape[1]}")
    if shape is not None and a.data.shape[2:] != tuple(shape):
        raise FormatError(f"{path}: grid {a.data.shape[2:]} does not match {tuple(shape)}")
    if h is not None and abs(a.h - h) > 1e-12 * h:
        raise FormatError(f"{path}: spacing {a.h} does not match {h}")
    return a.data[0]


def write_seismogram(path, times: np.ndarray, traces: np.ndarray) -> None:
    """CSV with header ``t,comp0,comp1,...`` and 17 significant digits."""
    traces = np.asarray(traces, dtype=float)
    header = ",".join(["t"] + [f"comp{k}" for k in range(traces.shape[1])])
    np.savetxt(path, np.column_stack([times, traces]), delimiter=",", header=header, comments="",
               fmt="%.17g")


def read_seismogram(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with open(path) as fh:
        head = fh.readline().strip().split(",")
    if not head or head[0] != "t" or any(c != f"comp{k}" for k, c in enumerate(head[1:])):
        raise FormatError(f"{path}: header must be t,comp0,comp1,...")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if data.shape[1] != len(head):
        raise FormatError(f"{path}: rows do not match the header")
    return data[:, 0], data[:, 1:]


def write_table(path, header: list[str], rows) -> None:
    rows = np.asarray(rows, dtype=float)
    np.savetxt(path, rows.reshape(len(rows), len(header)), delimiter=",", header=",".join(header),
               comments="", fmt="%.17g")
