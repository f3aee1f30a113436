"""Point-cloud I/O and axis-aligned quantization onto a 2^k integer lattice.

A point cloud is a plain ``(n, 3)`` float64 array in meters.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_DEPTH = 21
DEGENERATE_CELL = 1e-6


class CloudFormatError(ValueError):
    """Raised when a cloud file does not parse under its declared format."""


class CloudValidationError(ValueError):
    """Raised when a cloud contains non-finite coordinates."""


@dataclass(frozen=True)
class QuantParams:
    origin: tuple[float, float, float]
    cell: float
    depth_k: int

    def __post_init__(self):
        if not self.cell > 0:
            raise ValueError(f"cell size must be positive, got {self.cell}")
        if not 1 <= self.depth_k <= MAX_DEPTH:
            raise ValueError(f"depth must be in [1, {MAX_DEPTH}], got {self.depth_k}")

    def coarsen(self, depth_d: int) -> "QuantParams":
        """Parameters of the same lattice truncated to ``depth_d`` levels."""
        if not 1 <= depth_d <= self.depth_k:
            raise ValueError(f"depth {depth_d} outside [1, {self.depth_k}]")
        return QuantParams(self.origin, self.cell * 2 ** (self.depth_k - depth_d), depth_d)


@dataclass
class QuantizedCloud:
    coords: np.ndarray
    params: QuantParams
    # number of input points before duplicate cells collapsed
    n_input: int = field(default=-1)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if self.n_input < 0:
            self.n_input = len(self.coords)

    def __len__(self):
        return len(self.coords)


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
        raise CloudValidationError(f"non-finite coordinate in point {bad}")
    return pts


def load_cloud(path, format: str = "xyz_text") -> np.ndarray:
    """Read a cloud from ``path``.

    ``xyz_text`` holds whitespace-separated triples, one point per line.
    ``bin_f32`` holds little-endian float32 records of (x, y, z, intensity);
    intensity is dropped.
    """
    path = Path(path)
    if format == "xyz_text":
        rows = []
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 3:
                    raise CloudFormatError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
                try:
                    rows.append([float(p) for p in parts])
                except ValueError as e:
                    raise CloudFormatError(f"{path}:{lineno}: {e}") from None
        return as_cloud(np.array(rows, dtype=np.float64).reshape(-1, 3))
    if format == "bin_f32":
        raw = path.read_bytes()
        if len(raw) % 16:
            whole = len(raw) - len(raw) % 16
            raise CloudFormatError(f"{path}: truncated record at byte offset {whole}")
        rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
        return as_cloud(rec[:, :3].astype(np.float64))
    raise ValueError(f"unknown cloud format {format!r}")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_cloud(path, points, format: str = "xyz_text") -> None:
    """Write a cloud atomically (temp file then rename)."""
    pts = as_cloud(points)
    if format == "xyz_text":
        data = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()).encode()
    elif format == "bin_f32":
        rec = np.zeros((len(pts), 4), dtype="<f4")
        rec[:, :3] = pts
        data = rec.tobytes()
    else:
        raise ValueError(f"unknown cloud format {format!r}")
    _atomic_write(Path(path), data)


def guess_format(path) -> str:
    return "bin_f32" if str(path).endswith(".bin") else "xyz_text"


def fit_quant_params(cloud, depth_k: int) -> QuantParams:
    pts = as_cloud(cloud)
    if len(pts) == 0:
        raise ValueError("cannot fit quantization to an empty cloud")
    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max())
    cell = extent / 2**depth_k if extent > 0 else DEGENERATE_CELL
    return QuantParams(tuple(float(v) for v in lo), cell, depth_k)


def lattice_coords(cloud, params: QuantParams) -> np.ndarray:
    """Per-point lattice cell, clamped, without deduplication."""
    u = np.floor((as_cloud(cloud) - np.asarray(params.origin)) / params.cell)
    return np.clip(u, 0, 2**params.depth_k - 1).astype(np.int64)


def quantize(cloud, params: QuantParams) -> QuantizedCloud:
    """Floor onto the lattice, clamp to ``[0, 2^k)`` and drop repeated cells.

    The first occurrence of each cell keeps its position in the output.
    """
    pts = as_cloud(cloud)
    u = lattice_coords(pts, params)
    _, first = np.unique(u, axis=0, return_index=True)
    return QuantizedCloud(u[np.sort(first)], params, n_input=len(pts))


def dequantize(qc: QuantizedCloud) -> np.ndarray:
    """Cell-center reconstruction."""
    origin = np.asarray(qc.params.origin)
    return origin + (qc.coords + 0.5) * qc.params.cell
