"""On-disk formats.

RINV-GRID v1 (real grids, masks and magnitude heatmaps)::

    RINVGRID 1\\n
    n_az n_rng az_min az_max rng_max\\n
    n_az*n_rng little-endian float32, azimuth-major

RINVCPLX 1 is the same layout with interleaved (re, im) float32 pairs.
Every writer goes through a temporary file and an atomic rename.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .grid import PointSet, PolarGrid, SceneMask, make_grid
from .radar import Heatmap

GRID_MAGIC = b"RINVGRID 1\n"
CPLX_MAGIC = b"RINVCPLX 1\n"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# grids


def _grid_header(grid: PolarGrid) -> bytes:
    return (grid.header() + "\n").encode("ascii")


def _parse_grid_header(data: bytes, magic: bytes) -> tuple[PolarGrid, int]:
    if not data.startswith(magic):
        raise FormatError(f"missing {magic.decode().strip()!r} magic")
    start = len(magic)
    end = data.find(b"\n", start)
    if end < 0:
        raise FormatError("truncated header")
    fields = data[start:end].decode("ascii").split()
    if len(fields) != 5:
        raise FormatError(f"header needs 5 fields, got {len(fields)}")
    try:
        grid = make_grid(int(fields[0]), int(fields[1]), float(fields[2]), float(fields[3]), float(fields[4]))
    except ValueError as exc:
        raise FormatError(f"bad grid header: {exc}") from exc
    return grid, end + 1


def grid_to_bytes(grid: PolarGrid, values: np.ndarray) -> bytes:
    body = np.ascontiguousarray(values, dtype="<f4").tobytes()
    return GRID_MAGIC + _grid_header(grid) + body


def grid_from_bytes(data: bytes) -> tuple[PolarGrid, np.ndarray]:
    grid, pos = _parse_grid_header(data, GRID_MAGIC)
    n = grid.n_az * grid.n_rng
    if len(data) - pos != 4 * n:
        raise FormatError(f"expected {4 * n} payload bytes, found {len(data) - pos}")
    values = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(grid.shape)
    return grid, values.astype(float)


def write_grid(path, obj) -> None:
    """Write a :class:`SceneMask` or magnitude :class:`Heatmap`."""
    if isinstance(obj, Heatmap) and obj.mode != "magnitude":
        raise ValueError("complex heatmaps go through write_complex")
    atomic_write_bytes(path, grid_to_bytes(obj.grid, obj.values))


def read_mask(path) -> SceneMask:
    grid, values = grid_from_bytes(read_bytes(path))
    return SceneMask(grid, values)


def read_heatmap(path) -> Heatmap:
    """Magnitude heatmap from RINV-GRID, complex heatmap from RINVCPLX."""
    data = read_bytes(path)
    if data.startswith(CPLX_MAGIC):
        return complex_from_bytes(data)
    grid, values = grid_from_bytes(data)
    return Heatmap(grid, values, "magnitude")


def complex_to_bytes(hm: Heatmap) -> bytes:
    if hm.mode != "complex":
        raise ValueError("complex format needs a complex heatmap")
    inter = np.empty(hm.values.shape + (2,), dtype="<f4")
    inter[..., 0] = hm.values.real
    inter[..., 1] = hm.values.imag
    return CPLX_MAGIC + _grid_header(hm.grid) + inter.tobytes()


def complex_from_bytes(data: bytes) -> Heatmap:
    grid, pos = _parse_grid_header(data, CPLX_MAGIC)
    n = grid.n_az * grid.n_rng
    if len(data) - pos != 8 * n:
        raise FormatError(f"expected {8 * n} payload bytes, found {len(data) - pos}")
    raw = np.frombuffer(data, dtype="<f4", count=2 * n, offset=pos).reshape(grid.shape + (2,))
    return Heatmap(grid, raw[..., 0].astype(float) + 1j * raw[..., 1].astype(float), "complex")


def write_complex(path, hm: Heatmap) -> None:
    atomic_write_bytes(path, complex_to_bytes(hm))


# ---------------------------------------------------------------------------
# points and tables


def points_to_csv(points: PointSet) -> str:
    lines = ["px_m,py_m"]
    lines += [f"{x:.9g},{y:.9g}" for x, y in points.points]
    return "\n".join(lines) + "\n"


def points_from_csv(text: str) -> PointSet:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ["px_m", "py_m"]:
        raise FormatError("points CSV must start with header 'px_m,py_m'")
    try:
        pts = [(float(r[0]), float(r[1])) for r in rows[1:] if r]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"bad points row: {exc}") from exc
    return PointSet(np.array(pts, dtype=float).reshape(-1, 2))


def write_points(path, points: PointSet) -> None:
    atomic_write_text(path, points_to_csv(points))


def read_points(path) -> PointSet:
    return points_from_csv(read_bytes(path).decode("utf-8"))


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def table_to_csv(header, rows) -> str:
    out = [",".join(header)]
    out += [",".join(_fmt(r[h]) for h in header) for r in rows]
    return "\n".join(out) + "\n"


def write_table(path, header, rows) -> None:
    atomic_write_text(path, table_to_csv(header, rows))


def append_table_rows(path, header, rows) -> None:
    """Append rows, writing the header first if the file is new or empty."""
    path = Path(path)
    existing = path.read_text() if path.exists() else ""
    if existing and existing.splitlines()[0] != ",".join(header):
        raise FormatError(f"{path} has a different header")
    body = table_to_csv(header, rows)
    if existing:
        body = existing + body.split("\n", 1)[1]
    atomic_write_text(path, body)


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# PGM


def render_pgm_bytes(values: np.ndarray, mode: str = "gray") -> bytes:
    """8-bit binary PGM; 0 maps to 0 and the maximum to 255."""
    v = np.asarray(values, dtype=float)
    v = np.where(v > 0, v, 0.0)
    peak = v.max(initial=0.0)
    if peak > 0:
        if mode == "gray":
            scaled = v / peak
        elif mode == "log":
            scaled = np.log10(1.0 + 100.0 * v) / np.log10(1.0 + 100.0 * peak)
        else:
            raise ValueError(f"unknown render mode {mode!r}")
        pix = np.clip(np.rint(255.0 * scaled), 0, 255).astype(np.uint8)
    else:
        pix = np.zeros(v.shape, dtype=np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def parse_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise FormatError("not an 8-bit binary PGM written by this package")
    w, h = (int(s) for s in parts[1].split())
    body = parts[3]
    if len(body) != w * h:
        raise FormatError(f"PGM payload {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def pgm_to_bytes(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, np.uint8).tobytes()
