"""Rasters, sparse track-structured labels and their on-disk formats.

Rasters are stored channel-major as ``(C, H, W)`` float32 arrays. The time
axis of multi-temporal inputs is folded into the channel axis; ``timesteps``
is carried along as metadata only.

Labels are sparse: a pixel without a measurement simply has no entry, which
corresponds to a zero in a dense label grid. All indices are 0-based.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, CorruptionError, FormatError, ValidationError

RASTER_MAGIC = b"QRG1"
_HEADER = struct.Struct("<4sIIII")
LABEL_HEADER = ("track_id", "row", "col", "height")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Raster:
    """Dense ``C x H x W`` single-precision grid."""

    data: np.ndarray
    channels: int | None = None
    height: int | None = None
    width: int | None = None
    timesteps: int = 1
    nodata_value: float = 0.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim == 3 and self.channels is None:
            c, h, w = data.shape
        else:
            c, h, w = self.channels, self.height, self.width
            if None in (c, h, w):
                raise ValidationError("flat raster data needs channels, height and width")
            if data.size != c * h * w:
                raise ValidationError(
                    f"raster data has {data.size} values, expected C*H*W = {c * h * w}"
                )
            data = data.reshape(c, h, w)
        if min(c, h, w) < 1:
            raise ValidationError(f"raster dimensions must be >= 1, got {(c, h, w)}")
        if data.shape != (c, h, w):
            raise ValidationError(f"raster shape {data.shape} != declared {(c, h, w)}")
        if self.timesteps < 1:
            raise ValidationError("timesteps must be >= 1")
        object.__setattr__(self, "data", _frozen(np.array(data, dtype=np.float32)))
        object.__setattr__(self, "channels", int(c))
        object.__setattr__(self, "height", int(h))
        object.__setattr__(self, "width", int(w))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def band(self, i: int) -> np.ndarray:
        return self.data[i]

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.timesteps == other.timesteps
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def raster_to_bytes(raster: Raster) -> bytes:
    c, h, w = raster.shape
    if raster.data.size != c * h * w:
        raise ValidationError("raster data length does not match C*H*W")
    head = _HEADER.pack(RASTER_MAGIC, c, h, w, raster.timesteps)
    return head + raster.data.astype("<f4", copy=False).tobytes(order="C")


def raster_from_bytes(buf: bytes) -> Raster:
    if len(buf) < _HEADER.size:
        raise FormatError(f"file too short for a QRG1 header ({len(buf)} bytes)")
    magic, c, h, w, t = _HEADER.unpack_from(buf)
    if magic != RASTER_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {RASTER_MAGIC!r}")
    if min(c, h, w, t) < 1:
        raise FormatError(f"invalid header dimensions C={c} H={h} W={w} T={t}")
    n = c * h * w
    payload = len(buf) - _HEADER.size
    if payload != 4 * n:
        raise CorruptionError(
            f"header declares {n} values ({4 * n} bytes), payload has {payload} bytes"
        )
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size)
    return Raster(data.astype(np.float32).reshape(c, h, w), timesteps=t)


def save_raster(raster: Raster, path) -> None:
    Path(path).write_bytes(raster_to_bytes(raster))


def load_raster(path) -> Raster:
    return raster_from_bytes(Path(path).read_bytes())


@dataclass(frozen=True, eq=False)
class Track:
    """Labels from a single overflight; all share one ``track_id``."""

    track_id: int
    rows: np.ndarray
    cols: np.ndarray
    heights: np.ndarray
    grid_height: int
    grid_width: int

    def __post_init__(self):
        for name in ("rows", "cols"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64).copy()))
        object.__setattr__(self, "heights", _frozen(np.asarray(self.heights, dtype=np.float64).copy()))

    def __len__(self):
        return len(self.rows)

    @property
    def points(self) -> list[tuple[int, int, int, float]]:
        return [
            (self.track_id, int(r), int(c), float(y))
            for r, c, y in zip(self.rows, self.cols, self.heights)
        ]


@dataclass(frozen=True, eq=False)
class SparseLabels:
    """Set of labelled pixels ``(track_id, row, col, height)`` on an ``H x W`` grid.

    Heights are strictly positive; a zero height would mean "no label" in the
    dense encoding and is therefore rejected. No two points share a pixel.
    """

    track_ids: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    heights: np.ndarray
    grid_height: int
    grid_width: int

    def __post_init__(self):
        tid = np.asarray(self.track_ids, dtype=np.int64).reshape(-1).copy()
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1).copy()
        cols = np.asarray(self.cols, dtype=np.int64).reshape(-1).copy()
        hts = np.asarray(self.heights, dtype=np.float64).reshape(-1).copy()
        if not (len(tid) == len(rows) == len(cols) == len(hts)):
            raise ValidationError("label field arrays differ in length")
        if self.grid_height < 1 or self.grid_width < 1:
            raise ValidationError("grid dimensions must be >= 1")
        if not np.all(np.isfinite(hts)) or np.any(hts <= 0):
            bad = int(np.flatnonzero(~(hts > 0))[0]) if np.any(~(hts > 0)) else 0
            raise ValidationError(f"label heights must be finite and > 0 (point {bad})")
        inside = (rows >= 0) & (rows < self.grid_height) & (cols >= 0) & (cols < self.grid_width)
        if not np.all(inside):
            bad = int(np.flatnonzero(~inside)[0])
            raise ValidationError(
                f"point {bad} at ({rows[bad]}, {cols[bad]}) lies outside the "
                f"{self.grid_height}x{self.grid_width} grid"
            )
        flat = rows * self.grid_width + cols
        if len(np.unique(flat)) != len(flat):
            uniq, counts = np.unique(flat, return_counts=True)
            dup = uniq[counts > 1][0]
            raise ValidationError(
                f"duplicate label pixel ({dup // self.grid_width}, {dup % self.grid_width})"
            )
        for name, arr in (("track_ids", tid), ("rows", rows), ("cols", cols), ("heights", hts)):
            object.__setattr__(self, name, _frozen(arr))

    @classmethod
    def from_points(cls, points: Iterable[Sequence], grid_height: int, grid_width: int) -> "SparseLabels":
        pts = list(points)
        if not pts:
            return cls.empty(grid_height, grid_width)
        tid, r, c, y = zip(*pts)
        return cls(tid, r, c, y, grid_height, grid_width)

    @classmethod
    def empty(cls, grid_height: int, grid_width: int) -> "SparseLabels":
        z = np.zeros(0)
        return cls(z, z, z, z, grid_height, grid_width)

    def __len__(self):
        return len(self.heights)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid_height, self.grid_width

    @property
    def points(self) -> list[tuple[int, int, int, float]]:
        return [
            (int(t), int(r), int(c), float(y))
            for t, r, c, y in zip(self.track_ids, self.rows, self.cols, self.heights)
        ]

    def subset(self, mask) -> "SparseLabels":
        mask = np.asarray(mask)
        return SparseLabels(
            self.track_ids[mask], self.rows[mask], self.cols[mask], self.heights[mask],
            self.grid_height, self.grid_width,
        )

    def to_dense(self) -> np.ndarray:
        """Dense ``H x W`` grid with 0.0 where no label exists."""
        grid = np.zeros(self.shape, dtype=np.float64)
        grid[self.rows, self.cols] = self.heights
        return grid

    def __eq__(self, other):
        if not isinstance(other, SparseLabels):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.track_ids, other.track_ids)
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.heights, other.heights)
        )

    __hash__ = None


def partition_tracks(labels: SparseLabels) -> list[Track]:
    """Split labels into disjoint tracks ordered by ``track_id``.

    Points keep their original relative order within each track.
    """
    tracks = []
    for tid in np.unique(labels.track_ids):
        sel = labels.track_ids == tid
        tracks.append(
            Track(int(tid), labels.rows[sel], labels.cols[sel], labels.heights[sel],
                  labels.grid_height, labels.grid_width)
        )
    return tracks


def labels_to_csv(labels: SparseLabels, extra: dict[str, Sequence] | None = None) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    extra = extra or {}
    writer.writerow(list(LABEL_HEADER) + list(extra))
    cols = list(extra.values())
    for i, (t, r, c, y) in enumerate(labels.points):
        writer.writerow([t, r, c, repr(y)] + [col[i] for col in cols])
    return out.getvalue()


def save_labels(labels: SparseLabels, path, extra: dict[str, Sequence] | None = None) -> None:
    Path(path).write_text(labels_to_csv(labels, extra), encoding="utf-8")


def load_labels(path, grid_height: int, grid_width: int) -> SparseLabels:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError(f"{path}: empty label file") from None
    if tuple(h.strip() for h in header[:4]) != LABEL_HEADER:
        raise FormatError(f"{path}: expected header {','.join(LABEL_HEADER)}, got {header}")
    pts = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            pts.append((int(row[0]), int(row[1]), int(row[2]), float(row[3])))
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{lineno}: cannot parse {row}") from exc
    return SparseLabels.from_points(pts, grid_height, grid_width)


@dataclass(frozen=True, eq=False)
class QuantileStack:
    """``N`` prediction grids paired with strictly increasing quantile levels."""

    quantiles: tuple[float, ...]
    rasters: np.ndarray = field(repr=False)

    def __post_init__(self):
        q = tuple(float(t) for t in self.quantiles)
        arr = np.asarray(self.rasters, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if len(q) == 0:
            raise ValidationError("a quantile stack needs at least one quantile")
        if any(not (0.0 < t < 1.0) for t in q):
            raise ValidationError(f"quantiles must lie in (0, 1): {q}")
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ValidationError(f"quantiles must be strictly increasing: {q}")
        if arr.ndim != 3 or arr.shape[0] != len(q):
            raise ValidationError(f"expected {len(q)} rasters, got array of shape {arr.shape}")
        object.__setattr__(self, "quantiles", q)
        object.__setattr__(self, "rasters", _frozen(arr.copy()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rasters.shape[1:]

    def __len__(self):
        return len(self.quantiles)

    def index_of(self, tau: float, tol: float = 1e-9) -> int | None:
        for i, q in enumerate(self.quantiles):
            if abs(q - tau) <= tol:
                return i
        return None

    def channel(self, tau: float, tol: float = 1e-9) -> np.ndarray:
        i = self.index_of(tau, tol)
        if i is None:
            raise ConfigurationError(f"no channel for quantile {tau} in {self.quantiles}")
        return self.rasters[i]

    def monotonized(self) -> "QuantileStack":
        """Copy with the values at every pixel sorted across channels."""
        return QuantileStack(self.quantiles, np.sort(self.rasters, axis=0))

    def to_raster(self) -> Raster:
        return Raster(self.rasters.astype(np.float32))


def dilate_pixels(rows: np.ndarray, cols: np.ndarray, radius: int, shape: tuple[int, int]):
    """Unique in-grid pixels within Chebyshev distance ``radius`` of the inputs."""
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            r = rows + dr
            c = cols + dc
            ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            mask[r[ok], c[ok]] = True
    return np.nonzero(mask)
