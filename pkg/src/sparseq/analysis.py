"""Uncertainty under difficult conditions: forest borders, steep terrain, suspect labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import QuantileStack, SparseLabels
from .errors import ConfigurationError, DomainError, ValidationError
from .metrics import TAU_TOL, PredictionInterval, piw
from .stats import five_number_summary

DEFAULT_SLOPE_BINS = (0.0, 2.0, 5.0, 10.0, 15.0, 20.0, np.inf)


def forest_border_mask(point_pred, threshold: float = 10.0) -> np.ndarray:
    """Pixels whose 3x3 neighbourhood spans more than ``threshold`` metres.

    Neighbourhoods are truncated at the grid edge.
    """
    pred = np.asarray(point_pred, dtype=np.float64)
    # 'nearest' repeats an edge pixel that is already inside the window, so
    # max/min equal those of the truncated neighbourhood.
    hi = ndimage.maximum_filter(pred, size=3, mode="nearest")
    lo = ndimage.minimum_filter(pred, size=3, mode="nearest")
    return (hi - lo) > threshold


def box_mean(values, window: int = 3) -> np.ndarray:
    """Mean over a ``window x window`` box truncated at the grid edge."""
    if window < 1 or window % 2 == 0:
        raise ValidationError(f"window must be a positive odd integer, got {window}")
    v = np.asarray(values, dtype=np.float64)
    # direct windowed sums; uniform_filter's running sum leaves -1e-16 residue
    # next to bumps, which would make slopes of flat ground negative
    k = np.ones((window, window))
    sums = ndimage.correlate(v, k, mode="constant", cval=0.0)
    counts = ndimage.correlate(np.ones_like(v), k, mode="constant", cval=0.0)
    return sums / counts


def slope_from_dem(dem, pixel_size: float = 10.0, window: int = 3) -> np.ndarray:
    """Slope in degrees, box-averaged over ``window x window`` pixels.

    Gradients use central differences inside the grid and one-sided
    differences on the border.
    """
    if pixel_size <= 0:
        raise ValidationError("pixel_size must be positive")
    z = np.asarray(dem, dtype=np.float64)
    if min(z.shape) < 2:
        gy = np.zeros_like(z) if z.shape[0] < 2 else np.gradient(z, pixel_size, axis=0)
        gx = np.zeros_like(z) if z.shape[1] < 2 else np.gradient(z, pixel_size, axis=1)
    else:
        gy, gx = np.gradient(z, pixel_size)
    slope = np.degrees(np.arctan(np.hypot(gx, gy)))
    return box_mean(slope, window) if window > 1 else slope


@dataclass
class GroupSummary:
    name: str
    count: int
    fraction: float
    piw: dict[str, float] | None
    picp: float | None


def summarise_groups(piw_values: np.ndarray, covered: np.ndarray, keys: np.ndarray,
                     names: list[str]) -> list[GroupSummary]:
    """Per-group PIW distribution and coverage; ``keys`` index into ``names``."""
    total = len(piw_values)
    if total == 0:
        raise DomainError("no labelled pixels to summarise")
    if np.any((keys < 0) | (keys >= len(names))):
        raise ValidationError("every labelled pixel must belong to a group")
    out = []
    for g, name in enumerate(names):
        sel = keys == g
        n = int(sel.sum())
        out.append(GroupSummary(
            name, n, n / total,
            five_number_summary(piw_values[sel]) if n else None,
            float(np.mean(covered[sel])) if n else None,
        ))
    return out


def slope_bin_names(bin_edges) -> list[str]:
    return [f"[{lo:g},{hi:g})" for lo, hi in zip(bin_edges[:-1], bin_edges[1:])]


def group_keys(groups, labels: SparseLabels, bin_edges=None) -> tuple[np.ndarray, list[str]]:
    g = np.asarray(groups)
    at = g[labels.rows, labels.cols]
    if g.dtype == bool:
        return at.astype(np.int64), ["interior", "border"]
    if bin_edges is None:
        raise ConfigurationError("numeric groups need bin edges")
    edges = np.asarray(bin_edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0):
        raise ValidationError("bin edges must be strictly increasing")
    idx = np.searchsorted(edges, at, side="right") - 1
    idx[idx >= len(edges) - 1] = -1
    return idx, slope_bin_names(list(edges))


def grouped_piw_summary(interval: PredictionInterval, labels: SparseLabels, groups,
                        bin_edges=None) -> list[GroupSummary]:
    """PIW and PICP of labelled pixels split by a border mask or binned slope raster."""
    keys, names = group_keys(groups, labels, bin_edges)
    width = piw(interval)[labels.rows, labels.cols]
    y = labels.heights
    covered = (interval.lower[labels.rows, labels.cols] <= y) & (y <= interval.upper[labels.rows, labels.cols])
    return summarise_groups(width, covered, keys, names)


@dataclass(frozen=True)
class SuspectLabel:
    track_id: int
    row: int
    col: int
    height: float
    prediction: float


def detect_suspect_labels(stack: QuantileStack, labels: SparseLabels, pred_ceiling: float = 10.0,
                          label_floor: float = 30.0, quantile: float = 0.9) -> list[SuspectLabel]:
    """Labels far above a confident low prediction.

    A point is flagged when the ``quantile`` prediction is below
    ``pred_ceiling`` while the label exceeds ``label_floor``.
    """
    i = stack.index_of(quantile, TAU_TOL)
    if i is None:
        raise ConfigurationError(f"suspect-label rule needs the {quantile} quantile channel")
    pred = stack.rasters[i][labels.rows, labels.cols]
    flag = (pred < pred_ceiling) & (labels.heights > label_floor)
    return [
        SuspectLabel(int(labels.track_ids[k]), int(labels.rows[k]), int(labels.cols[k]),
                     float(labels.heights[k]), float(pred[k]))
        for k in np.flatnonzero(flag)
    ]
