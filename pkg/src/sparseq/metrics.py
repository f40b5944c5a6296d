"""Calibration and interval metrics evaluated at labelled pixels.

Every metric is a ratio of sums over labels. When a test set holds several
scenes the per-label values are pooled first (``PooledPredictions``), so a
scene with many labels weighs more than one with few.

Intervals are closed: a label equal to an endpoint counts as covered, and a
label equal to a quantile prediction counts towards that quantile's coverage.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .core import QuantileStack, SparseLabels
from .errors import ConfigurationError, DomainError, ValidationError
from .stats import five_number_summary, pearson

DEFAULT_QUANTILES = (0.05, 0.1, 0.15, 0.2, 0.25, 0.5, 0.75, 0.8, 0.85, 0.9, 0.95)
DEFAULT_ALPHAS = (0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_TARGET_BINS = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, math.inf)
DEFAULT_PREDICTION_BINS = (-math.inf, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, math.inf)
TAU_TOL = 1e-9


def tau_key(tau: float) -> str:
    return f"{round(float(tau), 10):g}"


def interval_quantiles(alpha: float) -> tuple[float, float]:
    if not (0.0 < alpha < 1.0):
        raise DomainError(f"interval level must lie in (0, 1), got {alpha}")
    return 0.5 - alpha / 2.0, 0.5 + alpha / 2.0


def _require_labels(labels):
    if len(labels) == 0:
        raise DomainError("metric is undefined for an empty label set")


def _at(grid, labels) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != labels.shape:
        raise ConfigurationError(f"grid shape {grid.shape} != label grid {labels.shape}")
    return grid[labels.rows, labels.cols]


def empirical_coverage(tau_pred, labels: SparseLabels) -> float:
    """Fraction of labels at or below the prediction."""
    _require_labels(labels)
    return float(np.mean(_at(tau_pred, labels) >= labels.heights))


@dataclass(frozen=True)
class PredictionInterval:
    alpha: float
    tau_low: float
    tau_high: float
    lower: np.ndarray
    upper: np.ndarray


def make_interval(stack: QuantileStack, alpha: float, monotonize: bool = False) -> PredictionInterval:
    """Interval between the ``0.5 -/+ alpha/2`` quantile channels."""
    lo, hi = interval_quantiles(alpha)
    if monotonize:
        stack = stack.monotonized()
    i_lo, i_hi = stack.index_of(lo, TAU_TOL), stack.index_of(hi, TAU_TOL)
    if i_lo is None or i_hi is None:
        raise ConfigurationError(
            f"alpha={alpha} needs quantiles ({lo:g}, {hi:g}); stack has {stack.quantiles}"
        )
    return PredictionInterval(alpha, lo, hi, stack.rasters[i_lo], stack.rasters[i_hi])


def piw(interval: PredictionInterval) -> np.ndarray:
    return interval.upper - interval.lower


def mpiw(interval: PredictionInterval, labels: SparseLabels) -> float:
    _require_labels(labels)
    return float(np.mean(_at(piw(interval), labels)))


def picp(interval: PredictionInterval, labels: SparseLabels) -> float:
    _require_labels(labels)
    y = labels.heights
    inside = (_at(interval.lower, labels) <= y) & (y <= _at(interval.upper, labels))
    return float(np.mean(inside))


# --- pooled evaluation -------------------------------------------------------


@dataclass
class PooledPredictions:
    """Quantile predictions and labels gathered over one or more scenes.

    ``values`` has shape ``(n_labels, N)``; column ``k`` belongs to
    ``quantiles[k]``. ``truth`` optionally holds noise-free heights at the same
    pixels and ``extra`` per-label covariates such as border flags or slope.
    """

    quantiles: tuple[float, ...]
    y: np.ndarray
    values: np.ndarray
    truth: np.ndarray | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_scenes(cls, pairs: Iterable[tuple[QuantileStack, SparseLabels]], monotonize: bool = False):
        ys, vals, quantiles = [], [], None
        for stack, labels in pairs:
            if quantiles is None:
                quantiles = stack.quantiles
            elif stack.quantiles != quantiles:
                raise ConfigurationError("all scenes must share one quantile vector")
            if monotonize:
                stack = stack.monotonized()
            ys.append(labels.heights)
            vals.append(stack.rasters[:, labels.rows, labels.cols].T)
        if quantiles is None:
            raise DomainError("no scenes to pool")
        return cls(quantiles, np.concatenate(ys), np.concatenate(vals, axis=0))

    def __len__(self):
        return len(self.y)

    def column(self, tau: float) -> np.ndarray:
        for k, q in enumerate(self.quantiles):
            if abs(q - tau) <= TAU_TOL:
                return self.values[:, k]
        raise ConfigurationError(f"no channel for quantile {tau} in {self.quantiles}")

    def interval(self, alpha: float) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = interval_quantiles(alpha)
        return self.column(lo), self.column(hi)

    def subset(self, mask) -> "PooledPredictions":
        mask = np.asarray(mask)
        return PooledPredictions(
            self.quantiles, self.y[mask], self.values[mask],
            None if self.truth is None else self.truth[mask],
            {k: v[mask] for k, v in self.extra.items()},
        )

    def ec(self, tau: float) -> float:
        _require_labels(self)
        return float(np.mean(self.column(tau) >= self.y))

    def piw(self, alpha: float) -> np.ndarray:
        lo, hi = self.interval(alpha)
        return hi - lo

    def mpiw(self, alpha: float) -> float:
        _require_labels(self)
        return float(np.mean(self.piw(alpha)))

    def covered(self, alpha: float) -> np.ndarray:
        lo, hi = self.interval(alpha)
        return (lo <= self.y) & (self.y <= hi)

    def picp(self, alpha: float) -> float:
        _require_labels(self)
        return float(np.mean(self.covered(alpha)))


def _bin_index(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Index of the half-open bin ``[e_k, e_k+1)`` holding each value; -1 if none."""
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[(idx < 0) | (idx >= len(edges) - 1)] = -1
    return idx


@dataclass
class BinnedCoverage:
    group_by: str
    edges: tuple[float, ...]
    counts: list[int]
    ec: dict[tuple[int, float], float]

    def rows(self) -> list[dict]:
        out = []
        for b, n in enumerate(self.counts):
            row = {"bin": b, "low": self.edges[b], "high": self.edges[b + 1], "count": n}
            row["ec"] = {tau_key(t): v for (bb, t), v in self.ec.items() if bb == b}
            out.append(row)
        return out


def _check_edges(bin_edges) -> np.ndarray:
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValidationError(f"bin edges must be strictly increasing, got {bin_edges}")
    return edges


def pooled_coverage_by_bin(pooled: PooledPredictions, bin_edges,
                           group_by: Literal["target", "prediction"] = "target") -> BinnedCoverage:
    edges = _check_edges(bin_edges)
    if group_by == "target":
        key = pooled.y
    elif group_by == "prediction":
        key = pooled.column(0.5)
    else:
        raise ConfigurationError(f"group_by must be 'target' or 'prediction', got {group_by!r}")
    idx = _bin_index(key, edges)
    counts, ec = [], {}
    for b in range(len(edges) - 1):
        sel = idx == b
        counts.append(int(sel.sum()))
        if not sel.any():
            continue
        for k, tau in enumerate(pooled.quantiles):
            ec[(b, tau)] = float(np.mean(pooled.values[sel, k] >= pooled.y[sel]))
    return BinnedCoverage(group_by, tuple(float(e) for e in edges), counts, ec)


def coverage_by_bin(stack: QuantileStack, labels: SparseLabels, bin_edges,
                    group_by: Literal["target", "prediction"] = "target") -> BinnedCoverage:
    """Empirical coverage per quantile within bins of label height or median prediction.

    Empty bins are reported with count 0 and no coverage entries.
    """
    _require_labels(labels)
    return pooled_coverage_by_bin(PooledPredictions.from_scenes([(stack, labels)]), bin_edges, group_by)


def pooled_asymmetry(pooled: PooledPredictions, alphas: Sequence[float]) -> dict[float, dict[str, dict]]:
    _require_labels(pooled)
    med = pooled.column(0.5)
    out = {}
    for a in alphas:
        lo, hi = pooled.interval(a)
        out[float(a)] = {
            "lower": five_number_summary(med - lo),
            "upper": five_number_summary(hi - med),
        }
    return out


def interval_asymmetry(stack: QuantileStack, labels: SparseLabels,
                       alphas: Sequence[float] = DEFAULT_ALPHAS) -> dict[float, dict[str, dict]]:
    """Five-number summaries of ``median - lower`` and ``upper - median`` per level."""
    if stack.index_of(0.5, TAU_TOL) is None:
        raise ConfigurationError("interval asymmetry needs the 0.5 quantile channel")
    return pooled_asymmetry(PooledPredictions.from_scenes([(stack, labels)]), alphas)


def pred_uncertainty_correlation(stack: QuantileStack, alpha: float, labels: SparseLabels) -> float:
    """Pearson correlation between the median prediction and the interval width."""
    _require_labels(labels)
    iv = make_interval(stack, alpha)
    return pearson(_at(stack.channel(0.5), labels), _at(piw(iv), labels))


# --- report ------------------------------------------------------------------


def point_metrics(pred: np.ndarray, target: np.ndarray) -> dict[str, float | None]:
    err = pred - target
    mse = float(np.mean(err ** 2))
    var = float(np.var(target))
    return {
        "mse": mse,
        "mae": float(np.mean(np.abs(err))),
        "r2": 1.0 - mse / var if var > 0 else None,
    }


@dataclass
class CalibrationReport:
    n_labels: int
    quantiles: tuple[float, ...]
    ec_per_quantile: dict[float, float]
    mpiw_per_alpha: dict[float, float]
    picp_per_alpha: dict[float, float]
    ec_by_target_bin: BinnedCoverage
    ec_by_prediction_bin: BinnedCoverage
    asymmetry: dict[float, dict[str, dict]]
    pearson_pred_uncertainty: float | None
    point: dict[str, float]
    point_vs_truth: dict[str, float] | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "n_labels": self.n_labels,
            "quantiles": list(self.quantiles),
            "ec_per_quantile": {tau_key(t): v for t, v in self.ec_per_quantile.items()},
            "mpiw_per_alpha": {tau_key(a): v for a, v in self.mpiw_per_alpha.items()},
            "picp_per_alpha": {tau_key(a): v for a, v in self.picp_per_alpha.items()},
            "ec_by_target_bin": _bins_json(self.ec_by_target_bin),
            "ec_by_prediction_bin": _bins_json(self.ec_by_prediction_bin),
            "asymmetry": {tau_key(a): v for a, v in self.asymmetry.items()},
            "pearson_pred_uncertainty": self.pearson_pred_uncertainty,
            "point": self.point,
            "point_vs_truth": self.point_vs_truth,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    def csv_rows(self) -> list[tuple[str, str, str, float]]:
        """Flat ``(metric, level, bin, value)`` rows."""
        rows = [("n_labels", "", "", float(self.n_labels))]
        rows += [("ec", tau_key(t), "", v) for t, v in self.ec_per_quantile.items()]
        rows += [("mpiw", tau_key(a), "", v) for a, v in self.mpiw_per_alpha.items()]
        rows += [("picp", tau_key(a), "", v) for a, v in self.picp_per_alpha.items()]
        for name, binned in (("ec_target_bin", self.ec_by_target_bin),
                             ("ec_prediction_bin", self.ec_by_prediction_bin)):
            for r in binned.rows():
                label = f"[{r['low']:g},{r['high']:g})"
                rows.append((f"{name}_count", "", label, float(r["count"])))
                rows += [(name, t, label, v) for t, v in r["ec"].items()]
        for a, sides in self.asymmetry.items():
            for side, summ in sides.items():
                rows += [(f"asym_{side}_{k}", tau_key(a), "", v) for k, v in summ.items()]
        if self.pearson_pred_uncertainty is not None:
            rows.append(("pearson_pred_piw", "", "", self.pearson_pred_uncertainty))
        rows += [(f"point_{k}", "", "", v) for k, v in self.point.items() if v is not None]
        if self.point_vs_truth:
            rows += [(f"truth_{k}", "", "", v) for k, v in self.point_vs_truth.items() if v is not None]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "level", "bin", "value"])
        for m, lvl, b, v in self.csv_rows():
            w.writerow([m, lvl, b, repr(float(v))])
        return buf.getvalue()


def _bins_json(binned: BinnedCoverage) -> list[dict]:
    rows = binned.rows()
    for r in rows:
        for k in ("low", "high"):
            if math.isinf(r[k]):
                r[k] = "inf" if r[k] > 0 else "-inf"
    return rows


def calibration_report(pooled: PooledPredictions, alphas: Sequence[float] = DEFAULT_ALPHAS,
                       target_bins=DEFAULT_TARGET_BINS, prediction_bins=DEFAULT_PREDICTION_BINS,
                       correlation_alpha: float = 0.8, meta: dict | None = None,
                       truth_metrics: dict[str, float] | None = None) -> CalibrationReport:
    _require_labels(pooled)
    median = pooled.column(0.5)
    try:
        r = pearson(median, pooled.piw(correlation_alpha))
    except (DomainError, ConfigurationError):
        r = None
    truth = truth_metrics
    if truth is None and pooled.truth is not None:
        truth = point_metrics(median, pooled.truth)
    point = point_metrics(median, pooled.y)
    point["ec_0.5"] = pooled.ec(0.5)
    return CalibrationReport(
        n_labels=len(pooled),
        quantiles=pooled.quantiles,
        ec_per_quantile={t: pooled.ec(t) for t in pooled.quantiles},
        mpiw_per_alpha={float(a): pooled.mpiw(a) for a in alphas},
        picp_per_alpha={float(a): pooled.picp(a) for a in alphas},
        ec_by_target_bin=pooled_coverage_by_bin(pooled, target_bins, "target"),
        ec_by_prediction_bin=pooled_coverage_by_bin(pooled, prediction_bins, "prediction"),
        asymmetry=pooled_asymmetry(pooled, alphas),
        pearson_pred_uncertainty=r,
        point=point,
        point_vs_truth=truth,
        meta=dict(meta or {}),
    )
