"""End-to-end experiment steps shared by the CLI and the scripts.

A run directory looks like::

    run/
      config.txt              resolved configuration (every key)
      data/train/scene_000/   features.qrg, true_height.qrg, dem.qrg, labels.csv, truth.json
      data/test/scene_000/
      model.qrm               checkpoint
      loss_trace.csv          one row per optimizer step
      predictions/scene_000/  one QRG1 file per output channel + manifest.json
      report.json, report.csv, ec_curve.svg, scatter.svg
      analysis/               border / slope / suspect-label outputs
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .analysis import (
    detect_suspect_labels,
    forest_border_mask,
    slope_bin_names,
    slope_from_dem,
    summarise_groups,
)
from .config import ExperimentConfig, dump_config
from .core import Raster, save_raster
from .errors import ConfigurationError, SparseqError
from .metrics import (
    DEFAULT_QUANTILES,
    CalibrationReport,
    PooledPredictions,
    calibration_report,
    point_metrics,
    tau_key,
)
from .model import (
    SurrogateModel,
    gaussian_interval,
    load_checkpoint,
    outputs_to_stack,
    point_estimate,
    predict_to_files,
    save_checkpoint,
)
from .plots import boxplot, line_plot, scatter_plot
from .synth import Scene, load_scene, make_scene, write_scene
from .train import TrainResult, train

log = logging.getLogger(__name__)

SPLITS = {"train": 0, "test": 1}
COMPARISON_COLUMNS_HEAD = ("run", "loss_kind", "use_shift_loss", "n_labels", "truth_mae", "mae", "ec_0.5")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def scene_seed(cfg: ExperimentConfig, split: str, index: int) -> int:
    return rng_mod.derived_seed(cfg.run.seed, rng_mod.SCENES, SPLITS[split], index)


def build_scenes(cfg: ExperimentConfig, split: str) -> list[Scene]:
    n = cfg.run.n_train_scenes if split == "train" else cfg.run.n_test_scenes
    return [make_scene(cfg.scene_spec(scene_seed(cfg, split, i))) for i in range(n)]


def scene_dirs(run_dir, split: str) -> list[Path]:
    return sorted((Path(run_dir) / "data" / split).glob("scene_*"))


def synthesize(cfg: ExperimentConfig, run_dir) -> dict[str, list[Path]]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    written = {}
    for split in SPLITS:
        paths = []
        for i, scene in enumerate(build_scenes(cfg, split)):
            d = run_dir / "data" / split / f"scene_{i:03d}"
            write_scene(scene, d)
            paths.append(d)
        written[split] = paths
    return written


def load_split(run_dir, split: str) -> list[Scene]:
    dirs = scene_dirs(run_dir, split)
    if not dirs:
        raise SparseqError(f"no {split} scenes under {Path(run_dir) / 'data' / split}; run 'synth' first")
    return [load_scene(d) for d in dirs]


# -- training ------------------------------------------------------------------


def train_model(cfg: ExperimentConfig, scenes: list[Scene]) -> TrainResult:
    model = SurrogateModel(scenes[0].features.channels, cfg.train.loss_kind, seed=cfg.train.seed)
    return train(model, [(s.features, s.labels) for s in scenes], cfg.train)


def trace_csv(result: TrainResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "lr", "loss", "grad_norm"])
    for r in result.trace:
        w.writerow([r.step, r.epoch, repr(r.lr), repr(r.loss), repr(r.grad_norm)])
    return buf.getvalue()


def save_training(result: TrainResult, run_dir) -> Path:
    run_dir = Path(run_dir)
    path = run_dir / "model.qrm"
    save_checkpoint(result.model, path)
    (run_dir / "loss_trace.csv").write_text(trace_csv(result), encoding="utf-8")
    return path


# -- prediction / evaluation ---------------------------------------------------


@dataclass
class Evaluated:
    """Raw outputs and pooled label-level values of a model on a set of scenes."""

    kind: str
    scenes: list[Scene]
    raws: list[np.ndarray]
    pooled: PooledPredictions

    def stacks(self):
        return [outputs_to_stack(self.kind, r) for r in self.raws]


def evaluate_scenes(model: SurrogateModel, scenes: list[Scene], monotonize: bool = False) -> Evaluated:
    raws = [model.predict_raw(s.features) for s in scenes]
    stacks = [outputs_to_stack(model.loss_kind, r) for r in raws]
    pooled = PooledPredictions.from_scenes(
        [(st, s.labels) for st, s in zip(stacks, scenes)], monotonize=monotonize)
    return Evaluated(model.loss_kind, scenes, raws, pooled)


def truth_metrics(ev: Evaluated) -> dict[str, float]:
    """Point-estimate errors against noise-free heights over all pixels."""
    pred = np.concatenate([point_estimate(ev.kind, r).ravel() for r in ev.raws])
    truth = np.concatenate([s.truth.true_height.ravel() for s in ev.scenes])
    return point_metrics(pred, truth)


def report_for(ev: Evaluated, cfg: ExperimentConfig, meta: dict | None = None) -> CalibrationReport:
    return calibration_report(
        ev.pooled, cfg.run.alphas, cfg.run.target_bins, cfg.run.prediction_bins,
        cfg.run.correlation_alpha, meta=meta, truth_metrics=truth_metrics(ev),
    )


def report_schema() -> dict:
    return json.loads(resources.files("sparseq").joinpath("schemas/report.schema.json").read_text("utf-8"))


def validate_report(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, report_schema())


def ec_curve_svg(curves: dict[str, dict[float, float]]) -> str:
    series = {}
    for name, ec in curves.items():
        taus = sorted(ec)
        series[name] = (taus, [ec[t] for t in taus])
    return line_plot(series, "Empirical coverage vs nominal quantile", "nominal quantile",
                     "empirical coverage", diagonal=True)


def model_label(meta: dict) -> str:
    return f"{meta['loss_kind']} {'with' if meta['use_shift_loss'] else 'without'} shift"


def write_evaluation(model: SurrogateModel, cfg: ExperimentConfig, run_dir, checkpoint=None) -> CalibrationReport:
    run_dir = Path(run_dir)
    scenes = load_split(run_dir, "test")
    ev = evaluate_scenes(model, scenes, cfg.run.monotonize)
    meta = {
        "loss_kind": model.loss_kind,
        "use_shift_loss": bool(cfg.train.use_shift_loss),
        "n_scenes": len(scenes),
        "seed": cfg.run.seed,
    }
    if checkpoint is not None:
        meta["checkpoint_sha256"] = sha256_file(checkpoint)
    report = report_for(ev, cfg, meta)
    doc = report.to_dict()
    validate_report(doc)
    (run_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (run_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (run_dir / "ec_curve.svg").write_text(
        ec_curve_svg({model_label(meta): report.ec_per_quantile}), encoding="utf-8")
    a = cfg.run.correlation_alpha
    (run_dir / "scatter.svg").write_text(scatter_plot(
        ev.pooled.y, ev.pooled.column(0.5), ev.pooled.piw(a) if _has_alpha(ev.pooled, a) else ev.pooled.y,
        f"label vs median prediction, colour = PIW at alpha={a:g}", "label height [m]",
        "predicted height [m]"), encoding="utf-8")
    return report


def _has_alpha(pooled: PooledPredictions, alpha: float) -> bool:
    try:
        pooled.interval(alpha)
        return True
    except ConfigurationError:
        return False


def write_predictions(model: SurrogateModel, run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    out = []
    for d in scene_dirs(run_dir, "test"):
        scene = load_scene(d)
        out.append(predict_to_files(model, scene.features, run_dir / "predictions" / d.name))
    if not out:
        raise SparseqError(f"no test scenes under {run_dir}; run 'synth' first")
    return out


# -- matched-coverage comparison ----------------------------------------------


def interval_curve(ev: Evaluated, alphas) -> list[tuple[float, float, float]]:
    """``(alpha, PICP, MPIW)`` pooled over scenes.

    Likelihood models can form an interval at any level; quantile models only
    at levels whose two quantiles were trained.
    """
    rows = []
    for a in alphas:
        if ev.kind == "quantile":
            if not _has_alpha(ev.pooled, a):
                continue
            rows.append((float(a), ev.pooled.picp(a), ev.pooled.mpiw(a)))
            continue
        covered, widths = [], []
        for raw, s in zip(ev.raws, ev.scenes):
            lo, hi = gaussian_interval(ev.kind, raw, a)
            r, c, y = s.labels.rows, s.labels.cols, s.labels.heights
            covered.append((lo[r, c] <= y) & (y <= hi[r, c]))
            widths.append(hi[r, c] - lo[r, c])
        rows.append((float(a), float(np.mean(np.concatenate(covered))),
                     float(np.mean(np.concatenate(widths)))))
    return rows


def mpiw_at_picp(curve: list[tuple[float, float, float]], target: float) -> float:
    """MPIW interpolated linearly at a target PICP along a curve sorted by level."""
    picps = np.array([c[1] for c in curve])
    widths = np.array([c[2] for c in curve])
    order = np.argsort(picps, kind="stable")
    picps, widths = picps[order], widths[order]
    if target < picps[0] or target > picps[-1]:
        return float("nan")
    return float(np.interp(target, picps, widths))


# -- condition analysis --------------------------------------------------------


def analyze(model: SurrogateModel, cfg: ExperimentConfig, scenes: list[Scene]) -> dict:
    """Border, slope and suspect-label analysis pooled over ``scenes``."""
    an = cfg.analysis
    ev = evaluate_scenes(model, scenes, cfg.run.monotonize)
    widths, covered, border_keys, slope_vals, per_scene, suspects = [], [], [], [], [], []
    for idx, (stack, scene) in enumerate(zip(ev.stacks(), scenes)):
        if cfg.run.monotonize:
            stack = stack.monotonized()
        lab = scene.labels
        point = stack.channel(0.5)
        border = forest_border_mask(point, an.border_threshold)
        slope = slope_from_dem(scene.truth.dem, scene.spec.pixel_size, an.slope_window)
        lo_i, hi_i = _interval_indices(stack.quantiles, an.alpha)
        lo, hi = stack.rasters[lo_i], stack.rasters[hi_i]
        r, c, y = lab.rows, lab.cols, lab.heights
        widths.append(hi[r, c] - lo[r, c])
        covered.append((lo[r, c] <= y) & (y <= hi[r, c]))
        border_keys.append(border[r, c].astype(np.int64))
        slope_vals.append(slope[r, c])
        per_scene.append((border, slope))
        for s in detect_suspect_labels(stack, lab, an.suspect_pred_ceiling, an.suspect_label_floor,
                                       an.suspect_quantile):
            suspects.append((idx, s))
    widths = np.concatenate(widths)
    covered = np.concatenate(covered)
    border_keys = np.concatenate(border_keys)
    slope_vals = np.concatenate(slope_vals)
    edges = np.asarray(an.slope_bins, dtype=np.float64)
    slope_keys = np.searchsorted(edges, slope_vals, side="right") - 1
    slope_keys[slope_keys >= len(edges) - 1] = -1
    if np.any(slope_keys < 0):
        raise ConfigurationError("analysis.slope_bins must cover every slope value (start at 0)")
    return {
        "alpha": an.alpha,
        "border": summarise_groups(widths, covered, border_keys, ["interior", "border"]),
        "slope": summarise_groups(widths, covered, slope_keys, slope_bin_names(list(edges))),
        "suspects": suspects,
        "per_scene": per_scene,
    }


def _interval_indices(quantiles, alpha):
    lo, hi = 0.5 - alpha / 2, 0.5 + alpha / 2
    idx = [next((k for k, q in enumerate(quantiles) if abs(q - t) <= 1e-9), None) for t in (lo, hi)]
    if None in idx:
        raise ConfigurationError(f"alpha={alpha} needs quantiles ({lo:g}, {hi:g})")
    return idx


def _summary_rows(groups) -> list[dict]:
    rows = []
    for g in groups:
        row = {"group": g.name, "count": g.count, "fraction": g.fraction, "picp": g.picp}
        row.update({f"piw_{k}": v for k, v in (g.piw or {}).items()})
        rows.append(row)
    return rows


def _rows_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(k) is None else r.get(k) for k in columns])
    return buf.getvalue()


SUMMARY_COLUMNS = ["group", "count", "fraction", "picp", "piw_min", "piw_q1", "piw_median", "piw_q3", "piw_max"]


def write_analysis(model: SurrogateModel, cfg: ExperimentConfig, run_dir) -> dict:
    run_dir = Path(run_dir)
    scenes = load_split(run_dir, "test")
    res = analyze(model, cfg, scenes)
    out = run_dir / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    border_rows = _summary_rows(res["border"])
    slope_rows = _summary_rows(res["slope"])
    (out / "border_summary.csv").write_text(_rows_csv(border_rows, SUMMARY_COLUMNS), encoding="utf-8")
    (out / "slope_summary.csv").write_text(_rows_csv(slope_rows, SUMMARY_COLUMNS), encoding="utf-8")
    alpha = res["alpha"]
    (out / "border_boxplot.svg").write_text(boxplot(
        {g.name: g.piw for g in res["border"] if g.count}, f"PIW at alpha={alpha:g} by forest border",
        "PIW [m]"), encoding="utf-8")
    (out / "slope_boxplot.svg").write_text(boxplot(
        {g.name: g.piw for g in res["slope"] if g.count}, f"PIW at alpha={alpha:g} by slope [deg]",
        "PIW [m]"), encoding="utf-8")
    an = cfg.analysis
    reason = (f"q{an.suspect_quantile:g}<{an.suspect_pred_ceiling:g}m"
              f"&label>{an.suspect_label_floor:g}m")
    sus = res["suspects"]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["track_id", "row", "col", "height", "scene", "prediction", "reason"])
    for i, s in sus:
        wr.writerow([s.track_id, s.row, s.col, repr(s.height), i, repr(s.prediction), reason])
    (out / "suspect_labels.csv").write_text(buf.getvalue(), encoding="utf-8")
    for i, (border, slope) in enumerate(res["per_scene"]):
        d = out / f"scene_{i:03d}"
        d.mkdir(exist_ok=True)
        save_raster(Raster(border.astype(np.float32)[None]), d / "border_mask.qrg")
        save_raster(Raster(slope.astype(np.float32)[None]), d / "slope.qrg")
    doc = {
        "alpha": alpha,
        "border": border_rows,
        "slope": [r for r in slope_rows if r["count"] > 0],
        "suspect_rule": {
            "quantile": an.suspect_quantile,
            "pred_ceiling": an.suspect_pred_ceiling,
            "label_floor": an.suspect_label_floor,
        },
        "n_suspects": len(sus),
    }
    (out / "analysis.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return doc


# -- multi-run comparison -----------------------------------------------------


def comparison_columns(alphas) -> list[str]:
    return (list(COMPARISON_COLUMNS_HEAD)
            + [f"mpiw_{tau_key(a)}" for a in alphas]
            + [f"picp_{tau_key(a)}" for a in alphas])


def comparison_rows(run_dirs) -> tuple[list[str], list[dict], dict[str, dict[float, float]]]:
    rows, curves, alphas = [], {}, None
    for rd in run_dirs:
        rd = Path(rd)
        path = rd / "report.json"
        if not path.is_file():
            raise ConfigurationError(f"run directory {rd} has no report.json")
        doc = json.loads(path.read_text(encoding="utf-8"))
        run_alphas = sorted(float(a) for a in doc["mpiw_per_alpha"])
        alphas = run_alphas if alphas is None else [a for a in alphas if a in run_alphas]
        meta = doc.get("meta", {})
        row = {
            "run": rd.name,
            "loss_kind": meta.get("loss_kind", ""),
            "use_shift_loss": meta.get("use_shift_loss", ""),
            "n_labels": doc["n_labels"],
            "truth_mae": (doc.get("point_vs_truth") or {}).get("mae"),
            "mae": doc["point"]["mae"],
            "ec_0.5": doc["point"]["ec_0.5"],
        }
        for a in run_alphas:
            row[f"mpiw_{tau_key(a)}"] = doc["mpiw_per_alpha"][tau_key(a)]
            row[f"picp_{tau_key(a)}"] = doc["picp_per_alpha"][tau_key(a)]
        rows.append(row)
        curves[rd.name] = {float(k): v for k, v in doc["ec_per_quantile"].items()}
    return comparison_columns(alphas or []), rows, curves


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return f"{v:.4f}" if isinstance(v, float) else v


def write_comparison(run_dirs, out_dir) -> Path:
    columns, rows, curves = comparison_rows(run_dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fmt_rows = [{k: _cell(v) for k, v in r.items()} for r in rows]
    (out / "comparison.csv").write_text(_rows_csv(fmt_rows, columns), encoding="utf-8")
    md = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in fmt_rows:
        md.append("| " + " | ".join("" if r.get(c) is None else str(r.get(c)) for c in columns) + " |")
    (out / "comparison.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    (out / "ec_curves.svg").write_text(ec_curve_svg(curves), encoding="utf-8")
    return out / "comparison.csv"


def load_model(run_dir, checkpoint=None) -> tuple[SurrogateModel, Path]:
    path = Path(checkpoint) if checkpoint else Path(run_dir) / "model.qrm"
    if not path.is_file():
        raise SparseqError(f"checkpoint {path} not found; run 'train' first")
    return load_checkpoint(path), path


__all__ = [
    "synthesize", "load_split", "train_model", "save_training", "evaluate_scenes", "report_for",
    "write_evaluation", "write_predictions", "analyze", "write_analysis", "write_comparison",
    "interval_curve", "mpiw_at_picp", "load_model", "DEFAULT_QUANTILES",
]
