"""Experiment protocols behind ``scripts/`` and the acceptance suite.

Each protocol is a set of config overrides on top of the defaults plus a
function that runs it and returns plain numbers. Scripts print or save
them; tests compare them against thresholds.
"""

from __future__ import annotations

import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cli
from . import experiment as exp
from .analysis import forest_border_mask
from .config import ExperimentConfig, dump_config, parse_config
from .metrics import DEFAULT_ALPHAS, DEFAULT_QUANTILES
from .model import point_estimate

# Dense vertical tracks so 30 scenes of 128x128 give >= 50k labels.
_DENSE_128 = {
    "scene.height": "128", "scene.width": "128",
    "tracks.count": "14", "tracks.spacing": "9", "tracks.step": "1",
    "noise.kind": "lognormal", "noise.sigma": "0.3",
}

PROTOCOLS: dict[str, dict[str, str]] = {
    # zero offsets: calibration is measured against labels at their recorded pixel
    "calibration": {
        **_DENSE_128, "tracks.offsets": "zero",
        "run.n_train_scenes": "30", "run.n_test_scenes": "30",
        "train.learning_rate": "0.01", "train.epochs": "100", "train.batch_size": "5",
        "train.use_shift_loss": "true",
    },
    "shift_benefit": {
        "scene.height": "64", "scene.width": "64",
        # small sharp-edged patches so a one-pixel offset changes many labels
        "forest.length_scale": "4", "forest.edge_sharpness": "20",
        "tracks.count": "7", "tracks.spacing": "9", "tracks.step": "1", "tracks.offsets": "random",
        "noise.kind": "lognormal", "noise.sigma": "0.3",
        "run.n_train_scenes": "10", "run.n_test_scenes": "5",
        "train.learning_rate": "0.01", "train.epochs": "150",
    },
    "conditions": {
        "scene.height": "64", "scene.width": "64",
        "tracks.count": "7", "tracks.spacing": "9", "tracks.step": "1", "tracks.offsets": "random",
        # additive noise so interval width tracks slope rather than canopy height
        "noise.kind": "gaussian", "noise.sigma": "1.0", "noise.slope_gain": "2.0",
        "terrain.amplitude": "40", "scene.baseline_height": "8",
        "analysis.slope_bins": "0,5,10,15,20,inf",
        "run.n_train_scenes": "10", "run.n_test_scenes": "30",
        # unshifted loss: uncorrected offsets are what widens border intervals here
        "train.learning_rate": "0.01", "train.epochs": "150", "train.use_shift_loss": "false",
    },
    "ablation": {
        "scene.height": "64", "scene.width": "64",
        "tracks.count": "7", "tracks.spacing": "9", "tracks.step": "1", "tracks.offsets": "random",
        "noise.kind": "lognormal", "noise.sigma": "0.3",
        "run.n_train_scenes": "10", "run.n_test_scenes": "10",
        "train.learning_rate": "0.01", "train.epochs": "150",
    },
}


def protocol_config(name: str, **overrides) -> ExperimentConfig:
    """Config of a named protocol; keyword overrides use ``section__key`` names."""
    if name not in PROTOCOLS:
        raise KeyError(f"unknown protocol {name!r}; choose from {sorted(PROTOCOLS)}")
    sets = dict(PROTOCOLS[name])
    sets.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
    return parse_config("", sets)


def protocol_text(name: str) -> str:
    return dump_config(protocol_config(name))


def _with(cfg: ExperimentConfig, **sets) -> ExperimentConfig:
    text = dump_config(cfg)
    return parse_config(text, {k.replace("__", "."): str(v) for k, v in sets.items()})


# -- calibration recovery -------------------------------------------------------


@dataclass
class CalibrationResult:
    n_labels: int
    ec: dict[float, float]
    picp: dict[float, float]
    mpiw: dict[float, float]
    asymmetry_upper: float
    asymmetry_lower: float
    train_seconds: float
    evaluated: exp.Evaluated = field(repr=False)
    model: object = field(repr=False)

    def max_ec_error(self) -> float:
        return max(abs(v - t) for t, v in self.ec.items())

    def max_picp_error(self) -> float:
        return max(abs(v - a) for a, v in self.picp.items())


def calibration_recovery(cfg: ExperimentConfig | None = None, asym_alpha: float = 0.9) -> CalibrationResult:
    """Train one quantile model and measure pooled calibration on held-out scenes."""
    cfg = cfg or protocol_config("calibration")
    t0 = time.perf_counter()
    result = exp.train_model(cfg, exp.build_scenes(cfg, "train"))
    seconds = time.perf_counter() - t0
    ev = exp.evaluate_scenes(result.model, exp.build_scenes(cfg, "test"))
    p = ev.pooled
    lo, hi = p.interval(asym_alpha)
    med = p.column(0.5)
    return CalibrationResult(
        n_labels=len(p.y),
        ec={t: p.ec(t) for t in DEFAULT_QUANTILES},
        picp={a: p.picp(a) for a in DEFAULT_ALPHAS},
        mpiw={a: p.mpiw(a) for a in DEFAULT_ALPHAS},
        asymmetry_upper=float(np.median(hi - med)),
        asymmetry_lower=float(np.median(med - lo)),
        train_seconds=seconds,
        evaluated=ev,
        model=result.model,
    )


# -- shift-loss benefit ------------------------------------------------------------


@dataclass
class ShiftComparison:
    seed: int
    mae: dict[bool, float]
    border_piw: dict[bool, float]
    interior_piw: dict[bool, float]

    def mae_better(self) -> bool:
        return self.mae[True] < self.mae[False]

    def border_better(self) -> bool:
        return self.border_piw[True] < self.border_piw[False]


def _interval_width(raw: np.ndarray, alpha: float) -> np.ndarray:
    lo = DEFAULT_QUANTILES.index(round(0.5 - alpha / 2, 10))
    hi = DEFAULT_QUANTILES.index(round(0.5 + alpha / 2, 10))
    return raw[hi] - raw[lo]


def shift_benefit_seed(cfg: ExperimentConfig, seed: int) -> ShiftComparison:
    """Train with and without the shift loss on the same scenes.

    MAE is against noise-free heights over every test pixel. The border mask
    comes from the true heights so both models are compared on the same pixels.
    """
    base = _with(cfg, run__seed=seed, train__seed=seed, train__loss_kind="quantile")
    train_scenes = exp.build_scenes(base, "train")
    test_scenes = exp.build_scenes(base, "test")
    alpha = base.analysis.alpha
    borders = [forest_border_mask(s.truth.true_height, base.analysis.border_threshold) for s in test_scenes]
    mae, border, interior = {}, {}, {}
    for shift in (True, False):
        c = _with(base, train__use_shift_loss=str(shift).lower())
        model = exp.train_model(c, train_scenes).model
        raws = [model.predict_raw(s.features) for s in test_scenes]
        err = np.concatenate([np.abs(point_estimate("quantile", r) - s.truth.true_height).ravel()
                              for r, s in zip(raws, test_scenes)])
        widths = [_interval_width(r, alpha) for r in raws]
        mae[shift] = float(np.mean(err))
        border[shift] = float(np.median(np.concatenate([w[b] for w, b in zip(widths, borders)])))
        interior[shift] = float(np.median(np.concatenate([w[~b] for w, b in zip(widths, borders)])))
    return ShiftComparison(seed, mae, border, interior)


def shift_benefit(cfg: ExperimentConfig | None = None, seeds=range(5)) -> list[ShiftComparison]:
    cfg = cfg or protocol_config("shift_benefit")
    return [shift_benefit_seed(cfg, s) for s in seeds]


def shift_verdict(rows: list[ShiftComparison]) -> dict[str, bool]:
    """Majority of seeds and pooled means, for MAE and for border PIW."""
    n = len(rows)
    mean = lambda key, flag: float(np.mean([getattr(r, key)[flag] for r in rows]))  # noqa: E731
    return {
        "mae_majority": sum(r.mae_better() for r in rows) > n / 2,
        "mae_mean": mean("mae", True) < mean("mae", False),
        "border_majority": sum(r.border_better() for r in rows) > n / 2,
        "border_mean": mean("border_piw", True) < mean("border_piw", False),
    }


# -- condition analysis -----------------------------------------------------------


@dataclass
class ConditionResult:
    border_median: float
    interior_median: float
    slope_medians: list[tuple[str, int, float]]

    def slope_nondecreasing(self) -> bool:
        m = [v for _, _, v in self.slope_medians]
        return all(b >= a for a, b in zip(m, m[1:])) and len(m) >= 2 and m[-1] > m[0]


def condition_study(cfg: ExperimentConfig | None = None) -> ConditionResult:
    """Border and slope PIW summaries of one trained model on slope-driven noise."""
    cfg = cfg or protocol_config("conditions")
    model = exp.train_model(cfg, exp.build_scenes(cfg, "train")).model
    res = exp.analyze(model, cfg, exp.build_scenes(cfg, "test"))
    by = {g.name: g for g in res["border"]}
    slopes = [(g.name, g.count, g.piw["median"]) for g in res["slope"] if g.count > 0 and g.piw]
    return ConditionResult(by["border"].piw["median"], by["interior"].piw["median"], slopes)


# -- ablation matrix ----------------------------------------------------------------

ABLATION_KINDS = ("quantile", "gaussian", "log_gaussian")
MATCH_LEVELS = tuple(np.round(np.arange(0.05, 1.0, 0.01), 2))


def variant_name(kind: str, shift: bool) -> str:
    return f"{kind}_{'shift' if shift else 'noshift'}"


def run_ablation(out_dir, cfg: ExperimentConfig | None = None, quiet: bool = True) -> Path:
    """Six CLI runs sharing one synthesized dataset, then a comparison table.

    Returns the directory holding ``comparison.csv`` and ``comparison.md``.
    """
    cfg = cfg or protocol_config("ablation")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "ablation_config.txt"
    cfg_path.write_text(dump_config(cfg), encoding="utf-8")
    flags = ["--quiet"] if quiet else []
    data = out / "data_run"
    _cli(["synth", "--config", str(cfg_path), "--out", str(data)] + flags)
    dirs = []
    for kind in ABLATION_KINDS:
        for shift in (True, False):
            d = out / variant_name(kind, shift)
            if d.exists():
                shutil.rmtree(d)
            shutil.copytree(data / "data", d / "data")
            common = ["--config", str(cfg_path), "--out", str(d)] + flags
            _cli(["train", "--loss", kind, "--shift", str(shift).lower()] + common)
            _cli(["eval"] + common[2:])
            dirs.append(d)
    _cli(["report", *map(str, dirs), "--out", str(out / "comparison")] + flags)
    return out / "comparison"


def _cli(argv: list[str]) -> None:
    code = cli.main(argv)
    if code != cli.EXIT_OK:
        raise RuntimeError(f"sparseq {' '.join(argv)} exited with {code}")


@dataclass
class MatchedWidth:
    shift: bool
    alpha: float
    picp: float
    quantile_mpiw: float
    gaussian_mpiw: float


def matched_widths(out_dir, cfg: ExperimentConfig | None = None) -> list[MatchedWidth]:
    """Quantile MPIW at each trained level against Gaussian MPIW at the same PICP.

    The Gaussian curve is traced over a fine grid of levels and interpolated.
    """
    cfg = cfg or protocol_config("ablation")
    out = Path(out_dir)
    scenes = exp.load_split(out / "data_run", "test")
    rows = []
    for shift in (True, False):
        q = exp.evaluate_scenes(exp.load_model(out / variant_name("quantile", shift))[0], scenes)
        g = exp.evaluate_scenes(exp.load_model(out / variant_name("gaussian", shift))[0], scenes)
        g_curve = exp.interval_curve(g, MATCH_LEVELS)
        for a, p, w in exp.interval_curve(q, cfg.run.alphas):
            rows.append(MatchedWidth(shift, a, p, w, exp.mpiw_at_picp(g_curve, p)))
    return rows
