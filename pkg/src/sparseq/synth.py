"""Synthetic canopy scenes with sparse, track-structured, noisy labels.

A scene has a smooth terrain model, forest patches with sharp-ish edges on
top of a low-vegetation baseline, feature channels derived from the true
height and terrain, and labels sampled along straight tracks. Label noise
models are chosen so the conditional quantiles of a label given the scene are
known in closed form, which makes them usable as test oracles. Each track is
displaced by a constant geolocation offset in ``{-1, 0, 1}^2``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import ndtr, ndtri

from . import rng as rng_mod
from .analysis import slope_from_dem
from .core import Raster, SparseLabels, load_labels, load_raster, save_labels, save_raster
from .errors import ValidationError
from .stats import norm_ppf

NOISE_KINDS = ("none", "gaussian", "lognormal")
HEIGHT_SCALE = 20.0
SLOPE_SCALE = 30.0


@dataclass
class TerrainSpec:
    amplitude: float = 150.0
    length_scale: float = 12.0


@dataclass
class ForestSpec:
    coverage: float = 0.5
    mean_height: float = 25.0
    edge_sharpness: float = 10.0
    length_scale: float = 8.0
    height_variation: float = 0.3


@dataclass
class NoiseSpec:
    """``sigma`` is in metres for ``gaussian`` and in log units for ``lognormal``.

    With ``slope_gain > 0`` the noise grows with terrain slope:
    ``sigma * (1 + slope_gain * slope_deg / 10)``.
    """

    kind: str = "lognormal"
    sigma: float = 0.3
    slope_gain: float = 0.0


@dataclass
class TrackSpec:
    """Vertical tracks ``spacing`` columns apart, one footprint every ``step`` rows.

    ``offsets`` is ``"random"``, ``"zero"`` or an explicit list of
    ``(d_row, d_col)`` pairs, one per track (a single pair applies to all).
    """

    count: int = 8
    spacing: int = 6
    step: int = 6
    first_col: int | None = None
    margin: int = 1
    offsets: str | list = "random"


@dataclass
class SceneSpec:
    height: int = 128
    width: int = 128
    n_features: int = 6
    pixel_size: float = 10.0
    baseline_height: float = 1.0
    terrain: TerrainSpec = field(default_factory=TerrainSpec)
    forest: ForestSpec = field(default_factory=ForestSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    tracks: TrackSpec = field(default_factory=TrackSpec)
    seed: int = 0

    def __post_init__(self):
        if self.height < 3 or self.width < 3:
            raise ValidationError("scenes must be at least 3x3")
        if not 0.0 <= self.forest.coverage <= 1.0:
            raise ValidationError("forest coverage must lie in [0, 1]")
        if self.tracks.spacing < 1 or self.tracks.step < 1:
            raise ValidationError("track spacing and step must be >= 1")
        if self.noise.kind not in NOISE_KINDS:
            raise ValidationError(f"noise kind must be one of {NOISE_KINDS}")
        if self.n_features < 4:
            raise ValidationError("scenes need at least 4 feature channels")
        if self.baseline_height < 0:
            raise ValidationError("baseline height must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        parts = {"terrain": TerrainSpec, "forest": ForestSpec, "noise": NoiseSpec, "tracks": TrackSpec}
        for k, t in parts.items():
            if k in d and isinstance(d[k], dict):
                d[k] = t(**d[k])
        return cls(**d)


@dataclass
class GroundTruth:
    true_height: np.ndarray
    dem: np.ndarray
    slope: np.ndarray
    noise: NoiseSpec

    @property
    def sigma(self) -> np.ndarray:
        return self.noise.sigma * (1.0 + self.noise.slope_gain * self.slope / 10.0)

    def quantile(self, tau: float) -> np.ndarray:
        """Exact ``tau``-quantile of the label distribution at every pixel."""
        h = self.true_height
        kind = self.noise.kind
        if kind == "none":
            return h.copy()
        s = self.sigma
        if kind == "lognormal":
            return h * np.exp(s * norm_ppf(tau))
        # Gaussian noise truncated to positive heights by resampling
        p0 = ndtr(-h / s)
        return h + s * ndtri(p0 + tau * (1.0 - p0))

    def quantile_stack(self, quantiles):
        from .core import QuantileStack

        return QuantileStack(tuple(quantiles), np.stack([self.quantile(t) for t in quantiles]))


def _smooth_field(g: np.random.Generator, shape, length_scale: float) -> np.ndarray:
    f = ndimage.gaussian_filter(g.standard_normal(shape), sigma=length_scale, mode="reflect")
    sd = f.std()
    return (f - f.mean()) / (sd if sd > 0 else 1.0)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def generate_scene(spec: SceneSpec) -> tuple[Raster, GroundTruth]:
    """Feature raster and ground truth for ``spec``; deterministic in ``spec.seed``."""
    shape = (spec.height, spec.width)
    dem = _f32(spec.terrain.amplitude * _smooth_field(
        rng_mod.stream(spec.seed, rng_mod.TERRAIN), shape, spec.terrain.length_scale))

    fr = spec.forest
    g = rng_mod.stream(spec.seed, rng_mod.FOREST)
    patch = _smooth_field(g, shape, fr.length_scale)
    variation = _smooth_field(g, shape, 2.0 * fr.length_scale)
    if fr.coverage <= 0.0:
        cover = np.zeros(shape)
    elif fr.coverage >= 1.0:
        cover = np.ones(shape)
    else:
        thr = np.quantile(patch, 1.0 - fr.coverage)
        cover = 1.0 / (1.0 + np.exp(-fr.edge_sharpness * (patch - thr)))
    canopy = np.maximum(fr.mean_height * (1.0 + fr.height_variation * variation), 0.0)
    true_height = _f32(spec.baseline_height + cover * canopy)

    slope = slope_from_dem(dem, spec.pixel_size, 3)
    gd = rng_mod.stream(spec.seed, rng_mod.DISTRACTORS)
    channels = [
        true_height / HEIGHT_SCALE,
        ndimage.gaussian_filter(true_height, 1.0, mode="nearest") / HEIGHT_SCALE,
        slope / SLOPE_SCALE,
        (dem - dem.mean()) / max(spec.terrain.amplitude, 1.0),
    ]
    for _ in range(spec.n_features - len(channels)):
        channels.append(_smooth_field(gd, shape, 3.0))
    features = Raster(np.stack(channels).astype(np.float32))
    return features, GroundTruth(true_height, dem, slope, spec.noise)


def track_offsets(spec: SceneSpec) -> list[tuple[int, int]]:
    n = spec.tracks.count
    mode = spec.tracks.offsets
    if isinstance(mode, str):
        if mode == "zero":
            return [(0, 0)] * n
        if mode == "random":
            d = rng_mod.stream(spec.seed, rng_mod.OFFSETS).integers(-1, 2, size=(n, 2))
            return [(int(a), int(b)) for a, b in d]
        raise ValidationError(f"unknown offset mode {mode!r}")
    pairs = [tuple(int(v) for v in p) for p in mode]
    if len(pairs) == 1:
        pairs = pairs * n
    if len(pairs) != n or any(abs(a) > 1 or abs(b) > 1 for a, b in pairs):
        raise ValidationError("explicit offsets need one pair in {-1,0,1}^2 per track")
    return pairs


def track_columns(spec: SceneSpec) -> list[int]:
    t = spec.tracks
    span = (t.count - 1) * t.spacing
    first = (spec.width - 1 - span) // 2 if t.first_col is None else t.first_col
    cols = [first + i * t.spacing for i in range(t.count)]
    if t.count < 1 or cols[0] < t.margin or cols[-1] > spec.width - 1 - t.margin:
        raise ValidationError(
            f"{t.count} tracks with spacing {t.spacing} do not fit in width {spec.width}"
        )
    return cols


@dataclass
class LabelSample:
    labels: SparseLabels
    offsets: dict[int, tuple[int, int]]
    n_points: int
    dropped_off_grid: int
    dropped_duplicate: int
    dropped_nonpositive: int


def sample_labels(truth: GroundTruth, spec: SceneSpec) -> LabelSample:
    """Noisy labels along the tracks, each track displaced by its geolocation offset.

    The height is drawn at the footprint's true pixel and recorded at the
    displaced pixel. Displaced points outside the grid are dropped, as are
    later points landing on an already labelled pixel.
    """
    h, w = truth.true_height.shape
    t = spec.tracks
    rows = np.arange(t.margin, h - t.margin, t.step)
    offsets = track_offsets(spec)
    sigma = truth.sigma
    kind = spec.noise.kind
    pts = []
    seen = set()
    counts = dict(total=0, off=0, dup=0, nonpos=0)
    for i, col in enumerate(track_columns(spec)):
        g = rng_mod.stream(spec.seed, rng_mod.TRACK_NOISE, i)
        true = truth.true_height[rows, col]
        s = sigma[rows, col]
        if kind == "none":
            y = true.copy()
        elif kind == "lognormal":
            y = true * np.exp(s * g.standard_normal(len(rows)))
        else:
            y = true + s * g.standard_normal(len(rows))
            bad = (y <= 0) & (true > 0)
            while bad.any():
                y[bad] = true[bad] + s[bad] * g.standard_normal(int(bad.sum()))
                bad = (y <= 0) & (true > 0)
        dr, dc = offsets[i]
        for r, yv in zip(rows, y):
            counts["total"] += 1
            rr, cc = int(r) + dr, int(col) + dc
            if not (0 <= rr < h and 0 <= cc < w):
                counts["off"] += 1
            elif not yv > 0:
                counts["nonpos"] += 1
            elif (rr, cc) in seen:
                counts["dup"] += 1
            else:
                seen.add((rr, cc))
                pts.append((i, rr, cc, float(yv)))
    labels = SparseLabels.from_points(pts, h, w)
    return LabelSample(labels, dict(enumerate(offsets)), counts["total"], counts["off"],
                       counts["dup"], counts["nonpos"])


# -- scene directories ---------------------------------------------------------


@dataclass
class Scene:
    features: Raster
    truth: GroundTruth
    labels: SparseLabels
    offsets: dict[int, tuple[int, int]]
    spec: SceneSpec


def make_scene(spec: SceneSpec) -> Scene:
    features, truth = generate_scene(spec)
    sample = sample_labels(truth, spec)
    return Scene(features, truth, sample.labels, sample.offsets, spec)


def write_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_raster(scene.features, d / "features.qrg")
    save_raster(Raster(scene.truth.true_height[None]), d / "true_height.qrg")
    save_raster(Raster(scene.truth.dem[None]), d / "dem.qrg")
    save_labels(scene.labels, d / "labels.csv")
    sidecar = {
        "seed": scene.spec.seed,
        "spec": scene.spec.to_dict(),
        "noise": asdict(scene.spec.noise),
        "offsets": {str(k): list(v) for k, v in scene.offsets.items()},
        "n_labels": len(scene.labels),
    }
    (d / "truth.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_scene(directory) -> Scene:
    d = Path(directory)
    meta = json.loads((d / "truth.json").read_text(encoding="utf-8"))
    spec = SceneSpec.from_dict(meta["spec"])
    features = load_raster(d / "features.qrg")
    true_height = load_raster(d / "true_height.qrg").data[0].astype(np.float64)
    dem = load_raster(d / "dem.qrg").data[0].astype(np.float64)
    truth = GroundTruth(true_height, dem, slope_from_dem(dem, spec.pixel_size, 3), spec.noise)
    labels = load_labels(d / "labels.csv", spec.height, spec.width)
    offsets = {int(k): (int(v[0]), int(v[1])) for k, v in meta["offsets"].items()}
    return Scene(features, truth, labels, offsets, spec)
