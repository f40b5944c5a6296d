"""Flat ``section.key = value`` experiment configuration.

Lines starting with ``#`` are comments. Unknown keys are rejected. Every key
has a default, so an empty file is a valid configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .metrics import DEFAULT_ALPHAS, DEFAULT_PREDICTION_BINS, DEFAULT_TARGET_BINS
from .synth import ForestSpec, NoiseSpec, SceneSpec, TerrainSpec, TrackSpec
from .train import TrainerConfig
from .analysis import DEFAULT_SLOPE_BINS


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(";", ",").split(",") if x.strip())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if v is None:
        return "auto"
    return str(v)


@dataclass
class RunSpec:
    seed: int = 0
    n_train_scenes: int = 10
    n_test_scenes: int = 5
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    target_bins: tuple[float, ...] = DEFAULT_TARGET_BINS
    prediction_bins: tuple[float, ...] = DEFAULT_PREDICTION_BINS
    monotonize: bool = False
    correlation_alpha: float = 0.8


@dataclass
class AnalysisSpec:
    alpha: float = 0.8
    border_threshold: float = 10.0
    slope_window: int = 3
    slope_bins: tuple[float, ...] = DEFAULT_SLOPE_BINS
    suspect_pred_ceiling: float = 10.0
    suspect_label_floor: float = 30.0
    suspect_quantile: float = 0.9


@dataclass
class ExperimentConfig:
    run: RunSpec = field(default_factory=RunSpec)
    scene: SceneSpec = field(default_factory=SceneSpec)
    train: TrainerConfig = field(default_factory=TrainerConfig)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    explicit: set = field(default_factory=set)

    def scene_spec(self, seed: int) -> SceneSpec:
        d = self.scene.to_dict()
        d["seed"] = seed
        return SceneSpec.from_dict(d)


def _sections(cfg: ExperimentConfig) -> dict[str, object]:
    return {
        "run": cfg.run,
        "scene": cfg.scene,
        "terrain": cfg.scene.terrain,
        "forest": cfg.scene.forest,
        "noise": cfg.scene.noise,
        "tracks": cfg.scene.tracks,
        "train": cfg.train,
        "analysis": cfg.analysis,
    }


_NESTED = {"terrain", "forest", "noise", "tracks"}


def known_keys() -> list[str]:
    cfg = ExperimentConfig()
    keys = []
    for sec, obj in _sections(cfg).items():
        for f in fields(obj):
            if sec == "scene" and f.name in _NESTED | {"seed"}:
                continue
            keys.append(f"{sec}.{f.name}")
    return keys


def _parse_offsets(s: str):
    s = s.strip()
    if s in ("random", "zero"):
        return s
    pairs = []
    for chunk in s.split(";"):
        a, b = chunk.split(",")
        pairs.append([int(a), int(b)])
    return pairs


def _convert(obj, name: str, raw: str):
    current = getattr(obj, name)
    if name == "offsets":
        return _parse_offsets(raw)
    if name == "first_col":
        return None if raw.strip() in ("", "auto") else int(raw)
    if isinstance(current, bool):
        return _bool(raw)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return _floats(raw)
    return raw.strip()


def apply_setting(cfg: ExperimentConfig, key: str, raw: str) -> None:
    if "." not in key:
        raise ConfigurationError(f"unknown config key {key!r} (expected section.key)")
    sec, name = key.split(".", 1)
    sections = _sections(cfg)
    if key not in known_keys() or sec not in sections:
        raise ConfigurationError(f"unknown config key {key!r}")
    obj = sections[sec]
    try:
        value = _convert(obj, name, raw)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})") from None
    setattr(obj, name, value)
    cfg.explicit.add(key)


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        apply_setting(cfg, key, value)
    for key, value in (overrides or {}).items():
        apply_setting(cfg, key, value)
    validate(cfg)
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    text = "" if path is None else Path(path).read_text(encoding="utf-8")
    return parse_config(text, overrides)


def validate(cfg: ExperimentConfig) -> None:
    """Re-run the invariant checks of the nested dataclasses after assignment."""
    try:
        TrainerConfig(**cfg.train.to_dict())
        SceneSpec.from_dict(cfg.scene.to_dict())
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(str(exc)) from None
    if cfg.run.n_train_scenes < 1 or cfg.run.n_test_scenes < 1:
        raise ConfigurationError("run.n_train_scenes and run.n_test_scenes must be >= 1")
    if any(not 0 < a < 1 for a in cfg.run.alphas):
        raise ConfigurationError("run.alphas must lie in (0, 1)")


def dump_config(cfg: ExperimentConfig) -> str:
    """Every key with its resolved value, in a stable order."""
    sections = _sections(cfg)
    lines = []
    for key in known_keys():
        sec, name = key.split(".", 1)
        val = getattr(sections[sec], name)
        if name == "offsets" and not isinstance(val, str):
            val_s = ";".join(f"{a},{b}" for a, b in val)
        else:
            val_s = _fmt(val)
        lines.append(f"{key} = {val_s}")
    return "\n".join(lines) + "\n"
