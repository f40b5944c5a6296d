"""Small convolutional surrogate with a point head and an uncertainty head.

Topology::

    input (C_in) -> conv3x3(32) -> ReLU -> conv3x3(64) -> ReLU      backbone
        backbone -> conv1x1(1)                                      point head
        backbone -> [conv3x3(64) -> ReLU] x 2 -> conv1x1(10 | 1)    uncertainty head

The quantile model merges the heads into 11 channels in ascending quantile
order with the point head as the median. The Gaussian variants use the point
head for the mean and a single uncertainty channel for the log-variance.

Forward and backward passes are written directly in numpy. They can be
evaluated on an arbitrary subset of pixels: a 3x3 convolution is only
computed where a later layer reads it, so training on sparse labels touches
a small neighbourhood of each label instead of the whole grid.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .core import QuantileStack, Raster, dilate_pixels, load_raster, save_raster
from .errors import ConfigurationError, FormatError
from .losses import LOG_VAR_MAX, LOG_VAR_MIN, LOSS_KINDS, GaussianParams
from .metrics import DEFAULT_QUANTILES
from .stats import norm_ppf

CHECKPOINT_MAGIC = b"QRM1"
UNCERTAINTY_QUANTILES = tuple(t for t in DEFAULT_QUANTILES if t != 0.5)
MEDIAN_INDEX = DEFAULT_QUANTILES.index(0.5)
BACKBONE = ("backbone.conv1", "backbone.conv2")
# Head activations are multiplied by these per-channel factors, so outputs in
# metres stay O(1) in the weights of a freshly initialised linear head.
OUTPUT_SCALE = {
    "quantile": np.full(len(DEFAULT_QUANTILES), 20.0),
    "gaussian": np.array([20.0, 1.0]),
    "log_gaussian": np.array([4.0, 1.0]),
}

_OFFSETS3 = tuple((di, dj) for di in range(3) for dj in range(3))


@dataclass(frozen=True)
class LayerSpec:
    name: str
    cin: int
    cout: int
    kernel: int


def architecture(in_channels: int, loss_kind: str) -> list[LayerSpec]:
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss kind {loss_kind!r}")
    n_unc = 10 if loss_kind == "quantile" else 1
    return [
        LayerSpec("backbone.conv1", in_channels, 32, 3),
        LayerSpec("backbone.conv2", 32, 64, 3),
        LayerSpec("point_head", 64, 1, 1),
        LayerSpec("uncertainty.conv1", 64, 64, 3),
        LayerSpec("uncertainty.conv2", 64, 64, 3),
        LayerSpec("uncertainty.out", 64, n_unc, 1),
    ]


class PixelSet:
    """Rows/cols of the pixels a layer is evaluated at, or the full grid."""

    def __init__(self, shape, rows=None, cols=None):
        self.shape = tuple(shape)
        self.full = rows is None
        if self.full:
            h, w = self.shape
            rows, cols = np.divmod(np.arange(h * w), w)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)

    def __len__(self):
        return len(self.rows)

    def dilate(self, radius: int) -> "PixelSet":
        if self.full or radius == 0:
            return self
        r, c = dilate_pixels(self.rows, self.cols, radius, self.shape)
        return PixelSet(self.shape, r, c)


def _gather3(pad: np.ndarray, ps: PixelSet) -> np.ndarray:
    """im2col: ``(n, 9*C)`` patches from a zero-padded ``(H+2, W+2, C)`` array."""
    if ps.full:
        h, w = ps.shape
        cols = np.stack([pad[di:di + h, dj:dj + w] for di, dj in _OFFSETS3], axis=2)
        return cols.reshape(h * w, -1)
    r, c = ps.rows, ps.cols
    cols = np.stack([pad[r + di, c + dj] for di, dj in _OFFSETS3], axis=1)
    return cols.reshape(len(r), -1)


def _scatter3(dpad: np.ndarray, dcols: np.ndarray, ps: PixelSet) -> None:
    cin = dpad.shape[2]
    d = dcols.reshape(len(ps), 9, cin)
    if ps.full:
        h, w = ps.shape
        d = d.reshape(h, w, 9, cin)
        for k, (di, dj) in enumerate(_OFFSETS3):
            dpad[di:di + h, dj:dj + w] += d[:, :, k]
        return
    for k, (di, dj) in enumerate(_OFFSETS3):
        # pixel sets hold unique pixels, so the targets of one offset are unique
        dpad[ps.rows + di, ps.cols + dj] += d[:, k]


def _to_pad(values: np.ndarray, ps: PixelSet, dtype) -> np.ndarray:
    h, w = ps.shape
    pad = np.zeros((h + 2, w + 2, values.shape[1]), dtype=dtype)
    if ps.full:
        pad[1:-1, 1:-1] = values.reshape(h, w, -1)
    else:
        pad[ps.rows + 1, ps.cols + 1] = values
    return pad


def _from_pad(pad: np.ndarray, ps: PixelSet) -> np.ndarray:
    if ps.full:
        h, w = ps.shape
        return pad[1:-1, 1:-1].reshape(h * w, -1)
    return pad[ps.rows + 1, ps.cols + 1]


class SurrogateModel:
    """Parameters live in ``self.params`` keyed ``<layer>.weight`` / ``<layer>.bias``.

    Weights use the ``(C_out, C_in, k, k)`` layout.
    """

    def __init__(self, in_channels: int, loss_kind: str = "quantile", seed: int = 0,
                 dtype=np.float32):
        self.in_channels = int(in_channels)
        self.loss_kind = loss_kind
        self.dtype = np.dtype(dtype)
        self.layers = architecture(self.in_channels, loss_kind)
        self.params: dict[str, np.ndarray] = {}
        for i, spec in enumerate(self.layers):
            g = rng_mod.stream(seed, rng_mod.INIT, i)
            fan_in = spec.cin * spec.kernel * spec.kernel
            bound = np.sqrt(1.0 / fan_in)
            shape = (spec.cout, spec.cin, spec.kernel, spec.kernel)
            self.params[f"{spec.name}.weight"] = g.uniform(-bound, bound, shape).astype(self.dtype)
            self.params[f"{spec.name}.bias"] = g.uniform(-bound, bound, spec.cout).astype(self.dtype)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def quantiles(self) -> tuple[float, ...]:
        return DEFAULT_QUANTILES if self.loss_kind == "quantile" else ()

    @property
    def n_outputs(self) -> int:
        return len(DEFAULT_QUANTILES) if self.loss_kind == "quantile" else 2

    def param_names(self) -> list[str]:
        return list(self.params)

    def is_backbone(self, name: str) -> bool:
        return name.startswith("backbone.")

    def copy(self, dtype=None) -> "SurrogateModel":
        new = object.__new__(SurrogateModel)
        new.in_channels = self.in_channels
        new.loss_kind = self.loss_kind
        new.dtype = np.dtype(dtype or self.dtype)
        new.layers = list(self.layers)
        new.params = {k: v.astype(new.dtype, copy=True) for k, v in self.params.items()}
        return new

    def _w3(self, name):
        w = self.params[f"{name}.weight"]
        return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)

    def _w1(self, name):
        w = self.params[f"{name}.weight"]
        return w.reshape(w.shape[0], w.shape[1])

    def _check_input(self, x) -> np.ndarray:
        if isinstance(x, Raster):
            x = x.data
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ConfigurationError(
                f"model expects {self.in_channels} input channels, got array of shape {x.shape}"
            )
        return x

    # -- forward -------------------------------------------------------------

    def _conv3(self, name, in_pad, ps, cache, relu=True):
        cols = _gather3(in_pad, ps)
        z = cols @ self._w3(name).T + self.params[f"{name}.bias"]
        if cache is not None:
            cache[name] = (cols, ps, z > 0 if relu else None)
        return np.maximum(z, 0) if relu else z

    def backbone_features(self, x, ps: PixelSet | None = None, cache=None):
        """Backbone activations as a padded ``(H+2, W+2, 64)`` array valid on ``ps``."""
        x = self._check_input(x)
        h, w = x.shape[1:]
        ps = ps or PixelSet((h, w))
        ps1 = ps.dilate(1)
        x_pad = np.zeros((h + 2, w + 2, x.shape[0]), dtype=self.dtype)
        x_pad[1:-1, 1:-1] = np.moveaxis(x, 0, -1)
        a1 = self._conv3("backbone.conv1", x_pad, ps1, cache)
        a2 = self._conv3("backbone.conv2", _to_pad(a1, ps1, self.dtype), ps, cache)
        return _to_pad(a2, ps, self.dtype)

    def forward_pixels(self, x, ps: PixelSet, features=None, cache=None) -> np.ndarray:
        """Raw outputs ``(K, n)`` at the pixels of ``ps``.

        ``features`` may hold precomputed backbone activations (a padded array
        from :meth:`backbone_features`) covering ``ps`` dilated by two.
        """
        ps_u1 = ps.dilate(1)
        if features is None:
            features = self.backbone_features(x, ps.dilate(2), cache)
        if cache is not None:
            cache["_ps"] = ps
            cache["_features"] = features
        feat = _from_pad(features, ps)
        point = feat @ self._w1("point_head").T + self.params["point_head.bias"]
        u1 = self._conv3("uncertainty.conv1", features, ps_u1, cache)
        u2 = self._conv3("uncertainty.conv2", _to_pad(u1, ps_u1, self.dtype), ps, cache)
        unc = u2 @ self._w1("uncertainty.out").T + self.params["uncertainty.out.bias"]
        if cache is not None:
            cache["point_head"] = (feat, ps, None)
            cache["uncertainty.out"] = (u2, ps, None)
        if self.loss_kind == "quantile":
            out = np.concatenate([unc[:, :MEDIAN_INDEX], point, unc[:, MEDIAN_INDEX:]], axis=1)
        else:
            out = np.concatenate([point, unc], axis=1)
        return out.T * OUTPUT_SCALE[self.loss_kind].astype(self.dtype)[:, None]

    def predict_raw(self, x) -> np.ndarray:
        """Outputs ``(K, H, W)`` on the whole grid."""
        x = self._check_input(x)
        h, w = x.shape[1:]
        return self.forward_pixels(x, PixelSet((h, w))).reshape(-1, h, w)

    # -- backward ------------------------------------------------------------

    def backward(self, cache: dict, grad_out: np.ndarray, train_backbone: bool = True) -> dict[str, np.ndarray]:
        """Gradients of ``sum(grad_out * outputs)`` for the cached forward pass.

        ``grad_out`` has shape ``(K, n)`` matching :meth:`forward_pixels`.
        Backbone gradients are only returned when ``train_backbone`` is set.
        """
        grads: dict[str, np.ndarray] = {}
        g = (np.asarray(grad_out, dtype=self.dtype) * OUTPUT_SCALE[self.loss_kind].astype(self.dtype)[:, None]).T
        if self.loss_kind == "quantile":
            g_point = g[:, MEDIAN_INDEX:MEDIAN_INDEX + 1]
            g_unc = np.concatenate([g[:, :MEDIAN_INDEX], g[:, MEDIAN_INDEX + 1:]], axis=1)
        else:
            g_point, g_unc = g[:, :1], g[:, 1:]

        def dense(name, dout):
            inp, _, _ = cache[name]
            w = self.params[f"{name}.weight"]
            grads[f"{name}.weight"] = (dout.T @ inp).reshape(w.shape)
            grads[f"{name}.bias"] = dout.sum(axis=0)
            return dout @ self._w1(name)

        def conv3(name, dout, need_input):
            cols, ps, mask = cache[name]
            dz = dout * mask
            w = self.params[f"{name}.weight"]
            c_out, c_in = w.shape[:2]
            grads[f"{name}.weight"] = (
                (dz.T @ cols).reshape(c_out, 3, 3, c_in).transpose(0, 3, 1, 2)
            )
            grads[f"{name}.bias"] = dz.sum(axis=0)
            if not need_input:
                return None
            h, w_ = ps.shape
            dpad = np.zeros((h + 2, w_ + 2, c_in), dtype=self.dtype)
            _scatter3(dpad, dz @ self._w3(name), ps)
            return dpad

        ps = cache["_ps"]
        d_feat_point = dense("point_head", g_point)
        d_u2 = dense("uncertainty.out", g_unc)
        d_u1_pad = conv3("uncertainty.conv2", d_u2, True)
        d_u1 = _from_pad(d_u1_pad, cache["uncertainty.conv1"][1])
        d_feat_pad = conv3("uncertainty.conv1", d_u1, train_backbone)
        if not train_backbone:
            return grads
        if "backbone.conv2" not in cache:
            raise ConfigurationError("backbone gradients need a forward pass through the backbone")
        if ps.full:
            d_feat_pad[1:-1, 1:-1] += d_feat_point.reshape(*ps.shape, -1)
        else:
            d_feat_pad[ps.rows + 1, ps.cols + 1] += d_feat_point
        ps_b2 = cache["backbone.conv2"][1]
        d_a2 = _from_pad(d_feat_pad, ps_b2)
        d_a1_pad = conv3("backbone.conv2", d_a2, True)
        d_a1 = _from_pad(d_a1_pad, cache["backbone.conv1"][1])
        conv3("backbone.conv1", d_a1, False)
        return grads


def outputs_to_stack(kind: str, raw: np.ndarray, quantiles=DEFAULT_QUANTILES) -> QuantileStack:
    """Quantile stack from raw model outputs ``(K, H, W)``.

    Gaussian outputs are turned into quantiles ``mu + z*sigma``; log-Gaussian
    ones into ``exp(mu + z*sigma)``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if kind == "quantile":
        return QuantileStack(DEFAULT_QUANTILES, raw)
    mu, lv = raw[0], raw[1]
    sigma = np.exp(0.5 * np.clip(lv, LOG_VAR_MIN, LOG_VAR_MAX))
    q = np.stack([mu + norm_ppf(t) * sigma for t in quantiles])
    if kind == "log_gaussian":
        q = np.exp(q)
    return QuantileStack(tuple(quantiles), q)


def gaussian_interval(kind: str, raw: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Central ``alpha`` interval of a (log-)Gaussian prediction."""
    z = norm_ppf(0.5 + alpha / 2.0)
    mu = np.asarray(raw[0], dtype=np.float64)
    sigma = np.exp(0.5 * np.clip(np.asarray(raw[1], dtype=np.float64), LOG_VAR_MIN, LOG_VAR_MAX))
    lo, hi = mu - z * sigma, mu + z * sigma
    if kind == "log_gaussian":
        return np.exp(lo), np.exp(hi)
    return lo, hi


def point_estimate(kind: str, raw: np.ndarray) -> np.ndarray:
    """Median prediction: the median channel, ``mu``, or ``exp(mu)``."""
    if kind == "quantile":
        return np.asarray(raw[MEDIAN_INDEX], dtype=np.float64)
    mu = np.asarray(raw[0], dtype=np.float64)
    return np.exp(mu) if kind == "log_gaussian" else mu


def forward(model: SurrogateModel, x) -> QuantileStack | GaussianParams:
    raw = model.predict_raw(x)
    if model.loss_kind == "quantile":
        return QuantileStack(DEFAULT_QUANTILES, raw)
    return GaussianParams(raw[0], raw[1])


# -- checkpoints ---------------------------------------------------------------


def checkpoint_bytes(model: SurrogateModel) -> bytes:
    header = {
        "architecture": "surrogate-2conv-twohead",
        "in_channels": model.in_channels,
        "loss_kind": model.loss_kind,
        "quantiles": list(model.quantiles),
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(v.astype("<f4").tobytes() for v in model.params.values())
    return CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + body


def save_checkpoint(model: SurrogateModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> SurrogateModel:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    (n,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + n].decode("utf-8"))
    model = SurrogateModel(header["in_channels"], header["loss_kind"])
    off = 8 + n
    for name, shape in header["params"]:
        if name not in model.params or list(model.params[name].shape) != shape:
            raise FormatError(f"{path}: unexpected tensor {name} {shape}")
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
        model.params[name] = arr.astype(np.float32).reshape(shape)
        off += 4 * count
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after parameters")
    return model


# -- prediction files ----------------------------------------------------------


def channel_names(model_or_kind) -> list[str]:
    kind = getattr(model_or_kind, "loss_kind", model_or_kind)
    if kind == "quantile":
        return [f"q{t:g}" for t in DEFAULT_QUANTILES]
    return ["mu", "log_var"]


def predict_to_files(model: SurrogateModel, x, out_dir) -> Path:
    """Write one QRG1 raster per output channel plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = model.predict_raw(x)
    entries = []
    for k, name in enumerate(channel_names(model)):
        fname = f"{name}.qrg"
        save_raster(Raster(raw[k:k + 1]), out / fname)
        entry = {"index": k, "name": name, "file": fname}
        if model.loss_kind == "quantile":
            entry["quantile"] = DEFAULT_QUANTILES[k]
        entries.append(entry)
    manifest = {"loss_kind": model.loss_kind, "height": int(raw.shape[1]),
                "width": int(raw.shape[2]), "channels": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_prediction_dir(path) -> tuple[str, np.ndarray]:
    """Loss kind and raw ``(K, H, W)`` outputs written by :func:`predict_to_files`."""
    d = Path(path)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    chans = sorted(manifest["channels"], key=lambda e: e["index"])
    raw = np.stack([load_raster(d / e["file"]).data[0] for e in chans])
    return manifest["loss_kind"], raw
