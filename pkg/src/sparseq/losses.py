"""Training objectives on sparse labels.

Quantile objectives are built from the pinball loss and averaged over
labelled pixels only, then over quantile channels. The shift-resilient
variant lets every track move rigidly by at most one pixel in each direction
and keeps the best fitting offset. Gaussian and log-Gaussian negative
log-likelihoods are provided for the ablation models.

All ``*_grad`` helpers return derivatives with respect to the prediction and
are used by the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import QuantileStack, SparseLabels, Track, partition_tracks
from .errors import ConfigurationError, DomainError

# (0, 0) first so that ties resolve to "no shift".
SHIFT_OFFSETS: tuple[tuple[int, int], ...] = (
    (0, 0),
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
LOSS_KINDS = ("quantile", "gaussian", "log_gaussian")


def _check_tau(tau):
    t = np.asarray(tau, dtype=np.float64)
    if not np.all((t > 0.0) & (t < 1.0)):
        raise DomainError(f"quantile level must lie in (0, 1), got {tau}")
    return t


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def pinball(tau, y, y_hat):
    """Pinball loss ``tau*(y - y_hat)`` if ``y_hat <= y`` else ``(1 - tau)*(y_hat - y)``."""
    t = _check_tau(tau)
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    under = y_hat <= y
    return _scalar(np.where(under, t * (y - y_hat), (1.0 - t) * (y_hat - y)))


def pinball_grad(tau, y, y_hat):
    """Subgradient with respect to ``y_hat``; ``-tau`` at the kink."""
    t = _check_tau(tau)
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    return _scalar(np.where(y_hat <= y, -t, 1.0 - t) + np.zeros_like(y_hat))


def _values_at(grid, pts) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim == 3:
        if grid.shape[0] != 1:
            raise ConfigurationError("expected a single-channel prediction")
        grid = grid[0]
    if grid.shape != (pts.grid_height, pts.grid_width):
        raise ConfigurationError(
            f"prediction shape {grid.shape} does not match label grid "
            f"{(pts.grid_height, pts.grid_width)}"
        )
    return np.asarray(grid, dtype=np.float64)[pts.rows, pts.cols]


def sparse_pinball(tau, labels: SparseLabels | Track, pred) -> float:
    """Mean pinball loss over the labelled pixels of a single prediction grid."""
    if len(labels) == 0:
        raise DomainError("sparse pinball loss is undefined for an empty label set")
    return float(np.mean(pinball(tau, labels.heights, _values_at(pred, labels))))


def _check_stack(taus, stack: QuantileStack) -> np.ndarray:
    taus = np.asarray(taus, dtype=np.float64).reshape(-1)
    if len(taus) == 0:
        raise DomainError("the quantile vector is empty")
    _check_tau(taus)
    if len(taus) != len(stack) or not np.allclose(taus, stack.quantiles, rtol=0, atol=1e-12):
        raise ConfigurationError(
            f"quantile vector {tuple(taus)} does not match stack {stack.quantiles}"
        )
    return taus


def multi_quantile_loss(taus: Sequence[float], labels: SparseLabels | Track, stack: QuantileStack) -> float:
    """Average of the sparse pinball losses of all quantile channels."""
    taus = _check_stack(taus, stack)
    if len(labels) == 0:
        raise DomainError("multi-quantile loss is undefined for an empty label set")
    total = 0.0
    for n, tau in enumerate(taus):
        total += sparse_pinball(tau, labels, stack.rasters[n])
    return total / len(taus)


def _check_delta(delta) -> tuple[int, int]:
    d = (int(delta[0]), int(delta[1]))
    if d not in SHIFT_OFFSETS:
        raise DomainError(f"shift {delta} is outside {{-1, 0, 1}}^2")
    return d


def shift_track(track: Track, delta) -> Track:
    """Translate a track by ``delta``; points leaving the grid are dropped."""
    dr, dc = _check_delta(delta)
    r = track.rows + dr
    c = track.cols + dc
    keep = (r >= 0) & (r < track.grid_height) & (c >= 0) & (c < track.grid_width)
    return Track(track.track_id, r[keep], c[keep], track.heights[keep],
                 track.grid_height, track.grid_width)


def best_track_shift(taus, track: Track, stack: QuantileStack) -> tuple[float, tuple[int, int]]:
    """Minimum multi-quantile loss over the nine shifts and the offset attaining it."""
    if len(track) == 0:
        raise DomainError("cannot evaluate the shift loss of an empty track")
    best, arg = np.inf, None
    for delta in SHIFT_OFFSETS:
        moved = shift_track(track, delta)
        if len(moved) == 0:
            continue
        loss = multi_quantile_loss(taus, moved, stack)
        if loss < best:
            best, arg = loss, delta
    if arg is None:
        raise DomainError(f"every shift of track {track.track_id} leaves the grid")
    return best, arg


def shifted_track_loss(taus, track: Track, stack: QuantileStack) -> float:
    return best_track_shift(taus, track, stack)[0]


def shift_resilient_loss(taus, labels: SparseLabels, stack: QuantileStack) -> float:
    """Mean over tracks of the per-track minimum over shifts."""
    if len(labels) == 0:
        raise DomainError("shift-resilient loss is undefined for an empty label set")
    _check_stack(taus, stack)
    tracks = partition_tracks(labels)
    return sum(shifted_track_loss(taus, t, stack) for t in tracks) / len(tracks)


@dataclass(frozen=True)
class GaussianParams:
    """Per-pixel mean and log-variance. For the log-normal model ``mu`` is in log space."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        lv = np.asarray(self.log_var, dtype=np.float64)
        if mu.shape != lv.shape:
            raise ConfigurationError(f"mu shape {mu.shape} != log_var shape {lv.shape}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", lv)

    @property
    def variance(self) -> np.ndarray:
        return np.exp(np.clip(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX))


def _nll_inputs(params: GaussianParams, y):
    y = np.asarray(y, dtype=np.float64)
    if not (np.all(np.isfinite(params.mu)) and np.all(np.isfinite(params.log_var))
            and np.all(np.isfinite(y))):
        raise DomainError("negative log-likelihood needs finite inputs")
    lv = np.clip(params.log_var, LOG_VAR_MIN, LOG_VAR_MAX)
    inside = (params.log_var > LOG_VAR_MIN) & (params.log_var < LOG_VAR_MAX)
    return y, lv, np.exp(lv), inside


def gaussian_nll(params: GaussianParams, y):
    """``0.5*log(var) + (y - mu)^2 / (2*var)`` elementwise."""
    y, lv, var, _ = _nll_inputs(params, y)
    return _scalar(0.5 * lv + (y - params.mu) ** 2 / (2.0 * var))


def gaussian_nll_grad(params: GaussianParams, y):
    """Derivatives of :func:`gaussian_nll` with respect to ``(mu, log_var)``."""
    y, lv, var, inside = _nll_inputs(params, y)
    r = y - params.mu
    d_mu = -r / var
    d_lv = np.where(inside, 0.5 - r * r / (2.0 * var), 0.0)
    return _scalar(d_mu), _scalar(d_lv)


def _log_targets(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(~(y > 0)):
        raise DomainError("log-normal likelihood needs strictly positive targets")
    return np.log(y)


def log_gaussian_nll(params: GaussianParams, y):
    """Log-normal negative log-density without the ``0.5*log(2*pi)`` constant.

    ``log y + 0.5*log(var) + (log y - mu)^2 / (2*var)``
    """
    ly = _log_targets(y)
    ly, lv, var, _ = _nll_inputs(params, ly)
    return _scalar(ly + 0.5 * lv + (ly - params.mu) ** 2 / (2.0 * var))


def log_gaussian_nll_grad(params: GaussianParams, y):
    ly = _log_targets(y)
    return gaussian_nll_grad(params, ly)


def sparse_nll(params: GaussianParams, labels: SparseLabels | Track, log_space: bool = False) -> float:
    """Mean (log-)Gaussian NLL over labelled pixels."""
    if len(labels) == 0:
        raise DomainError("sparse NLL is undefined for an empty label set")
    at = GaussianParams(_values_at(params.mu, labels), _values_at(params.log_var, labels))
    fn = log_gaussian_nll if log_space else gaussian_nll
    return float(np.mean(fn(at, labels.heights)))


# --- vectorised objective used by the trainer -------------------------------


def pointwise_loss_grad(kind: str, taus, y: np.ndarray, out: np.ndarray):
    """Per-point loss ``(n,)`` and gradient ``(K, n)`` for outputs ``out`` of shape ``(K, n)``.

    For ``quantile`` the K channels are the quantile predictions and the point
    loss is their mean pinball loss; for the likelihood models ``K == 2``
    holding ``(mu, log_var)``.
    """
    if kind == "quantile":
        t = np.asarray(taus, dtype=np.float64)[:, None]
        diff = y[None, :] - out
        under = out <= y[None, :]
        loss = np.where(under, t * diff, (t - 1.0) * diff).mean(axis=0)
        grad = np.where(under, -t, 1.0 - t) / len(t)
        return loss, grad
    if kind in ("gaussian", "log_gaussian"):
        p = GaussianParams(out[0], out[1])
        if kind == "gaussian":
            loss = gaussian_nll(p, y)
            g = gaussian_nll_grad(p, y)
        else:
            loss = log_gaussian_nll(p, y)
            g = log_gaussian_nll_grad(p, y)
        return np.asarray(loss), np.stack([np.asarray(g[0]), np.asarray(g[1])])
    raise ConfigurationError(f"unknown loss kind {kind!r}")


def sparse_objective(kind: str, taus, labels: SparseLabels, outputs: np.ndarray, use_shift: bool):
    """Loss and dense gradient for model outputs of shape ``(K, H, W)``.

    Without shifting this is the mean point loss over all labels. With
    shifting, each track contributes the mean point loss at its best offset
    and tracks are averaged with equal weight.
    """
    n = len(labels)
    if n == 0:
        raise DomainError("objective is undefined for an empty label set")
    outputs = np.asarray(outputs, dtype=np.float64)
    K, H, W = outputs.shape
    grad = np.zeros_like(outputs)
    y = labels.heights
    if not use_shift:
        loss, g = pointwise_loss_grad(kind, taus, y, outputs[:, labels.rows, labels.cols])
        np.add.at(grad, (slice(None), labels.rows, labels.cols), g / n)
        return float(loss.mean()), grad

    track_ids, inv = np.unique(labels.track_ids, return_inverse=True)
    n_tracks = len(track_ids)
    S = len(SHIFT_OFFSETS)
    sums = np.zeros((n_tracks, S))
    counts = np.zeros((n_tracks, S))
    cache = []
    for s, (dr, dc) in enumerate(SHIFT_OFFSETS):
        r = labels.rows + dr
        c = labels.cols + dc
        ok = (r >= 0) & (r < H) & (c >= 0) & (c < W)
        rc, cc = np.clip(r, 0, H - 1), np.clip(c, 0, W - 1)
        loss, g = pointwise_loss_grad(kind, taus, y, outputs[:, rc, cc])
        sums[:, s] = np.bincount(inv, weights=np.where(ok, loss, 0.0), minlength=n_tracks)
        counts[:, s] = np.bincount(inv, weights=ok.astype(np.float64), minlength=n_tracks)
        cache.append((r, c, ok, g))
    with np.errstate(divide="ignore", invalid="ignore"):
        means = np.where(counts > 0, sums / counts, np.inf)
    if np.any(counts.max(axis=1) == 0):
        raise DomainError("a track has no shift that keeps any point inside the grid")
    # non-finite losses flow through so the trainer can report divergence
    best = np.argmin(means, axis=1)
    best_vals = means[np.arange(n_tracks), best]
    for s in range(S):
        r, c, ok, g = cache[s]
        sel = ok & (best[inv] == s)
        if not np.any(sel):
            continue
        w = 1.0 / (n_tracks * counts[inv[sel], s])
        np.add.at(grad, (slice(None), r[sel], c[sel]), g[:, sel] * w)
    return float(best_vals.mean()), grad


def best_shifts(kind: str, taus, labels: SparseLabels, outputs: np.ndarray) -> dict[int, tuple[int, int]]:
    """Offset chosen for every track by the shift-resilient objective."""
    outputs = np.asarray(outputs, dtype=np.float64)
    _, H, W = outputs.shape
    chosen = {}
    for track in partition_tracks(labels):
        best, arg = np.inf, None
        for delta in SHIFT_OFFSETS:
            moved = shift_track(track, delta)
            if len(moved) == 0:
                continue
            loss, _ = pointwise_loss_grad(kind, taus, moved.heights, outputs[:, moved.rows, moved.cols])
            if loss.mean() < best:
                best, arg = loss.mean(), delta
        chosen[track.track_id] = arg
    return chosen
