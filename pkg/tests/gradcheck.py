"""Finite-difference check of the surrogate's backward pass."""

import numpy as np

from sparseq.core import SparseLabels
from sparseq.losses import sparse_objective
from sparseq.metrics import DEFAULT_QUANTILES
from sparseq.model import PixelSet, SurrogateModel


def toy_instance(kind: str, seed: int = 0, shape=(4, 8, 8)):
    c, h, w = shape
    g = np.random.default_rng(seed)
    x = g.standard_normal(shape).astype(np.float32)
    flat = g.choice(h * w, 12, replace=False)
    labels = SparseLabels(g.integers(0, 3, 12), flat // w, flat % w, g.uniform(0.5, 3.0, 12), h, w)
    model = SurrogateModel(c, kind, seed=seed)
    return model, x, labels


def objective(model, x, labels, use_shift, cache=None):
    h, w = labels.shape
    out = model.forward_pixels(x, PixelSet((h, w)), cache=cache)
    return sparse_objective(model.loss_kind, DEFAULT_QUANTILES, labels, out.reshape(-1, h, w), use_shift)


def analytic(model, x, labels, use_shift):
    cache = {}
    _, g = objective(model, x, labels, use_shift, cache)
    return model.backward(cache, g.reshape(g.shape[0], -1), train_backbone=True)


def max_rel_error(kind: str, use_shift: bool = False, n_coords: int = 5, seed: int = 0,
                  eps: float = 1e-6) -> dict[str, float]:
    """Worst relative error per parameter tensor at ``n_coords`` random entries.

    The analytic gradient comes from the single-precision model; the
    reference is a central difference on a float64 copy of the same weights.
    """
    model, x, labels = toy_instance(kind, seed)
    grads = analytic(model, x, labels, use_shift)
    ref = model.copy(np.float64)
    x64 = x.astype(np.float64)
    g = np.random.default_rng(seed + 1)
    worst = {}
    for name, p in ref.params.items():
        errs = []
        for _ in range(n_coords):
            idx = tuple(int(g.integers(s)) for s in p.shape)
            old = p[idx]
            p[idx] = old + eps
            fp = objective(ref, x64, labels, use_shift)[0]
            p[idx] = old - eps
            fm = objective(ref, x64, labels, use_shift)[0]
            p[idx] = old
            fd = (fp - fm) / (2 * eps)
            a = float(grads[name][idx])
            errs.append(abs(a - fd) / max(abs(a), abs(fd), 1e-3))
        worst[name] = max(errs)
    return worst
