import json

import numpy as np
import pytest

import gradcheck
from sparseq.core import Raster, SparseLabels
from sparseq.errors import ConfigurationError, DomainError, FormatError, TrainingError
from sparseq.losses import GaussianParams
from sparseq.metrics import DEFAULT_QUANTILES
from sparseq.model import (
    MEDIAN_INDEX,
    OUTPUT_SCALE,
    PixelSet,
    SurrogateModel,
    architecture,
    checkpoint_bytes,
    forward,
    gaussian_interval,
    load_checkpoint,
    load_prediction_dir,
    outputs_to_stack,
    point_estimate,
    predict_to_files,
    save_checkpoint,
)
from sparseq.optim import AdamW, clip_by_global_norm, global_norm, linear_schedule
from sparseq.stats import norm_ppf
from sparseq.train import TrainerConfig, train

KINDS = ("quantile", "gaussian", "log_gaussian")


def test_architecture_shapes():
    layers = {l.name: l for l in architecture(6, "quantile")}
    assert (layers["backbone.conv1"].cin, layers["backbone.conv1"].cout) == (6, 32)
    assert (layers["backbone.conv2"].cout, layers["point_head"].cout) == (64, 1)
    assert layers["uncertainty.out"].cout == 10 and layers["uncertainty.out"].kernel == 1
    assert {l.name: l for l in architecture(6, "gaussian")}["uncertainty.out"].cout == 1
    with pytest.raises(ConfigurationError):
        architecture(6, "huber")


@pytest.mark.parametrize("kind", KINDS)
def test_forward_shapes_and_types(kind):
    m = SurrogateModel(4, kind, seed=1)
    x = np.random.default_rng(0).standard_normal((4, 7, 5)).astype(np.float32)
    raw = m.predict_raw(x)
    assert raw.shape == ((11 if kind == "quantile" else 2), 7, 5)
    assert raw.dtype == np.float32
    out = forward(m, Raster(x))
    if kind == "quantile":
        assert out.quantiles == DEFAULT_QUANTILES and out.shape == (7, 5)
    else:
        assert isinstance(out, GaussianParams) and out.mu.shape == (7, 5)


def test_channel_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        SurrogateModel(4).predict_raw(np.zeros((3, 5, 5), np.float32))


def test_zero_parameters_give_zero_output():
    m = SurrogateModel(3, "quantile")
    for k in m.params:
        m.params[k][...] = 0
    assert not m.predict_raw(np.random.default_rng(0).standard_normal((3, 6, 6))).any()


def test_point_head_scaling():
    m = SurrogateModel(3, "quantile", seed=2)
    x = np.random.default_rng(1).standard_normal((3, 6, 6)).astype(np.float32)
    m.params["point_head.bias"][...] = 0
    base = m.predict_raw(x)[MEDIAN_INDEX]
    m.params["point_head.weight"] *= 2
    assert np.allclose(m.predict_raw(x)[MEDIAN_INDEX], 2 * base, rtol=1e-6)


def test_sparse_forward_matches_dense():
    m = SurrogateModel(4, "quantile", seed=3)
    x = np.random.default_rng(2).standard_normal((4, 9, 10)).astype(np.float32)
    dense = m.predict_raw(x)
    ps = PixelSet((9, 10), [0, 4, 8, 8], [0, 5, 9, 3])
    sparse = m.forward_pixels(x, ps)
    assert np.allclose(sparse, dense[:, ps.rows, ps.cols], atol=1e-5)
    feats = m.backbone_features(x)
    assert np.allclose(m.forward_pixels(x, ps, feats), sparse, atol=1e-6)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("use_shift", [False, True])
def test_backward_matches_finite_differences(kind, use_shift):
    worst = gradcheck.max_rel_error(kind, use_shift)
    assert len(worst) == 12
    assert max(worst.values()) < 1e-3, worst


def test_single_pixel_bias_gradient_is_branch_constant():
    m, x, _ = gradcheck.toy_instance("quantile")
    out = m.predict_raw(x)
    # label exactly at the prediction for every channel: subgradient branch -tau
    y = float(out[MEDIAN_INDEX, 2, 3])
    for k in range(11):
        out[k, 2, 3] = y
    lab = SparseLabels.from_points([(0, 2, 3, y)], 8, 8)
    ps = PixelSet((8, 8), [2], [3])
    cache = {}
    m.forward_pixels(x, ps, cache=cache)
    from sparseq.losses import pointwise_loss_grad

    _, g = pointwise_loss_grad("quantile", DEFAULT_QUANTILES, lab.heights, out[:, [2], [3]])
    grads = m.backward(cache, g, train_backbone=False)
    scale = OUTPUT_SCALE["quantile"][MEDIAN_INDEX]
    assert grads["point_head.bias"][0] == pytest.approx(-0.5 / 11 * scale)
    assert "backbone.conv1.weight" not in grads


def test_quantile_stack_from_gaussian_outputs():
    raw = np.stack([np.full((2, 2), 3.0), np.full((2, 2), np.log(4.0))])
    st = outputs_to_stack("gaussian", raw)
    assert np.allclose(st.channel(0.95), 3 + 2 * norm_ppf(0.95))
    lo, hi = gaussian_interval("gaussian", raw, 0.9)
    assert np.allclose(hi - lo, 4 * norm_ppf(0.95))
    assert np.allclose(point_estimate("gaussian", raw), 3.0)
    lo, hi = gaussian_interval("log_gaussian", raw, 0.9)
    assert np.allclose(hi, np.exp(3 + 2 * norm_ppf(0.95)))
    assert np.allclose(point_estimate("log_gaussian", raw), np.exp(3.0))


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_round_trip(tmp_path, kind):
    m = SurrogateModel(5, kind, seed=4)
    save_checkpoint(m, tmp_path / "m.qrm")
    back = load_checkpoint(tmp_path / "m.qrm")
    assert back.loss_kind == kind and back.in_channels == 5
    assert checkpoint_bytes(back) == checkpoint_bytes(m)
    buf = (tmp_path / "m.qrm").read_bytes()
    header = json.loads(buf[8:8 + int.from_bytes(buf[4:8], "little")])
    assert [p[0] for p in header["params"]] == list(m.params)
    (tmp_path / "bad.qrm").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.qrm")
    (tmp_path / "long.qrm").write_bytes(buf + b"\0\0\0\0")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "long.qrm")


@pytest.mark.parametrize("kind", KINDS)
def test_prediction_files_round_trip(tmp_path, kind):
    m = SurrogateModel(3, kind, seed=5)
    x = np.random.default_rng(3).standard_normal((3, 6, 7)).astype(np.float32)
    path = predict_to_files(m, x, tmp_path / "p")
    manifest = json.loads(path.read_text())
    if kind == "quantile":
        taus = [c["quantile"] for c in manifest["channels"]]
        assert taus == sorted(taus) and len(taus) == 11
    else:
        assert [c["name"] for c in manifest["channels"]] == ["mu", "log_var"]
    got_kind, raw = load_prediction_dir(tmp_path / "p")
    assert got_kind == kind
    assert raw.tobytes() == m.predict_raw(x).tobytes()


# -- optimiser -------------------------------------------------------------------


def test_adamw_first_step_against_hand_computation():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.1])}
    AdamW(p, lr=0.1, weight_decay=0.01).step(p, g)
    # bias-corrected m/sqrt(v) = sign(g) on step one
    want = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.sign([0.5, -0.1]) * (
        np.abs([0.5, -0.1]) / (np.abs([0.5, -0.1]) + 1e-8))
    assert np.allclose(p["w"], want, rtol=1e-12)


def test_weight_decay_is_decoupled():
    p = {"w": np.array([3.0])}
    opt = AdamW(p, lr=0.1, weight_decay=0.5)
    opt.step(p, {"w": np.array([0.0])})
    assert p["w"][0] == pytest.approx(3.0 * (1 - 0.05))


def test_clipping():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert global_norm(g) == 5.0
    clipped, n = clip_by_global_norm(g, 1.0)
    assert n == 5.0 and global_norm(clipped) == pytest.approx(1.0, rel=1e-5)
    same, _ = clip_by_global_norm(g, 10.0)
    assert same is g


def test_schedule():
    vals = [linear_schedule(s, 20, 0.1) for s in range(20)]
    assert vals[:2] == [0.5, 1.0]
    assert vals[2] == 1.0 and vals[-1] == pytest.approx(1 / 18)
    assert all(b <= a for a, b in zip(vals[1:], vals[2:]))
    assert linear_schedule(0, 5, 0.0) == 1.0


# -- training --------------------------------------------------------------------


def _tiny_dataset(n=3, seed=0):
    g = np.random.default_rng(seed)
    data = []
    for _ in range(n):
        x = g.standard_normal((4, 10, 10)).astype(np.float32)
        rows = np.arange(1, 9, 2)
        lab = SparseLabels(np.zeros(len(rows)), rows, np.full(len(rows), 5), 5 + 5 * np.abs(x[0, rows, 5]), 10, 10)
        data.append((Raster(x), lab))
    return data


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        TrainerConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainerConfig(learning_rate=0)
    with pytest.raises(ConfigurationError):
        TrainerConfig(loss_kind="huber")
    c = TrainerConfig()
    assert (c.learning_rate, c.weight_decay, c.grad_clip_norm, c.batch_size, c.epochs) == (1e-3, 0.01, 1.0, 5, 2)
    assert c.freeze_backbone and c.warmup_fraction == 0.1


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("shift", [False, True])
def test_training_is_deterministic_and_freezes_backbone(kind, shift):
    data = _tiny_dataset()
    cfg = TrainerConfig(epochs=3, batch_size=2, loss_kind=kind, use_shift_loss=shift, learning_rate=0.01)
    a, b = SurrogateModel(4, kind, seed=0), SurrogateModel(4, kind, seed=0)
    before = {k: v.copy() for k, v in a.params.items()}
    ra = train(a, data, cfg)
    rb = train(b, data, cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert len(ra.trace) == 3 * 2 and [r.step for r in ra.trace] == list(range(6))
    assert np.array_equal(ra.losses, rb.losses)
    for k in a.params:
        if k.startswith("backbone."):
            assert np.array_equal(a.params[k], before[k])
    assert any(not np.array_equal(a.params[k], before[k]) for k in a.params if not k.startswith("backbone."))


def test_unfrozen_training_moves_backbone():
    data = _tiny_dataset()
    m = SurrogateModel(4, "quantile", seed=0)
    before = m.params["backbone.conv1.weight"].copy()
    train(m, data, TrainerConfig(epochs=1, freeze_backbone=False, learning_rate=0.01))
    assert not np.array_equal(m.params["backbone.conv1.weight"], before)


def test_training_reduces_loss():
    data = _tiny_dataset(5)
    m = SurrogateModel(4, "quantile", seed=0)
    res = train(m, data, TrainerConfig(epochs=40, batch_size=5, learning_rate=0.02))
    assert res.losses[-5:].mean() < 0.5 * res.losses[:5].mean()


@pytest.mark.parametrize("seed", [0, 1])
def test_smoothed_loss_trace_nonincreasing(seed):
    m = SurrogateModel(4, "quantile", seed=seed)
    res = train(m, _tiny_dataset(10, seed), TrainerConfig(epochs=30, batch_size=1, learning_rate=0.01))
    n = len(res.losses) // 50 * 50
    windows = res.losses[:n].reshape(-1, 50).mean(axis=1)
    assert len(windows) >= 4
    assert np.all(np.diff(windows) <= 0)


def test_training_errors():
    m = SurrogateModel(4, "quantile")
    with pytest.raises(DomainError):
        train(m, [], TrainerConfig())
    with pytest.raises(ConfigurationError):
        train(m, _tiny_dataset(1), TrainerConfig(loss_kind="gaussian"))
    m.params["point_head.bias"][...] = np.inf
    with pytest.raises(TrainingError) as exc:
        train(m, _tiny_dataset(1), TrainerConfig())
    assert exc.value.step == 0
