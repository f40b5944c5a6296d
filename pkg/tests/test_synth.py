import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparseq.core import QuantileStack, partition_tracks, raster_to_bytes
from sparseq.errors import ValidationError
from sparseq.losses import best_track_shift, multi_quantile_loss
from sparseq.metrics import DEFAULT_QUANTILES, PooledPredictions
from sparseq.rng import derived_seed, stream
from sparseq.stats import norm_ppf
from sparseq.synth import (
    ForestSpec,
    NoiseSpec,
    SceneSpec,
    TrackSpec,
    generate_scene,
    load_scene,
    make_scene,
    sample_labels,
    track_columns,
    write_scene,
)


def small(**kw):
    base = dict(height=48, width=48, tracks=TrackSpec(count=4, spacing=8, step=3))
    base.update(kw)
    return SceneSpec(**base)


def test_streams_are_reproducible_and_independent():
    assert np.array_equal(stream(3, 1, 2).random(5), stream(3, 1, 2).random(5))
    assert not np.array_equal(stream(3, 1, 2).random(5), stream(3, 2, 1).random(5))
    assert derived_seed(0, 6, 0, 1) == derived_seed(0, 6, 0, 1) != derived_seed(0, 6, 0, 2)
    assert 0 <= derived_seed(9, 1) < 2**63


def test_scene_is_bit_deterministic(tmp_path):
    a, b = make_scene(small(seed=11)), make_scene(small(seed=11))
    assert raster_to_bytes(a.features) == raster_to_bytes(b.features)
    assert a.labels == b.labels and a.offsets == b.offsets
    write_scene(a, tmp_path / "a")
    write_scene(b, tmp_path / "b")
    for f in ("features.qrg", "true_height.qrg", "dem.qrg", "labels.csv", "truth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert raster_to_bytes(make_scene(small(seed=12)).features) != raster_to_bytes(a.features)


def test_scene_directory_round_trip(tmp_path):
    s = make_scene(small(seed=4))
    write_scene(s, tmp_path / "s")
    back = load_scene(tmp_path / "s")
    assert back.features == s.features and back.labels == s.labels
    assert back.offsets == s.offsets and back.spec == s.spec
    assert np.array_equal(back.truth.true_height, s.truth.true_height)


def test_zero_coverage_leaves_baseline_only():
    _, truth = generate_scene(small(forest=ForestSpec(coverage=0.0), baseline_height=1.5))
    assert np.all(truth.true_height == 1.5)
    _, truth = generate_scene(small(forest=ForestSpec(coverage=0.0), baseline_height=0.0))
    assert np.all(truth.true_height == 0.0)


def test_features():
    f, truth = generate_scene(small(n_features=7))
    assert f.channels == 7 and f.data.dtype == np.float32
    assert np.allclose(f.data[0], truth.true_height / 20.0, atol=1e-6)
    with pytest.raises(ValidationError):
        small(n_features=3)


def test_spec_validation():
    with pytest.raises(ValidationError):
        small(forest=ForestSpec(coverage=1.5))
    with pytest.raises(ValidationError):
        small(tracks=TrackSpec(spacing=0))
    with pytest.raises(ValidationError):
        small(noise=NoiseSpec(kind="uniform"))
    with pytest.raises(ValidationError):
        track_columns(small(tracks=TrackSpec(count=20, spacing=6)))


def test_lognormal_quantile_closed_form():
    _, truth = generate_scene(small(noise=NoiseSpec("lognormal", 0.4)))
    for tau in (0.1, 0.5, 0.9):
        assert np.allclose(truth.quantile(tau), truth.true_height * np.exp(0.4 * norm_ppf(tau)))


def test_noise_free_labels_equal_truth():
    spec = small(noise=NoiseSpec("none"), tracks=TrackSpec(count=4, spacing=8, step=3, offsets="zero"))
    s = make_scene(spec)
    assert np.array_equal(s.labels.heights, s.truth.true_height[s.labels.rows, s.labels.cols])
    stack = QuantileStack(DEFAULT_QUANTILES, np.repeat(s.truth.true_height[None], 11, axis=0))
    assert multi_quantile_loss(DEFAULT_QUANTILES, s.labels, stack) == 0


def test_fixed_offset_is_undone_by_the_shift_search():
    spec = small(noise=NoiseSpec("none"),
                 tracks=TrackSpec(count=3, spacing=10, step=3, offsets=[[1, 0], [0, 0], [0, -1]]))
    s = make_scene(spec)
    stack = QuantileStack((0.5,), s.truth.true_height[None])
    found = {t.track_id: best_track_shift((0.5,), t, stack) for t in partition_tracks(s.labels)}
    assert found[0] == (0.0, (-1, 0))
    assert found[1][0] == 0.0
    assert found[2] == (0.0, (0, 1))


@given(st.integers(0, 10_000), st.sampled_from(["none", "gaussian", "lognormal"]))
@settings(max_examples=25)
def test_label_accounting(seed, kind):
    spec = small(seed=seed, noise=NoiseSpec(kind, 2.0 if kind == "gaussian" else 0.3),
                 tracks=TrackSpec(count=4, spacing=8, step=3, margin=0))
    _, truth = generate_scene(spec)
    sample = sample_labels(truth, spec)
    assert len(sample.labels) == (sample.n_points - sample.dropped_off_grid
                                  - sample.dropped_duplicate - sample.dropped_nonpositive)
    assert np.all(sample.labels.heights > 0)
    assert all(abs(a) <= 1 and abs(b) <= 1 for a, b in sample.offsets.values())


@pytest.mark.parametrize("noise", [NoiseSpec("lognormal", 0.3), NoiseSpec("gaussian", 3.0),
                                   NoiseSpec("lognormal", 0.2, slope_gain=0.5)])
def test_closed_form_quantiles_are_calibrated(noise):
    pairs = []
    n = 0
    seed = 0
    while n < 50_000:
        spec = SceneSpec(noise=noise, seed=seed, tracks=TrackSpec(count=14, spacing=9, step=1, offsets="zero"))
        s = make_scene(spec)
        pairs.append((s.truth.quantile_stack(DEFAULT_QUANTILES), s.labels))
        n += len(s.labels)
        seed += 1
    pooled = PooledPredictions.from_scenes(pairs)
    for tau in DEFAULT_QUANTILES:
        assert abs(pooled.ec(tau) - tau) <= 0.02, (tau, pooled.ec(tau))
