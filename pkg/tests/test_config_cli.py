import csv
import json

import pytest

from sparseq.cli import main
from sparseq.config import dump_config, known_keys, parse_config
from sparseq.errors import ConfigurationError
from sparseq.experiment import COMPARISON_COLUMNS_HEAD, sha256_file

TINY = """\
# small, fast scenes
run.n_train_scenes = 2
run.n_test_scenes = 2
scene.height = 24
scene.width = 24
tracks.count = 3
tracks.spacing = 6
tracks.step = 2
train.epochs = 2
train.batch_size = 2
"""


def test_empty_config_is_all_defaults():
    cfg = parse_config("")
    assert cfg.train.learning_rate == 1e-3 and cfg.run.alphas == (0.5, 0.6, 0.7, 0.8, 0.9)
    assert not cfg.explicit


def test_dump_parse_round_trip():
    cfg = parse_config(TINY + "tracks.offsets = 1,0;0,0;-1,1\nrun.target_bins = 0,10,inf\n")
    again = parse_config(dump_config(cfg))
    assert dump_config(again) == dump_config(cfg)
    assert again.scene.tracks.offsets == [[1, 0], [0, 0], [-1, 1]]
    assert len(dump_config(cfg).splitlines()) == len(known_keys())


@pytest.mark.parametrize("text", ["foo = 1", "train.nope = 2", "train.epochs = x", "train.epochs = 0",
                                  "noise.kind = uniform", "missing equals sign", "run.alphas = 0.5,1.5"])
def test_bad_configs(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_unknown_key_exit_code(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("foo = 1\n")
    assert main(["--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "r"), "synth"]) == 2
    assert "foo" in capsys.readouterr().err


def test_missing_seed_is_logged(tmp_path, capsys):
    (tmp_path / "c.txt").write_text(TINY)
    assert main(["synth", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "r")]) == 0
    assert "run.seed not set; using default 0" in capsys.readouterr().err


def _files(run):
    return {p.relative_to(run).as_posix(): sha256_file(p) for p in sorted(run.rglob("*")) if p.is_file()}


def _pipeline(cfg, out, *train_flags):
    assert main(["--config", str(cfg), "--out", str(out), "--quiet", "synth"]) == 0
    assert main(["train", "--out", str(out), "--quiet", *train_flags]) == 0
    assert main(["eval", "--out", str(out), "--quiet"]) == 0
    assert main(["analyze", "--out", str(out), "--quiet"]) == 0
    assert main(["predict", "--out", str(out), "--quiet"]) == 0


def test_pipeline_is_idempotent(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY)
    _pipeline(cfg, tmp_path / "a")
    _pipeline(cfg, tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b
    assert {"model.qrm", "loss_trace.csv", "report.json", "report.csv", "ec_curve.svg", "scatter.svg",
            "analysis/suspect_labels.csv", "analysis/analysis.json", "predictions/scene_000/manifest.json"} <= set(a)
    # re-running a step in place reproduces it
    before = sha256_file(tmp_path / "a" / "report.json")
    assert main(["eval", "--out", str(tmp_path / "a"), "--quiet"]) == 0
    assert sha256_file(tmp_path / "a" / "report.json") == before


def test_train_outputs(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY)
    out = tmp_path / "g"
    _pipeline(cfg, out, "--loss", "gaussian", "--shift", "false")
    conf = (out / "config.txt").read_text()
    assert "train.loss_kind = gaussian" in conf and "train.use_shift_loss = false" in conf
    rows = list(csv.DictReader((out / "loss_trace.csv").open()))
    # 2 train scenes, batch 2, 2 epochs
    assert [int(r["step"]) for r in rows] == [0, 1]
    report = json.loads((out / "report.json").read_text())
    assert report["meta"]["loss_kind"] == "gaussian"
    assert set(report["mpiw_per_alpha"]) == set(report["picp_per_alpha"]) == {"0.5", "0.6", "0.7", "0.8", "0.9"}
    assert json.loads((out / "predictions/scene_000/manifest.json").read_text())["channels"][1]["name"] == "log_var"


def test_same_seed_same_checkpoint_different_seed_differs(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY)
    hashes = []
    for name, seed in (("a", "1"), ("b", "1"), ("c", "2")):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", seed, "--quiet"]) == 0
        hashes.append(sha256_file(tmp_path / name / "model.qrm"))
    assert hashes[0] == hashes[1] != hashes[2]


def test_analysis_outputs(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY)
    _pipeline(cfg, tmp_path / "r")
    an = tmp_path / "r" / "analysis"
    header = (an / "suspect_labels.csv").read_text().splitlines()[0]
    assert header == "track_id,row,col,height,scene,prediction,reason"
    doc = json.loads((an / "analysis.json").read_text())
    assert doc["suspect_rule"] == {"quantile": 0.9, "pred_ceiling": 10.0, "label_floor": 30.0}
    assert {r["group"] for r in doc["border"]} == {"interior", "border"}
    assert all(r["count"] > 0 for r in doc["slope"])
    assert {"picp", "piw_median"} <= set(doc["border"][0])
    assert (an / "scene_000" / "border_mask.qrg").is_file()


def test_report_table(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(TINY)
    _pipeline(cfg, tmp_path / "q")
    _pipeline(cfg, tmp_path / "g", "--loss", "gaussian")
    assert main(["report", str(tmp_path / "q"), str(tmp_path / "g"), "--out", str(tmp_path / "cmp"), "--quiet"]) == 0
    rows = list(csv.reader((tmp_path / "cmp" / "comparison.csv").open()))
    alphas = ["0.5", "0.6", "0.7", "0.8", "0.9"]
    assert rows[0] == list(COMPARISON_COLUMNS_HEAD) + [f"mpiw_{a}" for a in alphas] + [f"picp_{a}" for a in alphas]
    assert [r[0] for r in rows[1:]] == ["q", "g"]
    svg = (tmp_path / "cmp" / "ec_curves.svg").read_text()
    assert svg.count('class="series"') == 2


def test_report_missing_run_dir(tmp_path):
    assert main(["report", str(tmp_path / "nope"), "--quiet"]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty"), "--quiet"]) == 2


def test_runtime_failure_exit_code(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "none"), "--quiet"]) == 1


def test_thread_env(tmp_path, monkeypatch):
    (tmp_path / "c.txt").write_text(TINY)
    monkeypatch.setenv("SPARSEQ_THREADS", "zero")
    assert main(["synth", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "r"), "--quiet"]) == 2
    monkeypatch.setenv("SPARSEQ_THREADS", "1")
    assert main(["synth", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "r"), "--quiet"]) == 0


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--loss", "huber"])
    assert exc.value.code == 2
