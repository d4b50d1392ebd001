"""CLI pipeline: synth -> train -> eval -> probe -> ensemble -> stats."""

import json

import numpy as np
import pytest

from burst2vec.cli import main, worker_cap
from burst2vec.data import SynthConfig, generate_synthetic, load_manifest
from burst2vec.metrics import MetricsReport, read_predictions

CONFIG = """
synth.n_clips = 200
synth.feature_dim = 16
synth.frames_min = 5
synth.frames_max = 8
synth.age_country_bias = 0.6

model.encoder_mode = feature
model.encoder_dim = 16
model.proj_dim = 8
model.hidden_dim = 8

train.batch_size = 16
train.max_epochs = 2
train.validate_every = 50
train.patience = 10
train.lr = 0.001
train.seed = 3
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole pipeline once; individual tests inspect the artifacts."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    cfg = root / "run.cfg"
    cfg.write_text(CONFIG)
    data = root / "data"
    run = root / "run"
    evaldir = root / "eval"

    assert main(["synth", "--config", str(cfg), "--out", str(data),
                 "--seed", "11"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data),
                 "--out", str(run)]) == 0
    assert main(["eval", "--checkpoint", str(run / "best.b2vc"),
                 "--data", str(data), "--out", str(evaldir)]) == 0
    return {"root": root, "cfg": cfg, "data": data, "run": run, "eval": evaldir}


class TestPipeline:
    def test_synth_artifacts(self, pipeline):
        manifest = load_manifest(pipeline["data"] / "manifest.csv")
        assert len(manifest.records) == 200
        assert (pipeline["data"] / "feats").is_dir()

    def test_train_artifacts(self, pipeline):
        run = pipeline["run"]
        for name in ("best.b2vc", "train_log.jsonl", "result.json",
                     "config_snapshot.txt", "last_validation.json"):
            assert (run / name).exists(), name
        result = json.loads((run / "result.json").read_text())
        assert result["iterations"] == len(
            (run / "train_log.jsonl").read_text().splitlines())
        assert result["best_iteration"] <= result["iterations"]

    def test_eval_artifacts(self, pipeline):
        report = MetricsReport.from_json(
            (pipeline["eval"] / "report.json").read_text())
        preds = read_predictions(pipeline["eval"] / "predictions.csv")
        assert report.sample_count == len(preds.clip_ids)

    def test_probe_writes_payload(self, pipeline):
        out = pipeline["root"] / "probe.json"
        assert main(["probe", "--checkpoint", str(pipeline["run"] / "best.b2vc"),
                     "--data", str(pipeline["data"]), "--split", "train",
                     "--kind", "specific", "--task", "age",
                     "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["chance"] == 0.25
        assert payload["kind"] == "specific" and payload["task"] == "AGE"
        assert 0.0 <= payload["accuracy"] <= 1.0

    def test_ensemble_of_identical_is_identity(self, pipeline):
        src = pipeline["eval"] / "predictions.csv"
        out = pipeline["root"] / "merged.csv"
        assert main(["ensemble", "--inputs", str(src), str(src),
                     "--out", str(out)]) == 0
        a, b = read_predictions(src), read_predictions(out)
        np.testing.assert_array_equal(a.emotions, b.emotions)
        np.testing.assert_array_equal(a.age_years, b.age_years)

    def test_stats_on_identical_predictions(self, pipeline):
        src = pipeline["eval"] / "predictions.csv"
        out = pipeline["root"] / "stats.json"
        assert main(["stats", "--pred-a", str(src), "--pred-b", str(src),
                     "--data", str(pipeline["data"]), "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["emotion_t"] == 0.0 and payload["emotion_p"] == 1.0
        assert payload["country_q"] == 0.0 and payload["country_df"] == 1

    def test_stats_rejects_wrong_split(self, pipeline):
        src = pipeline["eval"] / "predictions.csv"
        with pytest.raises(SystemExit, match="manifest order"):
            main(["stats", "--pred-a", str(src), "--pred-b", str(src),
                  "--data", str(pipeline["data"]), "--split", "test"])

    def test_train_rerun_is_byte_identical(self, pipeline):
        rerun = pipeline["root"] / "rerun"
        assert main(["train", "--config", str(pipeline["cfg"]),
                     "--data", str(pipeline["data"]), "--out", str(rerun)]) == 0
        run = pipeline["run"]
        assert (rerun / "best.b2vc").read_bytes() == (run / "best.b2vc").read_bytes()
        assert (rerun / "train_log.jsonl").read_bytes() == \
            (run / "train_log.jsonl").read_bytes()


class TestGuards:
    def test_refuses_nonempty_out_dir(self, pipeline):
        with pytest.raises(SystemExit, match="refusing"):
            main(["synth", "--config", str(pipeline["cfg"]),
                  "--out", str(pipeline["data"])])

    def test_force_allows_overwrite(self, tmp_path):
        cfg = tmp_path / "s.cfg"
        cfg.write_text("synth.n_clips = 30\nsynth.feature_dim = 4\n")
        out = tmp_path / "ds"
        assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["synth", "--config", str(cfg), "--out", str(out),
                     "--force"]) == 0

    def test_config_error_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("synth.clips = 10\n")  # typo: unknown key
        assert main(["synth", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
        assert "unknown synth config keys" in capsys.readouterr().err

    def test_missing_checkpoint_exits_2(self, pipeline, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "missing.b2vc"),
                     "--data", str(pipeline["data"]),
                     "--out", str(tmp_path / "e")]) == 2

    def test_worker_cap(self, monkeypatch):
        monkeypatch.delenv("B2V_THREADS", raising=False)
        assert worker_cap() == 1
        monkeypatch.setenv("B2V_THREADS", "4")
        assert worker_cap() == 1  # single-threaded build caps at 1
        monkeypatch.setenv("B2V_THREADS", "abc")
        with pytest.raises(SystemExit, match="integer"):
            worker_cap()
        monkeypatch.setenv("B2V_THREADS", "0")
        with pytest.raises(SystemExit, match=">= 1"):
            worker_cap()


class TestPreprocess:
    def test_corrupt_clip_reported_and_skipped(self, tmp_path, capsys):
        src = tmp_path / "raw"
        cfg = SynthConfig(n_clips=6, mode="waveform", duration_min=0.06,
                          duration_max=0.1)
        manifest = generate_synthetic(cfg, seed=2, out_dir=src)
        victim = manifest.media_path(manifest.records[2])
        victim.write_bytes(b"this is not audio")

        out = tmp_path / "clean"
        code = main(["preprocess", "--input", str(src), "--out", str(out)])
        assert code == 1
        printed = capsys.readouterr().out
        assert "5 written, 1 failed" in printed
        assert manifest.records[2].clip_id in printed

        cleaned = load_manifest(out / "manifest.csv")
        kept = {r.clip_id for r in cleaned.records}
        assert manifest.records[2].clip_id not in kept
        assert len(cleaned.records) == 5

    def test_all_clips_clean_exit_0(self, tmp_path):
        src = tmp_path / "raw"
        cfg = SynthConfig(n_clips=4, mode="waveform", duration_min=0.06,
                          duration_max=0.1)
        generate_synthetic(cfg, seed=3, out_dir=src)
        out = tmp_path / "clean"
        assert main(["preprocess", "--input", str(src), "--out", str(out)]) == 0
        cleaned = load_manifest(out / "manifest.csv")
        assert len(cleaned.records) == 4
