import json

import numpy as np
import pytest
from click.testing import CliRunner

from reademb import dataio
from reademb.cli import cli
from reademb.dataio import HRW, LRW, WordSample

TINY = {"d_model": 8, "n_heads": 2, "ffn_dim": 16, "mlp_hidden": [4], "epochs": 2}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def corpus(tmp_path, runner):
    path = tmp_path / "syn.jsonl"
    res = runner.invoke(cli, ["synth", "--sentences", "20", "--words", "6", "--delta", "6", "--eeg-dim", "10",
                              "--wemb-dim", "16", "--seed", "3", "--out", str(path)])
    assert res.exit_code == 0, res.output
    return path


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def raw_corpus(path, channels, samples=40, seed=0):
    rng = np.random.default_rng(seed)
    words = []
    for s in range(2):
        for i in range(3):
            n_fix = (s + i) % 3
            words.append(WordSample("R1", s, i, f"w{i}", HRW if i % 2 else LRW, True, rng.uniform(0, 300, 12),
                                    None, None, eeg_raw=[rng.normal(size=(channels, samples)) for _ in range(n_fix)]))
    return dataio.save_samples(path, dataio.build_records(words))


class TestSynth:
    def test_word_count(self, tmp_path, runner):
        out = tmp_path / "s.jsonl"
        res = runner.invoke(cli, ["synth", "--sentences", "100", "--words", "10", "--delta", "2",
                                  "--eeg-dim", "4", "--out", str(out)])
        assert res.exit_code == 0
        assert "1000 words (500 HRW, 500 LRW)" in res.output
        assert sum(r.n_valid for r in dataio.load_samples(out)) == 1000

    def test_deterministic(self, tmp_path, runner):
        for name in ("a", "b"):
            runner.invoke(cli, ["synth", "--sentences", "5", "--eeg-dim", "4", "--seed", "9",
                                "--out", str(tmp_path / f"{name}.jsonl")])
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_negative_delta(self, tmp_path, runner):
        out = tmp_path / "neg.jsonl"
        res = runner.invoke(cli, ["synth", "--delta", "-1", "--out", str(out)])
        assert res.exit_code == 2
        assert not out.exists()


class TestExtract:
    @pytest.mark.parametrize("channels,dim", [(3, 3), (105, 5460)])
    def test_feature_width(self, tmp_path, runner, channels, dim):
        src = raw_corpus(tmp_path / "raw.jsonl", channels)
        out = tmp_path / "ce.jsonl"
        res = runner.invoke(cli, ["extract", str(src), "--out", str(out)])
        assert res.exit_code == 0, res.output
        recs = dataio.load_samples(out)
        assert dataio.dataset_dims(recs)["eeg"] == dim
        meta = json.loads((tmp_path / "ce.jsonl.meta.json").read_text())
        assert meta["channels"] == channels and meta["bins"] == 16
        # words with no fixation carry a zero EEG vector
        assert not recs[0].words[0].eeg.any()

    def test_missing_raw(self, tmp_path, runner, corpus):
        res = runner.invoke(cli, ["extract", str(corpus), "--out", str(tmp_path / "x.jsonl")])
        assert res.exit_code == 3
        assert "eeg_raw" in res.output
        assert not (tmp_path / "x.jsonl").exists()

    def test_normalize_eye(self, tmp_path, runner):
        src = raw_corpus(tmp_path / "raw.jsonl", 3)
        out = tmp_path / "ce.jsonl"
        assert runner.invoke(cli, ["extract", str(src), "--out", str(out), "--normalize-eye"]).exit_code == 0
        for rec in dataio.load_samples(out):
            np.testing.assert_allclose(rec.matrix("eye").sum(axis=0), 1.0, atol=1e-12)


class TestCv:
    @pytest.mark.parametrize("mods", ["eye", "eeg,eye", "wemb"])
    def test_modalities(self, tmp_path, runner, corpus, tiny_config, mods):
        out = tmp_path / "cv"
        res = runner.invoke(cli, ["cv", str(corpus), "--config", str(tiny_config), "--modalities", mods,
                                  "--out", str(out)])
        assert res.exit_code == 0, res.output
        doc = json.loads((out / "metrics.json").read_text())
        assert doc["config"]["modalities"] == mods.split(",")
        assert len(doc["subjects"][0]["folds"]) == 5
        assert len(list((out / "checkpoints").glob("*_fold?.json"))) == 5
        assert (out / "roc.csv").read_text().startswith("subject,threshold,fpr,tpr\n")

    def test_byte_identical(self, tmp_path, runner, corpus, tiny_config):
        for name in ("a", "b"):
            runner.invoke(cli, ["cv", str(corpus), "--config", str(tiny_config), "--modalities", "eye",
                                "--seed", "4", "--out", str(tmp_path / name)])
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
        assert (tmp_path / "a" / "roc.csv").read_bytes() == (tmp_path / "b" / "roc.csv").read_bytes()

    def test_flags_override_config(self, tmp_path, runner, corpus):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("d_model: 8\nn_heads: 2\nffn_dim: 16\nmlp_hidden: [4]\nepochs: 2\nlr: 0.01\nfolds: 3\n"
                       "loss_weights: {bce: 0.5}\n")
        res = runner.invoke(cli, ["cv", str(corpus), "--config", str(cfg), "--modalities", "eye", "--lr", "0.02",
                                  "--lambda3", "0", "--out", str(tmp_path / "o"), "--no-save-checkpoints"])
        assert res.exit_code == 0, res.output
        config = json.loads((tmp_path / "o" / "metrics.json").read_text())["config"]
        assert config["lr"] == 0.02
        assert config["folds"] == 3
        assert config["loss_weights"] == {"bce": 0.5, "mse": 1.0, "f1": 0.0}
        assert config["epochs"] == 2

    def test_unknown_config_key(self, tmp_path, runner, corpus):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"learning_rate": 0.1}')
        res = runner.invoke(cli, ["cv", str(corpus), "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert res.exit_code == 2
        assert not (tmp_path / "o").exists()

    def test_bad_modality(self, tmp_path, runner, corpus):
        res = runner.invoke(cli, ["cv", str(corpus), "--modalities", "eye,audio", "--out", str(tmp_path / "o")])
        assert res.exit_code == 2

    def test_all_loss_weights_zero(self, tmp_path, runner, corpus):
        res = runner.invoke(cli, ["cv", str(corpus), "--lambda1", "0", "--lambda2", "0", "--lambda3", "0",
                                  "--out", str(tmp_path / "o")])
        assert res.exit_code == 2

    def test_schema_error(self, tmp_path, runner):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"subject": "S", "sentence": 0, "word": 0, "label": "HRW", "eye": [1, 2]}\n')
        res = runner.invoke(cli, ["cv", str(bad), "--out", str(tmp_path / "o")])
        assert res.exit_code == 3
        assert "bad.jsonl:1" in res.output

    def test_nan_features_exit_numeric(self, tmp_path, runner, corpus, tiny_config):
        recs = dataio.load_samples(corpus)
        recs[0].words[0].eye[0] = np.nan
        bad = dataio.save_samples(tmp_path / "nan.jsonl", recs)
        res = runner.invoke(cli, ["cv", str(bad), "--config", str(tiny_config), "--modalities", "eye",
                                  "--out", str(tmp_path / "o")])
        assert res.exit_code == 4


class TestTrainEvalExport:
    def test_pipeline(self, tmp_path, runner, corpus, tiny_config):
        ckpt = tmp_path / "m.json"
        res = runner.invoke(cli, ["train", str(corpus), "--config", str(tiny_config), "--out", str(ckpt)])
        assert res.exit_code == 0, res.output
        assert json.loads(ckpt.read_text())["train_config"]["epochs"] == 2

        res = runner.invoke(cli, ["eval", str(corpus), "--checkpoint", str(ckpt), "--out", str(tmp_path / "e.json")])
        assert res.exit_code == 0, res.output
        metrics = json.loads((tmp_path / "e.json").read_text())
        assert metrics["n"] == 120 and 0 <= metrics["auc"] <= 1

        res = runner.invoke(cli, ["export", str(corpus), "--checkpoint", str(ckpt), "--out", str(tmp_path / "emb")])
        assert res.exit_code == 0, res.output
        assert res.output.rstrip().endswith("120 rows")
        assert dataio.read_sidecar(tmp_path / "emb").shape == (120, 8)

    def test_corrupt_checkpoint(self, tmp_path, runner, corpus, tiny_config):
        ckpt = tmp_path / "m.json"
        runner.invoke(cli, ["train", str(corpus), "--config", str(tiny_config), "--out", str(ckpt)])
        side = tmp_path / "m.json.params.f64"
        raw = bytearray(side.read_bytes())
        raw[40] ^= 1
        side.write_bytes(bytes(raw))
        res = runner.invoke(cli, ["export", str(corpus), "--checkpoint", str(ckpt), "--out", str(tmp_path / "emb")])
        assert res.exit_code == 3
        assert "checksum" in res.output
        assert not (tmp_path / "emb").exists()
