import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reademb import dataio, harness
from reademb.harness import TrainConfig, TrainingError, roc_auc
from reademb.model import ReadingEmbeddingModel
from reademb.numcore import ContractError

TINY = dict(d_model=8, n_heads=2, ffn_dim=16, mlp_hidden=(4,))


def tiny_cfg(**kw):
    base = dict(TINY, epochs=3, modalities=("eye",), seed=5)
    base.update(kw)
    return TrainConfig(**base)


def concordance(scores, labels):
    """Brute-force P(score_pos > score_neg) with ties counted as one half."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


class TestROC:
    def test_perfect(self):
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[1] == 1.0

    def test_inverted(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])[1] == 0.0

    def test_all_tied(self):
        points, auc = roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1])
        assert auc == 0.5
        assert [(x, y) for _, x, y in points] == [(0.0, 0.0), (1.0, 1.0)]

    def test_single_class(self):
        with pytest.raises(ContractError):
            roc_auc([0.1, 0.2], [1, 1])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 60), st.booleans())
    def test_matches_concordance(self, seed, n, coarse):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 5, n) / 4 if coarse else rng.uniform(size=n)
        points, auc = roc_auc(scores, labels)
        assert abs(auc - concordance(scores, labels)) <= 1e-9
        fpr = [x for _, x, _ in points]
        tpr = [y for _, _, y in points]
        assert points[0] == (float("inf"), 0.0, 0.0)
        assert (fpr[-1], tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


class TestEvalResult:
    def test_confusion_and_accuracy(self):
        ev = harness.EvalResult(np.array([0.9, 0.4, 0.6, 0.1, 0.5]), np.array([1, 1, 0, 0, 1]), [None] * 5)
        assert ev.confusion == {"tp": 2, "fp": 1, "tn": 1, "fn": 1}
        assert ev.accuracy == pytest.approx(0.6)


class TestTrain:
    def test_loss_decreases(self, small_corpus):
        cfg = tiny_cfg(epochs=8, modalities=("eeg", "eye"))
        model = ReadingEmbeddingModel(cfg.model_config(dataio.dataset_dims(small_corpus), 1))
        res = harness.train(model, small_corpus, cfg)
        assert res.losses[-1] < res.losses[0]

    def test_deterministic(self, small_corpus):
        cfg = tiny_cfg()
        runs = []
        for _ in range(2):
            model = ReadingEmbeddingModel(cfg.model_config(dataio.dataset_dims(small_corpus), 1))
            runs.append((harness.train(model, small_corpus, cfg).losses, model.flat_parameters().tobytes()))
        assert runs[0] == runs[1]

    def test_nan_features(self, small_corpus):
        recs = copy.deepcopy(small_corpus)
        recs[0].words[2].eye[3] = np.nan
        recs[0].invalidate()
        cfg = tiny_cfg()
        model = ReadingEmbeddingModel(cfg.model_config(dataio.dataset_dims(recs), 1))
        with pytest.raises(TrainingError) as err:
            harness.train(model, recs, cfg)
        assert err.value.epoch == 1

    def test_plateau_stops_early(self, small_corpus):
        cfg = tiny_cfg(epochs=40, plateau_window=2, plateau_tol=1.0)
        model = ReadingEmbeddingModel(cfg.model_config(dataio.dataset_dims(small_corpus), 1))
        assert harness.train(model, small_corpus, cfg).epochs_run == 3

    def test_masked_training_set_empty(self, small_corpus):
        cfg = tiny_cfg()
        model = ReadingEmbeddingModel(cfg.model_config(dataio.dataset_dims(small_corpus), 1))
        with pytest.raises(ContractError):
            harness.train(model, small_corpus, cfg, [np.zeros(6, bool)] * len(small_corpus))

    def test_config_validation(self):
        with pytest.raises(ContractError):
            TrainConfig(lr=0)
        with pytest.raises(ContractError):
            TrainConfig(fold_granularity="subject")
        with pytest.raises(ContractError):
            TrainConfig(modalities=("audio",))


class TestSeeds:
    def test_derive_seed_separates_streams(self):
        seeds = {harness.derive_seed(0, s, f, p) for s in ("A", "B") for f in range(5) for p in range(5)}
        assert len(seeds) == 50

    def test_derive_seed_stable(self):
        assert harness.derive_seed(7, "S1", 2, 1) == harness.derive_seed(7, "S1", 2, 1)


class TestCrossValidate:
    def test_five_models(self, small_corpus):
        report = harness.cross_validate(small_corpus, tiny_cfg(), keep_models=True)
        assert report.n_models == 5
        sm = report.subjects[0]
        assert [f.fold for f in sm.folds] == list(range(5))
        # balanced: each fold's test set has equal class counts
        for f in sm.folds:
            c = f.confusion
            assert c["tp"] + c["fn"] == c["tn"] + c["fp"]

    def test_test_words_partition(self, small_corpus):
        jobs = harness.fold_jobs(small_corpus, tiny_cfg(), "SYN")
        tests = [j.test_keys for j in jobs]
        assert sum(len(t) for t in tests) == 120
        assert set().union(*tests) == {w.key for w in dataio.iter_words(small_corpus)}
        assert all(not (j.train_keys & j.test_keys) for j in jobs)

    def test_sentence_granularity(self, small_corpus):
        jobs = harness.fold_jobs(small_corpus, tiny_cfg(fold_granularity="sentence"), "SYN")
        for j in jobs:
            test_sents = {k[1] for k in j.test_keys}
            assert not any(k[1] in test_sents for k in j.train_keys)

    def test_row_order_invariant(self, small_corpus):
        a = harness.cross_validate(small_corpus, tiny_cfg(epochs=2)).to_json()
        b = harness.cross_validate(list(reversed(small_corpus)), tiny_cfg(epochs=2)).to_json()
        assert a == b

    def test_parallel_matches_serial(self, small_corpus):
        cfg = tiny_cfg(epochs=2)
        assert harness.cross_validate(small_corpus, cfg, jobs=2).to_json() == \
            harness.cross_validate(small_corpus, cfg).to_json()

    def test_multiple_subjects(self, small_corpus):
        other = dataio.synth_generate(dataio.SynthSpec(n_sentences=10, words_per_sentence=6, delta=6.0,
                                                       eeg_dim=10, wemb_dim=16, seed=12, subject_id="S2"))
        report = harness.cross_validate(small_corpus + other, tiny_cfg(epochs=2))
        assert [s.subject for s in report.subjects] == ["S2", "SYN"]
        assert report.mean_accuracy == pytest.approx(np.mean([s.mean_accuracy for s in report.subjects]))

    def test_missing_modality(self, small_corpus):
        recs = dataio.synth_generate(dataio.SynthSpec(n_sentences=10, words_per_sentence=6, eeg_dim=0, seed=1))
        with pytest.raises(dataio.SchemaError):
            harness.cross_validate(recs, tiny_cfg(modalities=("eeg",)))

    def test_report_serialization(self, small_corpus):
        report = harness.cross_validate(small_corpus, tiny_cfg(epochs=2))
        doc = json.loads(report.to_json())
        assert doc["config"]["epochs"] == 2
        rows = report.roc_csv().splitlines()
        assert rows[0] == "subject,threshold,fpr,tpr"
        assert rows[1].startswith("SYN,inf,0")


class TestFullTrainingAndExport:
    def test_train_and_evaluate(self, small_corpus):
        res = harness.train_full(small_corpus, tiny_cfg(epochs=10, modalities=("eeg", "eye")))
        out = harness.evaluate_dataset(res.model, small_corpus)
        assert out["n"] == 120
        assert out["accuracy"] > 0.8
        assert out["roc"][0]["threshold"] is None

    def test_export(self, tmp_path, small_corpus):
        model = harness.train_full(small_corpus, tiny_cfg(epochs=1)).model
        side, manifest = harness.export_embeddings(model, small_corpus, tmp_path / "emb.f64")
        matrix = dataio.read_sidecar(side)
        meta = json.loads(manifest.read_text())
        assert matrix.shape == (120, 8) and meta["rows"] == 120
        first = model.encode(small_corpus[0]).data
        np.testing.assert_allclose(matrix[:6], first, rtol=0, atol=1e-12)
        assert meta["words"][0]["label"] in (dataio.HRW, dataio.LRW)

    def test_export_deterministic(self, tmp_path, small_corpus):
        model = harness.train_full(small_corpus, tiny_cfg(epochs=1)).model
        a, _ = harness.export_embeddings(model, small_corpus, tmp_path / "a.f64")
        b, _ = harness.export_embeddings(model, small_corpus, tmp_path / "b.f64")
        assert a.read_bytes() == b.read_bytes()
