"""Training loop, per-subject k-fold cross-validation, and metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio
from . import numcore as nc
from .dataio import SentenceRecord, WordSample, atomic_write, write_sidecar
from .model import LossWeights, ModelConfig, ReadingEmbeddingModel
from .numcore import ContractError, NumericError

log = logging.getLogger(__name__)


class TrainingError(NumericError):
    def __init__(self, epoch: int, msg: str = "loss is not finite"):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 50
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    modalities: tuple[str, ...] = ("eeg", "eye")
    folds: int = 5
    balance: bool = True
    fold_granularity: str = "word"
    literal_n: bool = False
    standard_f1: bool = False
    mask_zero_fixation: bool = False
    plateau_window: int = 5
    plateau_tol: float = 1e-5
    # encoder hyperparameters, forwarded to ModelConfig
    d_model: int = 128
    n_heads: int = 4
    ffn_dim: int = 256
    mlp_hidden: tuple[int, ...] = (64,)
    use_layer_norm: bool = True
    use_residual: bool = True

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        elif isinstance(self.loss_weights, (list, tuple)):
            self.loss_weights = LossWeights(*self.loss_weights)
        self.modalities = tuple(self.modalities)
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.folds < 2:
            raise ContractError(f"need at least 2 folds, got {self.folds}")
        if self.fold_granularity not in ("word", "sentence"):
            raise ContractError(f"fold granularity must be 'word' or 'sentence', got {self.fold_granularity!r}")
        for m in self.modalities:
            if m not in dataio.MODALITIES:
                raise ContractError(f"unknown modality {m!r}")

    def model_config(self, input_dims: dict, seed: int) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, ffn_dim=self.ffn_dim,
            mlp_hidden=self.mlp_hidden, use_layer_norm=self.use_layer_norm,
            use_residual=self.use_residual, modalities=self.modalities,
            input_dims={m: int(input_dims[m]) for m in self.modalities}, seed=seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d


@dataclass
class TrainResult:
    model: ReadingEmbeddingModel
    losses: list[float]

    @property
    def epochs_run(self) -> int:
        return len(self.losses)


@dataclass
class EvalResult:
    scores: np.ndarray
    labels: np.ndarray
    keys: list

    @property
    def confusion(self) -> dict[str, int]:
        pred = self.scores >= 0.5
        pos = self.labels == 1
        return {
            "tp": int(np.sum(pred & pos)),
            "fp": int(np.sum(pred & ~pos)),
            "tn": int(np.sum(~pred & ~pos)),
            "fn": int(np.sum(~pred & pos)),
        }

    @property
    def accuracy(self) -> float:
        c = self.confusion
        return (c["tp"] + c["tn"]) / len(self.scores)


@dataclass
class FoldMetrics:
    fold: int
    accuracy: float
    auc: float
    confusion: dict
    n_train: int
    n_test: int
    epochs_run: int
    final_loss: float


@dataclass
class SubjectMetrics:
    subject: str
    folds: list[FoldMetrics]
    roc: list[tuple[float, float, float]]
    pooled_auc: float

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([f.accuracy for f in self.folds]))

    @property
    def mean_auc(self) -> float:
        return float(np.mean([f.auc for f in self.folds]))


@dataclass
class MetricsReport:
    subjects: list[SubjectMetrics]
    config: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False)  # (subject, fold) -> model, when kept

    @property
    def mean_accuracy(self) -> float:
        """Unweighted mean of per-subject mean fold accuracies."""
        return float(np.mean([s.mean_accuracy for s in self.subjects]))

    @property
    def mean_auc(self) -> float:
        return float(np.mean([s.mean_auc for s in self.subjects]))

    @property
    def n_models(self) -> int:
        return sum(len(s.folds) for s in self.subjects)

    def to_dict(self) -> dict:
        subjects = []
        for s in self.subjects:
            subjects.append({
                "subject": s.subject,
                "mean_accuracy": s.mean_accuracy,
                "mean_auc": s.mean_auc,
                "pooled_auc": s.pooled_auc,
                "folds": [asdict(f) for f in s.folds],
                "roc": [{"threshold": _finite_or_none(t), "fpr": x, "tpr": y} for t, x, y in s.roc],
            })
        return {
            "mean_accuracy": self.mean_accuracy,
            "mean_auc": self.mean_auc,
            "n_models": self.n_models,
            "subjects": subjects,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def roc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject", "threshold", "fpr", "tpr"])
        for s in self.subjects:
            for t, x, y in s.roc:
                w.writerow([s.subject, repr(t) if math.isfinite(t) else "inf", repr(x), repr(y)])
        return buf.getvalue()


def _finite_or_none(x: float):
    return x if math.isfinite(x) else None


# -- metrics ---------------------------------------------------------------


def roc_auc(scores, labels) -> tuple[list[tuple[float, float, float]], float]:
    """ROC points ``(threshold, fpr, tpr)`` and trapezoid AUC.

    One point per distinct score (descending), starting at ``(inf, 0, 0)``;
    tied scores move both coordinates at once, giving a diagonal segment.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs both classes present")
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    tps = np.cumsum(l)
    fps = np.cumsum(~l)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tpr = np.r_[0.0, tps[ends] / n_pos]
    fpr = np.r_[0.0, fps[ends] / n_neg]
    thresholds = np.r_[np.inf, s[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    points = [(float(t), float(x), float(y)) for t, x, y in zip(thresholds, fpr, tpr)]
    return points, auc


# -- training --------------------------------------------------------------


def _plateaued(losses: Sequence[float], window: int, tol: float) -> bool:
    if window < 1 or len(losses) <= window:
        return False
    ref = losses[-1 - window]
    return abs(losses[-1] - ref) <= tol * max(abs(ref), 1e-300)


def train(model: ReadingEmbeddingModel, sentences: Sequence[SentenceRecord], cfg: TrainConfig,
          loss_masks: Sequence[np.ndarray] | None = None) -> TrainResult:
    """One SGD step per sentence, sentences visited in a seeded shuffled order each epoch.

    ``loss_masks`` restricts which words contribute to the loss (they are
    always intersected with each sentence's validity mask).
    """
    if loss_masks is None:
        loss_masks = [s.mask for s in sentences]
    batches = [(s, np.asarray(m, dtype=bool) & s.mask) for s, m in zip(sentences, loss_masks)]
    batches = [(s, m) for s, m in batches if m.any()]
    if not batches:
        raise ContractError("training set has no unmasked samples")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    losses: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for i in rng.permutation(len(batches)):
            rec, mask = batches[i]
            loss = model.loss(rec, mask, cfg.loss_weights, cfg.literal_n, cfg.standard_f1)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(epoch)
            nc.backward(loss)
            nc.sgd_step(params, cfg.lr)
            total += value
        losses.append(total / len(batches))
        log.debug("epoch %d loss %.6f", epoch, losses[-1])
        if _plateaued(losses, cfg.plateau_window, cfg.plateau_tol):
            break
    return TrainResult(model, losses)


def predict(model: ReadingEmbeddingModel, record: SentenceRecord) -> np.ndarray:
    return model.forward_sentence(record).p


def evaluate(model: ReadingEmbeddingModel, sentences: Sequence[SentenceRecord],
             eval_masks: Sequence[np.ndarray] | None = None) -> EvalResult:
    """Scores and labels for every selected valid word; accuracy uses a 0.5 threshold."""
    if eval_masks is None:
        eval_masks = [s.mask for s in sentences]
    scores, labels, keys = [], [], []
    for rec, m in zip(sentences, eval_masks):
        m = np.asarray(m, dtype=bool) & rec.mask
        if not m.any():
            continue
        p = predict(model, rec)
        for i in np.nonzero(m)[0]:
            scores.append(p[i])
            labels.append(int(rec.words[i].label == dataio.HRW))
            keys.append(rec.words[i].key)
    if not scores:
        raise ContractError("evaluation set is empty")
    return EvalResult(np.array(scores), np.array(labels), keys)


# -- cross-validation --------------------------------------------------------


def derive_seed(base_seed: int, subject: str, fold: int, purpose: int = 0) -> int:
    ss = np.random.SeedSequence([int(base_seed), zlib.crc32(subject.encode("utf-8")), int(fold), int(purpose)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _masks_for(sentences: Sequence[SentenceRecord], keys: set) -> list[np.ndarray]:
    return [np.array([w.key in keys for w in rec.words], dtype=bool) for rec in sentences]


def _select(samples: Sequence[WordSample], cfg: TrainConfig, seed: int) -> list[WordSample]:
    return dataio.downsample_balance(samples, seed) if cfg.balance else [w for w in samples if w.valid]


@dataclass
class _FoldJob:
    subject: str
    fold: int
    records: list
    train_keys: set
    test_keys: set
    input_dims: dict
    cfg: TrainConfig


def _run_fold(job: _FoldJob, keep_model: bool = False):
    cfg = job.cfg
    words = [w for w in dataio.iter_words(job.records, include_invalid=False)]
    train_words = _select([w for w in words if w.key in job.train_keys], cfg,
                          derive_seed(cfg.seed, job.subject, job.fold, 1))
    test_words = _select([w for w in words if w.key in job.test_keys], cfg,
                         derive_seed(cfg.seed, job.subject, job.fold, 2))
    train_set = {w.key for w in train_words}
    test_set = {w.key for w in test_words}
    model = ReadingEmbeddingModel(cfg.model_config(job.input_dims, derive_seed(cfg.seed, job.subject, job.fold, 3)))
    fold_cfg = TrainConfig(**{**cfg.__dict__, "seed": derive_seed(cfg.seed, job.subject, job.fold, 4)})
    result = train(model, job.records, fold_cfg, _masks_for(job.records, train_set))
    ev = evaluate(model, job.records, _masks_for(job.records, test_set))
    _, auc = roc_auc(ev.scores, ev.labels)
    fm = FoldMetrics(job.fold, ev.accuracy, auc, ev.confusion, len(train_set), len(test_set),
                     result.epochs_run, result.losses[-1])
    log.info("subject %s fold %d: acc %.4f auc %.4f (%d epochs)", job.subject, job.fold, fm.accuracy, auc,
             result.epochs_run)
    return fm, ev, (model if keep_model else None)


def fold_jobs(records: Sequence[SentenceRecord], cfg: TrainConfig, subject: str) -> list[_FoldJob]:
    recs = sorted((r for r in records if r.subject_id == subject), key=lambda r: r.sentence_id)
    if cfg.mask_zero_fixation:
        recs = dataio.apply_zero_fixation_mask(recs)
    dims = dataio.dataset_dims(recs)
    missing = [m for m in cfg.modalities if m not in dims]
    if missing:
        raise dataio.SchemaError(f"subject {subject}: dataset lacks modalities {missing}")
    words = list(dataio.iter_words(recs, include_invalid=False))
    split_seed = derive_seed(cfg.seed, subject, 0, 0)
    if cfg.fold_granularity == "sentence":
        split = dataio.kfold_split({(r.subject_id, r.sentence_id) for r in recs if r.n_valid}, cfg.folds,
                                   split_seed, "sentence")
        fold_of = {w.key: split.fold_of((w.subject_id, w.sentence_id)) for w in words}
    else:
        split = dataio.kfold_split([w.key for w in words], cfg.folds, split_seed)
        fold_of = {w.key: split.fold_of(w.key) for w in words}
    jobs = []
    for f in range(cfg.folds):
        test_keys = {k for k, v in fold_of.items() if v == f}
        train_keys = set(fold_of) - test_keys
        jobs.append(_FoldJob(subject, f, recs, train_keys, test_keys, dims, cfg))
    return jobs


def cross_validate(records: Sequence[SentenceRecord], cfg: TrainConfig, jobs: int = 1,
                   keep_models: bool = False) -> MetricsReport:
    """Independent k-fold CV for every subject in ``records``.

    Each fold balances its train and test partitions separately, trains a
    fresh model, and evaluates on the held-out words.
    """
    if not records:
        raise ContractError("empty dataset")
    all_jobs = []
    for subject in dataio.subjects(records):
        all_jobs.extend(fold_jobs(records, cfg, subject))
    keep = [keep_models] * len(all_jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, all_jobs, keep))
    else:
        results = [_run_fold(j, k) for j, k in zip(all_jobs, keep)]
    by_subject: dict[str, list] = {}
    models = {}
    for job, (fm, ev, model) in zip(all_jobs, results):
        by_subject.setdefault(job.subject, []).append((fm, ev))
        if model is not None:
            models[(job.subject, job.fold)] = model
    subjects = []
    for subject in sorted(by_subject):
        folds = [fm for fm, _ in by_subject[subject]]
        scores = np.concatenate([ev.scores for _, ev in by_subject[subject]])
        labels = np.concatenate([ev.labels for _, ev in by_subject[subject]])
        roc, pooled = roc_auc(scores, labels)
        subjects.append(SubjectMetrics(subject, folds, roc, pooled))
    return MetricsReport(subjects, cfg.to_dict(), models)


def _prepared(records: Sequence[SentenceRecord], cfg: TrainConfig) -> list[SentenceRecord]:
    recs = sorted(records, key=lambda r: (r.subject_id, r.sentence_id))
    return dataio.apply_zero_fixation_mask(recs) if cfg.mask_zero_fixation else recs


def train_full(records: Sequence[SentenceRecord], cfg: TrainConfig) -> TrainResult:
    """Train one model on every (balanced) word of ``records``."""
    recs = _prepared(records, cfg)
    words = list(dataio.iter_words(recs, include_invalid=False))
    keys = {w.key for w in _select(words, cfg, derive_seed(cfg.seed, "*", 0, 1))}
    model = ReadingEmbeddingModel(cfg.model_config(dataio.dataset_dims(recs), derive_seed(cfg.seed, "*", 0, 3)))
    fit_cfg = TrainConfig(**{**cfg.__dict__, "seed": derive_seed(cfg.seed, "*", 0, 4)})
    return train(model, recs, fit_cfg, _masks_for(recs, keys))


def evaluate_dataset(model: ReadingEmbeddingModel, records: Sequence[SentenceRecord], seed: int = 0,
                     balance: bool = True) -> dict:
    """Accuracy, confusion, ROC and AUC of ``model`` on (balanced) valid words."""
    words = list(dataio.iter_words(records, include_invalid=False))
    chosen = dataio.downsample_balance(words, seed) if balance else words
    ev = evaluate(model, records, _masks_for(records, {w.key for w in chosen}))
    roc, auc = roc_auc(ev.scores, ev.labels)
    return {
        "accuracy": ev.accuracy,
        "auc": auc,
        "confusion": ev.confusion,
        "n": len(ev.scores),
        "roc": [{"threshold": _finite_or_none(t), "fpr": x, "tpr": y} for t, x, y in roc],
    }


# -- export ----------------------------------------------------------------


def encoder_outputs(model: ReadingEmbeddingModel, records: Sequence[SentenceRecord]):
    rows, meta = [], []
    for rec in records:
        if rec.n_valid == 0:
            continue
        enc = model.encode(rec).data
        for i, w in enumerate(rec.words):
            if w.valid:
                rows.append(enc[i])
                meta.append({"subject": w.subject_id, "sentence": w.sentence_id, "word": w.word_index,
                             "token": w.token, "label": w.label})
    width = model.config.d_model
    return (np.vstack(rows) if rows else np.zeros((0, width))), meta


def export_embeddings(model: ReadingEmbeddingModel, records: Sequence[SentenceRecord], path) -> tuple[Path, Path]:
    """Write post-encoder, pre-head word vectors to ``path`` (sidecar) and ``path.json`` (labels)."""
    path = Path(path)
    matrix, meta = encoder_outputs(model, records)
    manifest = Path(f"{path}.json")
    try:
        write_sidecar(path, matrix)
        atomic_write(manifest, json.dumps({"rows": len(meta), "dim": int(matrix.shape[1]), "words": meta},
                                          indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write embeddings: {exc.strerror}", str(exc.filename or path)) from None
    return path, manifest
