"""``reademb`` command line.

Exit codes: 0 success, 2 usage error, 3 schema or contract violation,
4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import yaml

from . import dataio, harness
from .dataio import SynthSpec
from .features import DEFAULT_BINS, normalize_eye_matrix
from .harness import TrainConfig
from .model import LossWeights, ReadingEmbeddingModel
from .numcore import ContractError, NumericError

EXIT_USAGE, EXIT_SCHEMA, EXIT_NUMERIC = 2, 3, 4


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def guarded(fn):
    """Map library exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericError as exc:
            _fail(EXIT_NUMERIC, str(exc))
        except ContractError as exc:
            _fail(EXIT_SCHEMA, str(exc))
        except OSError as exc:
            _fail(EXIT_SCHEMA, f"{exc.filename or ''}: {exc.strerror or exc}")

    return wrapper


def _parse_modalities(ctx, param, value):
    if value is None:
        return None
    mods = tuple(m.strip() for m in value.split(",") if m.strip())
    bad = [m for m in mods if m not in dataio.MODALITIES]
    if bad or not mods:
        raise click.BadParameter(f"choose from {', '.join(dataio.MODALITIES)}; got {value!r}")
    return mods


def _positive(ctx, param, value):
    if value is not None and not value > 0:
        raise click.BadParameter("must be positive")
    return value


def _nonnegative(ctx, param, value):
    if value is not None and not value >= 0:
        raise click.BadParameter("must be nonnegative")
    return value


def common_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="JSON or YAML file of TrainConfig values."),
        click.option("--seed", type=int, default=None),
        click.option("--jobs", type=click.IntRange(min=1), default=None, help="Worker processes for fold jobs."),
        click.option("--modalities", callback=_parse_modalities, default=None,
                     help="Comma list of eye, eeg, wemb."),
        click.option("--folds", type=click.IntRange(min=2), default=None),
        click.option("--epochs", type=click.IntRange(min=1), default=None),
        click.option("--lr", type=float, callback=_positive, default=None),
        click.option("--lambda1", type=float, callback=_nonnegative, default=None, help="BCE weight."),
        click.option("--lambda2", type=float, callback=_nonnegative, default=None, help="MSE weight."),
        click.option("--lambda3", type=float, callback=_nonnegative, default=None, help="Soft-F1 weight."),
        click.option("--standard-f1", is_flag=True, default=None, help="Double the soft-F1 numerator."),
        click.option("--mask-zero-fixation", is_flag=True, default=None,
                     help="Exclude words without fixations from loss and metrics."),
        click.option("--literal-n", is_flag=True, default=None,
                     help="Normalize BCE/MSE by all positions, padding included."),
        click.option("--fold-granularity", type=click.Choice(["word", "sentence"]), default=None),
        click.option("-v", "--verbose", count=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _read_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"cannot parse config {path}: {exc}")
    if not isinstance(data, dict):
        raise click.UsageError(f"config {path} must hold a mapping")
    return data


def build_config(opts: dict) -> tuple[TrainConfig, int]:
    """Defaults, overridden by the config file, overridden by flags."""
    values = _read_config(opts.get("config_path"))
    jobs = int(values.pop("jobs", 1))
    values.pop("bins", None)
    weights = dict(LossWeights().__dict__)
    if isinstance(values.get("loss_weights"), dict):
        weights.update(values.pop("loss_weights"))
    for key, flag in (("bce", "lambda1"), ("mse", "lambda2"), ("f1", "lambda3")):
        if opts.get(flag) is not None:
            weights[key] = opts[flag]
    for key in ("seed", "modalities", "folds", "epochs", "lr", "standard_f1", "mask_zero_fixation",
                "literal_n", "fold_granularity"):
        if opts.get(key) is not None:
            values[key] = opts[key]
    if opts.get("jobs") is not None:
        jobs = opts["jobs"]
    known = set(TrainConfig.__dataclass_fields__)
    unknown = sorted(set(values) - known)
    if unknown:
        raise click.UsageError(f"unknown config keys: {', '.join(unknown)}")
    try:
        cfg = TrainConfig(**values, loss_weights=LossWeights(**weights))
    except (ContractError, TypeError) as exc:
        raise click.UsageError(str(exc))
    return cfg, jobs


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING if not verbose else (logging.INFO if verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load(dataset) -> list:
    records = dataio.load_samples(dataset)
    if not records:
        raise ContractError(f"{dataset}: dataset is empty")
    return records


@click.group()
@click.version_option(package_name="artifact")
def cli():
    """Reading-embedding experiments on word-level EEG and eye-gaze features."""


@cli.command()
@click.option("--sentences", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--words", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--delta", type=float, callback=_nonnegative, default=2.0, show_default=True,
              help="Class separation in noise standard deviations.")
@click.option("--eeg-dim", type=click.IntRange(min=0), default=dataio.EEG_DIM, show_default=True)
@click.option("--wemb-dim", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--subject", default="SYN", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out", type=click.Path(dir_okay=False), default="synth.jsonl", show_default=True)
@guarded
def synth(sentences, words, delta, eeg_dim, wemb_dim, subject, seed, out):
    """Generate a two-cluster synthetic corpus."""
    spec = SynthSpec(sentences, words, delta, eeg_dim=eeg_dim, wemb_dim=wemb_dim, seed=seed, subject_id=subject)
    records = dataio.synth_generate(spec)
    dataio.save_samples(out, records)
    labels = [w.label for w in dataio.iter_words(records)]
    click.echo(f"wrote {out}: {spec.n_sentences} sentences, {len(labels)} words "
               f"({labels.count(dataio.HRW)} HRW, {labels.count(dataio.LRW)} LRW)")


@cli.command()
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True)
@click.option("--bins", type=click.IntRange(min=2), default=DEFAULT_BINS, show_default=True)
@click.option("--normalize-eye/--no-normalize-eye", default=False, show_default=True,
              help="L1-normalize each eye-gaze feature within each sentence.")
@guarded
def extract(dataset, out, bins, normalize_eye):
    """Turn raw per-fixation EEG epochs into conditional-entropy features."""
    records = dataio.load_samples(dataset)
    words = list(dataio.iter_words(records))
    channels = {e.shape[0] for w in words if w.eeg_raw for e in w.eeg_raw}
    extracted = dataio.extract_ce_features(records, bins)
    if normalize_eye:
        for rec in extracted:
            real = [i for i, w in enumerate(rec.words) if not w.padding]
            eye = normalize_eye_matrix(rec.matrix("eye")[real])
            for row, i in zip(eye, real):
                rec.words[i].eye = row
            rec.invalidate()
    dataio.save_samples(out, extracted)
    dim = dataio.dataset_dims(extracted).get("eeg", 0)
    header = {"source": str(dataset), "channels": sorted(channels)[0] if channels else None, "bins": bins,
              "eeg_dim": dim, "normalize_eye": normalize_eye}
    dataio.atomic_write(Path(f"{out}.meta.json"), json.dumps(header, indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {out}: {len(words)} words, {dim} EEG features per word (bins={bins})")


@cli.command()
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out", type=click.Path(file_okay=False), default="cv_out", show_default=True)
@click.option("--save-checkpoints/--no-save-checkpoints", default=True, show_default=True)
@common_options
@guarded
def cv(dataset, out, save_checkpoints, verbose, **opts):
    """Per-subject k-fold cross-validation."""
    _setup_logging(verbose)
    cfg, jobs = build_config(opts)
    records = _load(dataset)
    report = harness.cross_validate(records, cfg, jobs=jobs, keep_models=save_checkpoints)
    out = Path(out)
    dataio.atomic_write(out / "metrics.json", report.to_json())
    dataio.atomic_write(out / "roc.csv", report.roc_csv())
    if save_checkpoints:
        for (subject, fold), model in sorted(report.models.items()):
            model.save(out / "checkpoints" / f"{subject}_fold{fold}.json",
                       {"loss_weights": cfg.loss_weights.__dict__, "train_config": cfg.to_dict()})
    for s in report.subjects:
        accs = " ".join(f"{f.accuracy:.3f}" for f in s.folds)
        click.echo(f"{s.subject}: mean accuracy {s.mean_accuracy:.4f} (folds {accs}), mean AUC {s.mean_auc:.4f}")
    click.echo(f"overall: mean accuracy {report.mean_accuracy:.4f}, mean AUC {report.mean_auc:.4f}, "
               f"{report.n_models} models")


@cli.command()
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True, help="Checkpoint path.")
@common_options
@guarded
def train(dataset, out, verbose, **opts):
    """Train one model on the whole (balanced) dataset."""
    _setup_logging(verbose)
    cfg, _ = build_config(opts)
    records = _load(dataset)
    result = harness.train_full(records, cfg)
    result.model.save(out, {"loss_weights": cfg.loss_weights.__dict__, "train_config": cfg.to_dict(),
                            "loss_trace": result.losses})
    click.echo(f"wrote {out}: {result.epochs_run} epochs, final loss {result.losses[-1]:.6f}")


@cli.command(name="eval")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out", type=click.Path(dir_okay=False), default=None, help="Metrics JSON path.")
@click.option("--seed", type=int, default=0, show_default=True, help="Balancing seed.")
@click.option("--no-balance", is_flag=True, default=False)
@guarded
def eval_cmd(dataset, checkpoint, out, seed, no_balance):
    """Evaluate a checkpoint on a dataset."""
    model, _ = ReadingEmbeddingModel.load(checkpoint)
    records = _load(dataset)
    metrics = harness.evaluate_dataset(model, records, seed=seed, balance=not no_balance)
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if out:
        dataio.atomic_write(Path(out), text)
    click.echo(f"accuracy {metrics['accuracy']:.4f}, AUC {metrics['auc']:.4f}, n={metrics['n']}")


@cli.command()
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True,
              help="Embedding sidecar path; labels go to OUT.json.")
@guarded
def export(dataset, checkpoint, out):
    """Dump encoder outputs of every valid word for external visualization."""
    model, _ = ReadingEmbeddingModel.load(checkpoint)
    records = _load(dataset)
    side, manifest = harness.export_embeddings(model, records, out)
    rows = json.loads(Path(manifest).read_text())["rows"]
    click.echo(f"wrote {side} and {manifest}: {rows} rows")


def main():
    cli(prog_name="reademb")


if __name__ == "__main__":
    main()
