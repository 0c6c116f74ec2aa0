"""Reading-embedding classifier.

Each enabled modality is projected linearly into a shared ``d_model`` space,
projections are summed, sinusoidal positions are added, and one multi-head
self-attention encoder block feeds a per-word MLP that emits the HRW
probability.  Training minimises a weighted sum of masked BCE, masked MSE and
masked soft-F1.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .dataio import SchemaError, SentenceRecord, atomic_write, decode_sidecar, write_sidecar
from .features import N_EYE
from .numcore import ContractError, DimensionError, Tensor

P_MIN, P_MAX = 1e-7, 1.0 - 1e-7
F1_EPS = 1e-8
MASK_LOGIT = -1e9
DEFAULT_DIMS = {"eye": N_EYE, "eeg": 5460, "wemb": 768}


class ChecksumError(SchemaError):
    """Checkpoint parameters do not match the recorded digest."""


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    ffn_dim: int = 256
    mlp_hidden: tuple[int, ...] = (64,)
    use_layer_norm: bool = True
    use_residual: bool = True
    modalities: tuple[str, ...] = ("eeg", "eye")
    input_dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        self.modalities = tuple(self.modalities)
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ContractError("d_model must be even for sinusoidal positions")
        if not self.modalities:
            raise ContractError("at least one modality must be enabled")
        for m in self.modalities:
            if m not in DEFAULT_DIMS:
                raise ContractError(f"unknown modality {m!r}")
            if int(self.input_dims.get(m, 0)) < 1:
                raise ContractError(f"modality {m!r} has no input dimension")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        d["modalities"] = list(self.modalities)
        d["input_dims"] = {m: int(self.input_dims[m]) for m in self.modalities}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    bce: float = 1.0
    mse: float = 1.0
    f1: float = 1.0

    def __post_init__(self):
        ws = (self.bce, self.mse, self.f1)
        if any(not w >= 0 for w in ws):
            raise ContractError(f"loss weights must be nonnegative, got {ws}")
        if not any(w > 0 for w in ws):
            raise ContractError("at least one loss weight must be positive")


@dataclass
class BatchPrediction:
    p: np.ndarray
    mask: np.ndarray
    y: np.ndarray
    prob: Tensor | None = None


# -- building blocks ---------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def project_modality(x, weight, bias) -> Tensor:
    """Affine map of every word row into the shared space."""
    x = nc.tensor(x)
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"modality features have width {x.shape[1]}, projection expects {weight.shape[0]}")
    return nc.linear(x, weight, bias)


def fuse(a, b) -> Tensor:
    a, b = nc.tensor(a), nc.tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"fuse: shapes differ {a.shape} vs {b.shape}")
    return nc.add(a, b)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ContractError(f"positional encoding needs an even width, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe


# -- losses ----------------------------------------------------------------


def _loss_inputs(y, p, mask):
    as_float = not isinstance(p, Tensor)
    p = nc.tensor(p)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    m = np.asarray(mask, dtype=np.float64).reshape(p.shape)
    return y, p, m, as_float


def _normalizer(m: np.ndarray, literal_n: bool) -> float:
    z = float(m.size) if literal_n else float(m.sum())
    if z == 0 or m.sum() == 0:
        raise ContractError("loss needs at least one unmasked sample")
    return z


def _out(t: Tensor, as_float: bool):
    return t.item() if as_float else t


def loss_bce(y, p, mask, literal_n: bool = False):
    """Masked binary cross-entropy, averaged over unmasked samples
    (or over all ``N`` with ``literal_n``)."""
    y, p, m, as_float = _loss_inputs(y, p, mask)
    z = _normalizer(m, literal_n)
    pc = nc.clip(p, P_MIN, P_MAX)
    ll = nc.add(nc.mul(y, nc.log(pc)), nc.mul(1.0 - y, nc.log(nc.sub(1.0, pc))))
    return _out(nc.scale(nc.sum_all(nc.mul(m, ll)), -1.0 / z), as_float)


def loss_mse(y, p, mask, literal_n: bool = False):
    y, p, m, as_float = _loss_inputs(y, p, mask)
    z = _normalizer(m, literal_n)
    d = nc.sub(y, p)
    return _out(nc.scale(nc.sum_all(nc.mul(m, nc.mul(d, d))), 1.0 / z), as_float)


def loss_softf1(y, p, mask, standard_f1: bool = False):
    """``1 - sum(m*y*p) / max(sum(m*y) + sum(m*p), eps)``.

    ``standard_f1`` doubles the numerator, giving the usual Dice/F1 surrogate.
    The eps floor only engages when the denominator is (nearly) empty.
    """
    y, p, m, as_float = _loss_inputs(y, p, mask)
    tp = nc.sum_all(nc.mul(m * y, p))
    denom = nc.add(nc.sum_all(nc.mul(m, p)), float((m * y).sum()))
    denom = nc.add(denom, max(F1_EPS - float(denom.data), 0.0))
    ratio = nc.div(tp, denom)
    if standard_f1:
        ratio = nc.scale(ratio, 2.0)
    return _out(nc.sub(1.0, ratio), as_float)


def total_loss(y, p, mask, weights: LossWeights = LossWeights(), literal_n: bool = False,
               standard_f1: bool = False):
    as_float = not isinstance(p, Tensor)
    p = nc.tensor(p)
    terms = []
    if weights.bce > 0:
        terms.append(nc.scale(loss_bce(y, p, mask, literal_n), weights.bce))
    if weights.mse > 0:
        terms.append(nc.scale(loss_mse(y, p, mask, literal_n), weights.mse))
    if weights.f1 > 0:
        terms.append(nc.scale(loss_softf1(y, p, mask, standard_f1), weights.f1))
    out = terms[0]
    for t in terms[1:]:
        out = nc.add(out, t)
    return _out(out, as_float)


# -- network ---------------------------------------------------------------


class ReadingEmbeddingModel:
    """Single-block transformer encoder over one sentence at a time."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.last_attention: list[np.ndarray] = []
        rng = np.random.default_rng(config.seed)
        d = config.d_model

        def linear(name, fan_in, fan_out):
            self.params[f"{name}.W"] = nc.parameter(xavier_uniform(rng, fan_in, fan_out), f"{name}.W")
            self.params[f"{name}.b"] = nc.parameter(np.zeros(fan_out), f"{name}.b")

        def norm(name):
            self.params[f"{name}.gain"] = nc.parameter(np.ones(d), f"{name}.gain")
            self.params[f"{name}.bias"] = nc.parameter(np.zeros(d), f"{name}.bias")

        for m in config.modalities:
            linear(f"proj.{m}", int(config.input_dims[m]), d)
        for name in ("attn.q", "attn.k", "attn.v", "attn.o"):
            linear(name, d, d)
        norm("ln1")
        linear("ffn.1", d, config.ffn_dim)
        linear("ffn.2", config.ffn_dim, d)
        norm("ln2")
        widths = (d,) + config.mlp_hidden + (1,)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            linear(f"head.{i}", a, b)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _linear(self, x, name) -> Tensor:
        return nc.linear(x, self.params[f"{name}.W"], self.params[f"{name}.b"])

    def embed(self, record: SentenceRecord) -> Tensor:
        """Fused projections plus positional encoding, ``[M x d_model]``."""
        fused = None
        for m in self.config.modalities:
            proj = project_modality(record.matrix(m), self.params[f"proj.{m}.W"], self.params[f"proj.{m}.b"])
            fused = proj if fused is None else fuse(fused, proj)
        return nc.add(fused, positional_encoding(record.length, self.config.d_model))

    def attention(self, x: Tensor, mask) -> Tensor:
        mask = np.asarray(mask, dtype=bool)
        q = self._linear(x, "attn.q")
        k = self._linear(x, "attn.k")
        v = self._linear(x, "attn.v")
        heads, weights = nc.attention(q, k, v, self.config.n_heads, np.where(mask, 0.0, MASK_LOGIT))
        self.last_attention = list(weights)
        return self._linear(heads, "attn.o")

    def encoder_block(self, x: Tensor, mask) -> Tensor:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (x.shape[0],):
            raise DimensionError(f"mask of shape {mask.shape} for a sentence of length {x.shape[0]}")
        if not mask.any():
            raise ContractError("encoder_block: every position is masked")
        cfg, p = self.config, self.params
        h = self.attention(x, mask)
        if cfg.use_residual:
            h = nc.add(x, h)
        if cfg.use_layer_norm:
            h = nc.layer_norm(h, p["ln1.gain"], p["ln1.bias"], cfg.ln_eps)
        f = self._linear(nc.relu(self._linear(h, "ffn.1")), "ffn.2")
        if cfg.use_residual:
            f = nc.add(h, f)
        if cfg.use_layer_norm:
            f = nc.layer_norm(f, p["ln2.gain"], p["ln2.bias"], cfg.ln_eps)
        return f

    def mlp_head(self, x: Tensor) -> Tensor:
        """Per-word HRW probability ``[M x 1]``, clamped to ``[1e-7, 1 - 1e-7]``."""
        n_layers = len(self.config.mlp_hidden) + 1
        for i in range(n_layers):
            x = self._linear(x, f"head.{i}")
            if i < n_layers - 1:
                x = nc.relu(x)
        return nc.clip(nc.sigmoid(x), P_MIN, P_MAX)

    def encode(self, record: SentenceRecord) -> Tensor:
        if record.n_valid == 0:
            raise ContractError(f"sentence {record.subject_id}/{record.sentence_id} has no valid words")
        return self.encoder_block(self.embed(record), record.mask)

    def forward_sentence(self, record: SentenceRecord) -> BatchPrediction:
        prob = self.mlp_head(self.encode(record))
        return BatchPrediction(prob.data.ravel().copy(), record.mask.copy(), record.labels, prob)

    def loss(self, record: SentenceRecord, loss_mask=None, weights: LossWeights = LossWeights(),
             literal_n: bool = False, standard_f1: bool = False) -> Tensor:
        pred = self.forward_sentence(record)
        mask = record.mask if loss_mask is None else np.asarray(loss_mask, dtype=bool) & record.mask
        return total_loss(pred.y, nc.reshape(pred.prob, (record.length,)), mask, weights, literal_n, standard_f1)

    # -- persistence ---------------------------------------------------------

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def save(self, path, extra: dict | None = None) -> Path:
        """Write ``path`` (JSON header) and ``path.params.f64`` (flat parameters)."""
        path = Path(path)
        side = Path(f"{path}.params.f64")
        write_sidecar(side, self.flat_parameters())
        digest = hashlib.sha256(side.read_bytes()).hexdigest()
        header = {
            "format": "reademb-checkpoint/1",
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "params": [{"name": n, "shape": list(t.shape)} for n, t in self.params.items()],
            "sidecar": side.name,
            "sha256": digest,
        }
        header.update(extra or {})
        atomic_write(path, json.dumps(header, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> tuple["ReadingEmbeddingModel", dict]:
        path = Path(path)
        try:
            header = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"{path}: unreadable checkpoint ({exc})") from None
        if not isinstance(header, dict) or header.get("format") != "reademb-checkpoint/1":
            raise SchemaError(f"{path}: not a checkpoint header")
        side = path.parent / header["sidecar"]
        try:
            raw = side.read_bytes()
        except OSError as exc:
            raise SchemaError(f"{side}: {exc.strerror}") from None
        if hashlib.sha256(raw).hexdigest() != header["sha256"]:
            raise ChecksumError(f"{side}: parameter checksum mismatch")
        flat = decode_sidecar(raw, str(side))
        model = cls(ModelConfig.from_dict(header["config"]))
        offset = 0
        for spec in header["params"]:
            t = model.params.get(spec["name"])
            if t is None or list(t.shape) != spec["shape"]:
                raise SchemaError(f"{path}: parameter {spec['name']} does not fit the configured model")
            n = t.data.size
            t.data[...] = flat[offset:offset + n].reshape(t.shape)
            offset += n
        if offset != flat.size:
            raise SchemaError(f"{path}: {flat.size - offset} unused parameter values")
        return model, header
