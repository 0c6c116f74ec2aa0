"""Word-level biomarker features: eye-gaze normalization, EEG conditional
entropy connectivity, and multi-fixation aggregation.

Entropies are in bits, estimated from equal-width histograms whose edges
span each series' own ``[min, max]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import ContractError

EYE_FEATURES = (
    "n_fixations",
    "mean_pupil_size",
    "ffd",
    "trt",
    "gd",
    "gpt",
    "sfd",
    "pupil_ffd",
    "pupil_trt",
    "pupil_gd",
    "pupil_gpt",
    "pupil_sfd",
)
N_EYE = len(EYE_FEATURES)
DEFAULT_BINS = 16


@dataclass(frozen=True)
class EyeGazeFeatures:
    """The twelve word-level gaze measures, durations in ms."""

    n_fixations: float = 0.0
    mean_pupil_size: float = 0.0
    ffd: float = 0.0
    trt: float = 0.0
    gd: float = 0.0
    gpt: float = 0.0
    sfd: float = 0.0
    pupil_ffd: float = 0.0
    pupil_trt: float = 0.0
    pupil_gd: float = 0.0
    pupil_gpt: float = 0.0
    pupil_sfd: float = 0.0

    def __post_init__(self):
        bad = [n for n in EYE_FEATURES if not getattr(self, n) >= 0]
        if bad:
            raise ContractError(f"eye-gaze features must be nonnegative: {bad}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in EYE_FEATURES], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "EyeGazeFeatures":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (N_EYE,):
            raise ContractError(f"expected {N_EYE} eye-gaze features, got shape {values.shape}")
        return cls(*values.tolist())


@dataclass(frozen=True)
class EEGEpoch:
    """Channels-by-samples EEG segment for one fixation."""

    channels: np.ndarray

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 2:
            raise ContractError(f"EEG epoch must be a C x T matrix, got shape {ch.shape}")
        if ch.shape[0] < 2 or ch.shape[1] < 2:
            raise ContractError(f"EEG epoch needs C >= 2 and T >= 2, got {ch.shape}")
        object.__setattr__(self, "channels", ch)

    @property
    def channel_count(self) -> int:
        return self.channels.shape[0]

    @property
    def sample_count(self) -> int:
        return self.channels.shape[1]


@dataclass(frozen=True)
class CEFeatureVector:
    values: np.ndarray
    source_channels: int
    bins: int = DEFAULT_BINS

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class WordBiomarkers:
    eye: np.ndarray = field(default_factory=lambda: np.zeros(N_EYE))
    eeg: np.ndarray | None = None
    fixation_count: int = 0

    def __post_init__(self):
        if self.fixation_count == 0:
            if np.any(self.eye) or (self.eeg is not None and np.any(self.eeg)):
                raise ContractError("a word without fixations must carry zero feature vectors")


def ce_length(channels: int) -> int:
    """Number of upper-triangular channel pairs, C(C-1)/2."""
    return channels * (channels - 1) // 2


def _bin_index(x: np.ndarray, bins: int) -> np.ndarray:
    lo = x.min(axis=-1, keepdims=True)
    span = x.max(axis=-1, keepdims=True) - lo
    # constant series collapse into bin 0
    safe = np.where(span > 0, span, 1.0)
    idx = np.floor((x - lo) / safe * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _entropy_from_counts(counts: np.ndarray, n: int) -> np.ndarray:
    p = counts / n
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def _conditional_from_counts(joint: np.ndarray, cond: np.ndarray, n: int) -> np.ndarray:
    """-sum p(x,y) log2(p(x,y)/p(y)) over the last two axes (x-bin, y-bin)."""
    safe = np.where(joint > 0, joint, 1.0)
    ratio = safe / np.where(cond > 0, cond, 1.0)[..., None, :]
    terms = np.where(joint > 0, -(joint / n) * np.log2(ratio), 0.0)
    return np.maximum(terms.sum(axis=(-2, -1)), 0.0)


def entropy(x, bins: int = DEFAULT_BINS) -> float:
    """Empirical histogram entropy of one series, in bits."""
    x = np.asarray(x, dtype=np.float64)
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    counts = np.bincount(_bin_index(x, bins), minlength=bins)
    return float(_entropy_from_counts(counts, len(x)))


def conditional_entropy(x, y, bins: int = DEFAULT_BINS) -> float:
    """H(X|Y) = H(X,Y) - H(Y) in bits, from the joint histogram."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ContractError(f"series must be 1-D and equal length, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ContractError("series need at least 2 samples")
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    bx, by = _bin_index(x, bins), _bin_index(y, bins)
    joint = np.bincount(bx * bins + by, minlength=bins * bins).reshape(bins, bins)
    return float(_conditional_from_counts(joint, np.bincount(by, minlength=bins), len(x)))


def ce_feature_vector(epoch, bins: int = DEFAULT_BINS) -> CEFeatureVector:
    """H(channel_i | channel_j) for every i < j, flattened row-major."""
    if not isinstance(epoch, EEGEpoch):
        epoch = EEGEpoch(np.asarray(epoch))
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    ch = epoch.channels
    c, n = ch.shape
    idx = _bin_index(ch, bins)
    marginal = np.stack([np.bincount(row, minlength=bins) for row in idx])
    out = np.empty(ce_length(c))
    pos = 0
    for i in range(c - 1):
        rest = idx[i + 1:]
        k = rest.shape[0]
        # joint codes for row i against every later row, offset per pair
        codes = idx[i] * bins + rest + (np.arange(k) * bins * bins)[:, None]
        joint = np.bincount(codes.ravel(), minlength=k * bins * bins).reshape(k, bins, bins)
        out[pos:pos + k] = _conditional_from_counts(joint, marginal[i + 1:], n)
        pos += k
    return CEFeatureVector(out, c, bins)


def l1_normalize_per_sentence(column) -> np.ndarray:
    """Scale a nonnegative per-sentence feature column to unit sum.

    An all-zero column (no word fixated) comes back unchanged.
    """
    col = np.asarray(column, dtype=np.float64)
    if np.any(col < 0):
        raise ContractError("L1 normalization needs nonnegative entries")
    total = col.sum()
    return col / total if total > 0 else col.copy()


def normalize_eye_matrix(eye: np.ndarray) -> np.ndarray:
    """Apply :func:`l1_normalize_per_sentence` to each of the feature columns."""
    eye = np.asarray(eye, dtype=np.float64)
    return np.column_stack([l1_normalize_per_sentence(eye[:, k]) for k in range(eye.shape[1])])


def aggregate_fixations(vectors, length: int | None = None) -> np.ndarray:
    """Unit-L2 scale each fixation's vector and sum them.

    With no fixations the result is a zero vector of ``length``.
    """
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vectors:
        if length is None:
            raise ContractError("aggregate_fixations needs a length when no vectors are given")
        return np.zeros(length)
    dims = {v.shape for v in vectors}
    if len(dims) != 1 or (length is not None and dims != {(length,)}):
        raise ContractError(f"fixation vectors differ in length: {sorted(dims)}")
    out = np.zeros_like(vectors[0])
    for v in vectors:
        norm = np.linalg.norm(v)
        if norm > 0:
            out += v / norm
    return out
