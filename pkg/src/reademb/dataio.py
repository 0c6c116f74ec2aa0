"""Word samples, sentence padding, JSONL/sidecar interchange, class
balancing, fold construction and synthetic corpora.

On-disk layout for a corpus ``data.jsonl``:

* one JSON object per word (see :func:`sample_to_json`);
* ``data.jsonl.eeg.f64`` holds EEG feature rows referenced as ``{"ref": i}``;
* ``data.jsonl.raw.f64`` holds raw ``[n, C, T]`` EEG epochs referenced from
  ``"eeg_raw": [i, ...]`` (one index per fixation).

Sidecar files start with the 8-byte magic ``REMBF64\\0``, a little-endian
uint32 rank, ``rank`` uint32 dims, then the float64 payload in row-major order.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import N_EYE, aggregate_fixations, ce_feature_vector, ce_length
from .numcore import ContractError

HRW, LRW = "HRW", "LRW"
MAGIC = b"REMBF64\0"
MODALITIES = ("eye", "eeg", "wemb")
EEG_DIM = ce_length(105)
WEMB_DIM = 768


class SchemaError(ContractError):
    """Input file does not follow the documented interchange format."""


class ParseError(SchemaError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass
class WordSample:
    subject_id: str
    sentence_id: int
    word_index: int
    token: str = ""
    label: str | None = None
    valid: bool = True
    eye: np.ndarray = field(default_factory=lambda: np.zeros(N_EYE))
    eeg: np.ndarray | None = None
    word_embedding: np.ndarray | None = None
    eeg_raw: list[np.ndarray] | None = None
    padding: bool = False

    def __post_init__(self):
        if self.padding:
            self.valid = False
        if self.valid and self.label not in (HRW, LRW):
            raise SchemaError(
                f"word {self.sentence_id}/{self.word_index}: label must be HRW or LRW, got {self.label!r}"
            )
        self.eye = np.asarray(self.eye, dtype=np.float64)
        if self.eye.shape != (N_EYE,):
            raise SchemaError(
                f"field 'eye' of word {self.sentence_id}/{self.word_index} needs {N_EYE} values, "
                f"got {self.eye.size}"
            )

    @property
    def y(self) -> float:
        return 1.0 if self.label == HRW else 0.0

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.subject_id, self.sentence_id, self.word_index)

    def features(self, modality: str) -> np.ndarray | None:
        return {"eye": self.eye, "eeg": self.eeg, "wemb": self.word_embedding}[modality]

    def is_unfixated(self) -> bool:
        return not np.any(self.eye) and (self.eeg is None or not np.any(self.eeg))


def _padding(subject: str, sentence: int, index: int, dims: dict[str, int]) -> WordSample:
    return WordSample(
        subject, sentence, index, "", None, False,
        np.zeros(N_EYE),
        np.zeros(dims["eeg"]) if dims.get("eeg") else None,
        np.zeros(dims["wemb"]) if dims.get("wemb") else None,
        padding=True,
    )


@dataclass
class SentenceRecord:
    """One sentence's words, zero-padded to the corpus length ``M``."""

    subject_id: str
    sentence_id: int
    words: list[WordSample]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def length(self) -> int:
        return len(self.words)

    @property
    def mask(self) -> np.ndarray:
        if "mask" not in self._cache:
            self._cache["mask"] = np.array([w.valid for w in self.words], dtype=bool)
        return self._cache["mask"]

    @property
    def labels(self) -> np.ndarray:
        return np.array([w.y for w in self.words])

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def matrix(self, modality: str) -> np.ndarray:
        """Stacked ``[M x D]`` features for one modality."""
        if modality not in self._cache:
            rows = [w.features(modality) for w in self.words]
            if any(r is None for r in rows):
                raise SchemaError(
                    f"sentence {self.subject_id}/{self.sentence_id} lacks modality {modality!r}"
                )
            self._cache[modality] = np.vstack(rows)
        return self._cache[modality]

    def invalidate(self) -> None:
        self._cache.clear()


@dataclass(frozen=True)
class FoldSplit:
    fold_count: int
    assignments: dict  # sample key (or sentence key) -> fold index
    granularity: str = "word"

    def fold_of(self, key) -> int:
        return self.assignments[key]

    def members(self, fold: int) -> list:
        return [k for k, f in self.assignments.items() if f == fold]

    def sizes(self) -> list[int]:
        counts = [0] * self.fold_count
        for f in self.assignments.values():
            counts[f] += 1
        return counts


@dataclass(frozen=True)
class SynthSpec:
    n_sentences: int = 100
    words_per_sentence: int = 10
    delta: float = 2.0
    eye_dim: int = N_EYE
    eeg_dim: int = EEG_DIM
    wemb_dim: int = 0
    seed: int = 0
    subject_id: str = "SYN"

    def __post_init__(self):
        if not self.delta >= 0:
            raise ContractError(f"class separation must be >= 0, got {self.delta}")
        if self.n_sentences < 1 or self.words_per_sentence < 1:
            raise ContractError("sentence and word counts must be positive")
        if self.eye_dim != N_EYE:
            raise ContractError(f"eye modality is fixed at {N_EYE} features")
        if self.eeg_dim < 0 or self.wemb_dim < 0:
            raise ContractError("modality dims must be nonnegative")


# -- sidecar ---------------------------------------------------------------


def write_sidecar(target, array: np.ndarray) -> None:
    """Write ``array`` in the packed float64 format to a path or binary stream."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    if isinstance(target, (str, os.PathLike)):
        _atomic_write(Path(target), header + arr.tobytes())
    else:
        target.write(header)
        target.write(arr.tobytes())


def read_sidecar(source) -> np.ndarray:
    raw = Path(source).read_bytes() if isinstance(source, (str, os.PathLike)) else source.read()
    return decode_sidecar(raw, str(source))


def decode_sidecar(raw: bytes, where: str = "<bytes>") -> np.ndarray:
    if raw[:8] != MAGIC:
        raise SchemaError(f"{where}: bad sidecar magic")
    try:
        (rank,) = struct.unpack_from("<I", raw, 8)
        dims = struct.unpack_from(f"<{rank}I", raw, 12)
    except struct.error:
        raise SchemaError(f"{where}: truncated sidecar header") from None
    offset = 12 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise SchemaError(f"{where}: payload holds {len(raw) - offset} bytes, dims {dims} need {8 * count}")
    return np.frombuffer(raw, dtype="<f8", offset=offset).reshape(dims).astype(np.float64)


_UMASK = os.umask(0)
os.umask(_UMASK)


def _atomic_write(path: Path, payload: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "w" if isinstance(payload, str) else "wb"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({"encoding": "utf-8", "newline": "\n"} if mode == "w" else {})) as fh:
            fh.write(payload)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


atomic_write = _atomic_write


def eeg_sidecar_path(path) -> Path:
    return Path(f"{path}.eeg.f64")


def raw_sidecar_path(path) -> Path:
    return Path(f"{path}.raw.f64")


# -- JSONL -----------------------------------------------------------------


def _floats(values) -> list[float]:
    return [float(v) for v in np.asarray(values, dtype=np.float64).ravel()]


def sample_to_json(w: WordSample, eeg_ref: int | None = None, raw_refs: Sequence[int] | None = None) -> dict:
    obj = {
        "subject": w.subject_id,
        "sentence": int(w.sentence_id),
        "word": int(w.word_index),
        "token": w.token,
        "label": w.label,
        "valid": bool(w.valid),
        "eye": _floats(w.eye),
    }
    if eeg_ref is not None:
        obj["eeg"] = {"ref": int(eeg_ref)}
    else:
        obj["eeg"] = None if w.eeg is None else _floats(w.eeg)
    obj["wemb"] = None if w.word_embedding is None else _floats(w.word_embedding)
    if raw_refs is not None:
        obj["eeg_raw"] = [int(r) for r in raw_refs]
    return obj


def iter_words(records: Iterable[SentenceRecord], include_invalid: bool = True):
    """Real (non-padding) words of every record, padding stripped."""
    for rec in records:
        for w in rec.words:
            if w.padding:
                continue
            if w.valid or include_invalid:
                yield w


def save_samples(path, records: Sequence[SentenceRecord], sidecar: bool = True) -> Path:
    """Write a corpus as JSONL; EEG rows go to a packed sidecar when ``sidecar``.

    Floats are written with the shortest round-trip representation, so
    :func:`load_samples` reproduces every value exactly.
    """
    path = Path(path)
    words = list(iter_words(records))
    eeg_rows = []
    raw_epochs = []
    lines = io.StringIO()
    for w in words:
        ref = None
        if sidecar and w.eeg is not None:
            ref = len(eeg_rows)
            eeg_rows.append(w.eeg)
        raw_refs = None
        if w.eeg_raw is not None:
            raw_refs = list(range(len(raw_epochs), len(raw_epochs) + len(w.eeg_raw)))
            raw_epochs.extend(w.eeg_raw)
        lines.write(json.dumps(sample_to_json(w, ref, raw_refs), separators=(",", ":")))
        lines.write("\n")
    if eeg_rows:
        write_sidecar(eeg_sidecar_path(path), np.vstack(eeg_rows))
    if raw_epochs:
        if len({e.shape for e in raw_epochs}) != 1:
            raise SchemaError("raw EEG epochs must share one C x T shape to be packed")
        write_sidecar(raw_sidecar_path(path), np.stack(raw_epochs))
    _atomic_write(path, lines.getvalue())
    return path


def _parse_vector(obj, key: str, lineno: int, path, expected: int | None = None) -> np.ndarray | None:
    val = obj.get(key)
    if val is None:
        return None
    if not isinstance(val, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val):
        raise ParseError(path, lineno, f"field {key!r} must be a list of numbers")
    arr = np.array(val, dtype=np.float64)
    if expected is not None and arr.size != expected:
        raise SchemaError(f"{path}:{lineno}: field {key!r} needs {expected} values, got {arr.size}")
    return arr


def read_words(path) -> list[WordSample]:
    """Parse every JSONL line into a :class:`WordSample` (no padding)."""
    path = Path(path)
    eeg_side = raw_side = None
    words: list[WordSample] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(path, lineno, "expected a JSON object")
            for req in ("subject", "sentence", "word", "label", "valid", "eye"):
                if req not in obj:
                    raise ParseError(path, lineno, f"missing field {req!r}")
            eye = _parse_vector(obj, "eye", lineno, path, N_EYE)
            eeg_field = obj.get("eeg")
            if isinstance(eeg_field, dict):
                if eeg_side is None:
                    side_path = eeg_sidecar_path(path)
                    if not side_path.exists():
                        raise SchemaError(f"{path}:{lineno}: EEG reference but no sidecar {side_path}")
                    eeg_side = read_sidecar(side_path)
                ref = eeg_field.get("ref")
                if not isinstance(ref, int) or not 0 <= ref < len(eeg_side):
                    raise SchemaError(f"{path}:{lineno}: EEG sidecar reference {ref!r} out of range")
                eeg = eeg_side[ref].copy()
            else:
                eeg = _parse_vector(obj, "eeg", lineno, path)
            raw = None
            if obj.get("eeg_raw") is not None:
                if raw_side is None:
                    side_path = raw_sidecar_path(path)
                    if not side_path.exists():
                        raise SchemaError(f"{path}:{lineno}: raw EEG reference but no sidecar {side_path}")
                    raw_side = read_sidecar(side_path)
                    if raw_side.ndim != 3:
                        raise SchemaError(f"{side_path}: raw EEG sidecar must be rank 3 [n, C, T]")
                refs = obj["eeg_raw"]
                if not isinstance(refs, list) or not all(isinstance(r, int) and 0 <= r < len(raw_side) for r in refs):
                    raise SchemaError(f"{path}:{lineno}: bad raw EEG references {refs!r}")
                raw = [raw_side[r] for r in refs]
            try:
                words.append(
                    WordSample(
                        subject_id=str(obj["subject"]),
                        sentence_id=int(obj["sentence"]),
                        word_index=int(obj["word"]),
                        token=str(obj.get("token", "")),
                        label=obj["label"],
                        valid=bool(obj["valid"]),
                        eye=eye,
                        eeg=eeg,
                        word_embedding=_parse_vector(obj, "wemb", lineno, path),
                        eeg_raw=raw,
                    )
                )
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return words


def build_records(words: Sequence[WordSample]) -> list[SentenceRecord]:
    """Group words by (subject, sentence), order them, and zero-pad to the corpus maximum."""
    dims: dict[str, int] = {}
    for mod in ("eeg", "wemb"):
        sizes = {w.features(mod).size for w in words if w.features(mod) is not None}
        if len(sizes) > 1:
            raise SchemaError(f"inconsistent {mod} feature dimension: {sorted(sizes)}")
        if sizes:
            dims[mod] = sizes.pop()
    for mod in ("eeg", "wemb"):
        present = {w.features(mod) is not None for w in words}
        if len(present) > 1:
            raise SchemaError(f"modality {mod!r} is present for some words but missing for others")
    groups: dict[tuple[str, int], list[WordSample]] = {}
    for w in words:
        groups.setdefault((w.subject_id, w.sentence_id), []).append(w)
    m = max((len(g) for g in groups.values()), default=0)
    records = []
    for (subj, sent) in sorted(groups):
        ws = sorted(groups[(subj, sent)], key=lambda w: w.word_index)
        if len({w.word_index for w in ws}) != len(ws):
            raise SchemaError(f"duplicate word index in sentence {subj}/{sent}")
        last = ws[-1].word_index if ws else -1
        ws = ws + [_padding(subj, sent, last + 1 + k, dims) for k in range(m - len(ws))]
        records.append(SentenceRecord(subj, sent, ws))
    return records


def load_samples(path, format: str = "jsonl") -> list[SentenceRecord]:
    """Read a corpus and pad every sentence to the corpus maximum length."""
    if format != "jsonl":
        raise SchemaError(f"unsupported format {format!r}")
    return build_records(read_words(path))


def dataset_dims(records: Sequence[SentenceRecord]) -> dict[str, int]:
    """Feature width per modality present in the corpus."""
    dims = {}
    for rec in records:
        for mod in MODALITIES:
            v = rec.words[0].features(mod)
            if v is not None:
                dims[mod] = v.size
        break
    return dims


def subjects(records: Sequence[SentenceRecord]) -> list[str]:
    return sorted({r.subject_id for r in records})


def apply_zero_fixation_mask(records: Sequence[SentenceRecord]) -> list[SentenceRecord]:
    """Mark words with all-zero biomarkers invalid (they stay as padding-like rows)."""
    out = []
    for rec in records:
        words = []
        for w in rec.words:
            if w.valid and w.is_unfixated():
                w = WordSample(w.subject_id, w.sentence_id, w.word_index, w.token, w.label, False,
                               w.eye, w.eeg, w.word_embedding, w.eeg_raw)
            words.append(w)
        out.append(SentenceRecord(rec.subject_id, rec.sentence_id, words))
    return out


def extract_ce_features(records: Sequence[SentenceRecord], bins: int) -> list[SentenceRecord]:
    """Replace raw per-fixation EEG epochs by aggregated conditional-entropy vectors."""
    words = list(iter_words(records))
    raw_words = [w for w in words if w.eeg_raw is not None]
    if not raw_words:
        raise SchemaError("no raw EEG epochs present (field 'eeg_raw')")
    channels = {e.shape[0] for w in raw_words for e in w.eeg_raw}
    if len(channels) > 1:
        raise SchemaError(f"raw EEG epochs disagree on channel count: {sorted(channels)}")
    if not channels:
        raise SchemaError("raw EEG references are present but every word has zero fixations")
    length = ce_length(channels.pop())
    out = []
    for w in words:
        if w.eeg_raw is None:
            raise SchemaError(f"word {w.subject_id}/{w.sentence_id}/{w.word_index} lacks raw EEG epochs")
        vecs = [ce_feature_vector(e, bins).values for e in w.eeg_raw]
        eeg = aggregate_fixations(vecs, length)
        out.append(WordSample(w.subject_id, w.sentence_id, w.word_index, w.token, w.label,
                              w.valid, w.eye, eeg, w.word_embedding))
    return build_records(out)


# -- balancing and folds ---------------------------------------------------


def canonical_order(keys: Iterable) -> list:
    return sorted(keys)


def downsample_balance(samples: Sequence[WordSample], seed) -> list[WordSample]:
    """Keep every minority-class sample and a seeded uniform draw of as many
    majority-class samples (the majority is LRW in reading data).

    Invalid samples are dropped.  Output is in canonical key order.
    """
    valid = sorted((w for w in samples if w.valid), key=lambda w: w.key)
    hrw = [w for w in valid if w.label == HRW]
    lrw = [w for w in valid if w.label == LRW]
    if not hrw:
        raise ContractError("downsample_balance needs at least one HRW sample")
    if not lrw:
        raise ContractError("downsample_balance needs at least one LRW sample")
    minority, majority = (hrw, lrw) if len(hrw) <= len(lrw) else (lrw, hrw)
    rng = np.random.default_rng(seed)
    keep = rng.choice(len(majority), size=len(minority), replace=False)
    chosen = [majority[i] for i in sorted(keep)]
    return sorted(minority + chosen, key=lambda w: w.key)


def kfold_split(keys: Iterable, k: int = 5, seed=0, granularity: str = "word") -> FoldSplit:
    """Seeded shuffle of the canonically sorted keys, then contiguous partition.

    The first ``n % k`` folds receive one extra member.
    """
    ordered = canonical_order(set(keys))
    n = len(ordered)
    if k < 2:
        raise ContractError(f"need at least 2 folds, got {k}")
    if n < k:
        raise ContractError(f"{n} samples cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    assignments = {}
    start = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        for i in perm[start:start + size]:
            assignments[ordered[i]] = f
        start += size
    return FoldSplit(k, assignments, granularity)


# -- synthetic corpora -----------------------------------------------------


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def synth_generate(spec: SynthSpec) -> list[SentenceRecord]:
    """Two Gaussian clusters per modality at +-delta/2 along a random unit direction.

    Each sentence holds ``words_per_sentence`` words with HRW/LRW counts
    differing by at most one.
    """
    rng = np.random.default_rng(spec.seed)
    dims = {"eye": spec.eye_dim, "eeg": spec.eeg_dim, "wemb": spec.wemb_dim}
    directions = {m: _unit(rng, d) for m, d in dims.items() if d > 0}
    words = []
    n = spec.words_per_sentence
    for s in range(spec.n_sentences):
        n_hrw = n // 2 + (int(rng.integers(0, 2)) if n % 2 else 0)
        labels = np.array([HRW] * n_hrw + [LRW] * (n - n_hrw))
        labels = labels[rng.permutation(n)]
        for i, label in enumerate(labels):
            sign = 1.0 if label == HRW else -1.0
            feats = {}
            for m, d in dims.items():
                if d == 0:
                    feats[m] = None
                    continue
                feats[m] = sign * spec.delta / 2.0 * directions[m] + rng.standard_normal(d)
            words.append(
                WordSample(spec.subject_id, s, i, f"w{s}_{i}", str(label), True,
                           feats["eye"], feats["eeg"], feats["wemb"])
            )
    return build_records(words)
