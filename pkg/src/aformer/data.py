"""Synthetic accented-sequence corpora, feature normalization, and the
character tokenizer.

The synthetic task stands in for real accented speech: every character has a
fixed prototype feature vector; an utterance emits a few noisy copies of each
token's prototype. An "accent" is a deterministic transform of that feature
space (orthogonal rotation + bias + per-token prototype perturbation +
duration stretch), so a model trained on clean data degrades on accented
data in a controllable way.

Corpus files are a binary container (magic ``AFC1``) with a JSON sidecar
manifest; generation is a pure function of (seed, params).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_CHARS = "abcdefghijklmnopqrstuvwxyz "
CORPUS_MAGIC = b"AFC1"
CORPUS_VERSION = 1
MIN_UTTERANCE_FRAMES = 8  # keeps every utterance above the subsampling minimum


class DataError(ValueError):
    """Invalid data contents (bad tokens, empty targets, bad specs)."""


class DataFormatError(ValueError):
    """Corpus file violates the on-disk format."""


class Tokenizer:
    """Character tokenizer over a fixed alphabet.

    Id layout: 0 = blank (CTC), 1 = start/end symbol, 2.. = characters in
    sorted order. The enumeration is stable across runs.
    """

    BLANK = 0
    SOS_EOS = 1

    def __init__(self, chars: str = DEFAULT_CHARS):
        self.chars = sorted(set(chars))
        if not self.chars:
            raise DataError("tokenizer needs a nonempty character set")
        self._to_id = {c: i + 2 for i, c in enumerate(self.chars)}

    @property
    def vocab_size(self) -> int:
        return 2 + len(self.chars)

    @property
    def n_symbols(self) -> int:
        return len(self.chars)

    def tokenize(self, text: str) -> list[int]:
        if not text:
            raise DataError("cannot tokenize an empty target")
        ids = []
        for ch in text:
            if ch not in self._to_id:
                raise DataError(f"character {ch!r} not in vocabulary")
            ids.append(self._to_id[ch])
        return ids

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            k = int(i) - 2
            if k < 0 or k >= len(self.chars):
                raise DataError(f"token id {i} is not a character id")
            out.append(self.chars[k])
        return "".join(out)


@dataclass
class UtteranceRecord:
    id: str
    features: np.ndarray  # (frames, feat_dim) float32
    tokens: str
    corpus_tag: str = ""
    accent: str = ""  # empty = non-accented

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"utterance {self.id}: features must be (frames>=1, dim), got {self.features.shape}")
        if not self.tokens:
            raise DataError(f"utterance {self.id}: empty token string")


@dataclass
class AccentSpec:
    """Deterministic feature-space transform standing in for one accent."""

    accent_id: str
    rotation: np.ndarray       # (feat_dim, feat_dim), orthogonal
    bias: np.ndarray           # (feat_dim,)
    perturbation: np.ndarray   # (n_symbols, feat_dim) per-token prototype shift
    stretch: float = 1.0
    noise_level: float | None = None  # None: inherit the corpus noise level

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.perturbation = np.asarray(self.perturbation, dtype=np.float64)
        d = self.rotation.shape[0]
        err = np.abs(self.rotation.T @ self.rotation - np.eye(d)).max()
        if err > 1e-4:
            raise DataError(f"accent {self.accent_id}: rotation not orthogonal (max deviation {err:.2e})")
        if self.stretch <= 0:
            raise DataError(f"accent {self.accent_id}: stretch must be positive, got {self.stretch}")

    @classmethod
    def identity(cls, accent_id: str, feat_dim: int, n_symbols: int) -> "AccentSpec":
        return cls(accent_id, np.eye(feat_dim), np.zeros(feat_dim), np.zeros((n_symbols, feat_dim)))

    @classmethod
    def sample(cls, accent_id: str, seed: int, feat_dim: int, n_symbols: int,
               strength: float = 0.5, stretch: float = 1.0) -> "AccentSpec":
        """Draw one accent from a family: rotation near identity for small
        strength (QR of I + strength*G with sign-fixed diagonal), plus
        proportional bias and prototype perturbations."""
        rng = np.random.default_rng(seed)
        g = rng.normal(0.0, 1.0, size=(feat_dim, feat_dim))
        q, r = np.linalg.qr(np.eye(feat_dim) + strength * g)
        q = q * np.sign(np.diag(r))
        bias = strength * 0.5 * rng.normal(0.0, 1.0, size=feat_dim)
        perturbation = strength * 0.5 * rng.normal(0.0, 1.0, size=(n_symbols, feat_dim))
        return cls(accent_id, q, bias, perturbation, stretch=stretch)


@dataclass
class CorpusManifest:
    tag: str
    utterance_count: int
    total_frames: int
    accent_id: str  # empty = non-accented
    seed: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "tag": self.tag,
            "utterance_count": self.utterance_count,
            "total_frames": self.total_frames,
            "accent_id": self.accent_id,
            "seed": self.seed,
            "extra": self.extra,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        d = json.loads(text)
        return cls(d["tag"], d["utterance_count"], d["total_frames"],
                   d["accent_id"], d["seed"], d.get("extra", {}))


def prototype_table(proto_seed: int, n_symbols: int, feat_dim: int) -> np.ndarray:
    """Per-symbol prototype feature vectors; shared across corpora of a task."""
    rng = np.random.default_rng(proto_seed)
    return rng.normal(0.0, 1.0, size=(n_symbols, feat_dim))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _subsampled_length(n_frames: int) -> int:
    # mirrors the two stride-2 convs of the model frontend
    return ((n_frames - 3) // 2 + 1 - 3) // 2 + 1


def synthesize_utterance(rng: np.random.Generator, utt_id: str, tag: str,
                         tokenizer: Tokenizer, prototypes: np.ndarray,
                         noise_level: float, accent: AccentSpec | None,
                         min_tokens: int = 3, max_tokens: int = 12,
                         min_frames: int = 2, max_frames: int = 6) -> UtteranceRecord:
    n_symbols, feat_dim = prototypes.shape
    n_tok = int(rng.integers(min_tokens, max_tokens + 1))
    token_ids = rng.integers(0, n_symbols, size=n_tok)

    # Every utterance must survive 4x subsampling with enough frames left to
    # emit its labels (plus a separator frame per adjacent repeat), or the
    # alignment loss has no valid path; two spare frames keep the tightest
    # alignments out of the loss's pathological corner. Redraw the per-token
    # frame counts until feasible; after that, deterministically lengthen
    # tokens in turn (only reachable for extreme stretch settings).
    repeats = int(np.sum(token_ids[1:] == token_ids[:-1]))
    stretch = accent.stretch if accent is not None else 1.0

    def feasible(counts_out) -> bool:
        total = int(counts_out.sum())
        return (total >= MIN_UTTERANCE_FRAMES
                and _subsampled_length(total) >= n_tok + repeats + 2)

    def stretched(counts):
        return np.array([_round_half_up(stretch * int(n)) for n in counts], dtype=np.int64)

    for _ in range(100):
        frames_in = rng.integers(min_frames, max_frames + 1, size=n_tok).astype(np.int64)
        frames_out = stretched(frames_in)
        if feasible(frames_out):
            break
    bump = 0
    while not feasible(frames_out):
        frames_in[bump % n_tok] += 1
        frames_out[bump % n_tok] = _round_half_up(stretch * int(frames_in[bump % n_tok]))
        bump += 1

    sigma = noise_level
    if accent is not None and accent.noise_level is not None:
        sigma = accent.noise_level
    rows = []
    for tok, n_out in zip(token_ids, frames_out):
        base = prototypes[tok].copy()
        if accent is not None:
            base = base + accent.perturbation[tok]
        for _ in range(int(n_out)):
            frame = base + sigma * rng.normal(0.0, 1.0, size=feat_dim)
            if accent is not None:
                frame = accent.rotation @ frame + accent.bias
            rows.append(frame)
    feats = np.asarray(rows, dtype=np.float32)
    text = tokenizer.detokenize(token_ids + 2)
    return UtteranceRecord(id=utt_id, features=feats, tokens=text, corpus_tag=tag,
                           accent=accent.accent_id if accent is not None else "")


def generate_corpus(path, tag: str, seed: int, n_utts: int,
                    accent: AccentSpec | None = None, *,
                    tokenizer: Tokenizer | None = None,
                    feat_dim: int = 16, proto_seed: int = 0,
                    noise_level: float = 0.3) -> CorpusManifest:
    """Generate a corpus file + manifest. Pure function of its arguments:
    the same seed always produces bitwise-identical files."""
    if n_utts < 1:
        raise DataError(f"n_utts must be >= 1, got {n_utts}")
    tokenizer = tokenizer or Tokenizer()
    prototypes = prototype_table(proto_seed, tokenizer.n_symbols, feat_dim)
    children = np.random.SeedSequence(seed).spawn(n_utts)
    records = []
    for i in range(n_utts):
        rng = np.random.default_rng(children[i])
        records.append(synthesize_utterance(rng, f"{tag}-{i:06d}", tag, tokenizer,
                                            prototypes, noise_level, accent))
    manifest = CorpusManifest(
        tag=tag,
        utterance_count=len(records),
        total_frames=int(sum(r.features.shape[0] for r in records)),
        accent_id=accent.accent_id if accent is not None else "",
        seed=seed,
        extra={"feat_dim": feat_dim, "proto_seed": proto_seed, "noise_level": noise_level},
    )
    save_corpus(path, records, manifest)
    return manifest


# -- binary container -------------------------------------------------------


def _write_str16(fh, s: str):
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataFormatError(f"string too long for u16 length: {len(raw)} bytes")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.json")


def save_corpus(path, records: list[UtteranceRecord], manifest: CorpusManifest):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<II", CORPUS_VERSION, len(records)))
        for rec in records:
            _write_str16(fh, rec.id)
            _write_str16(fh, rec.accent)
            frames, dim = rec.features.shape
            fh.write(struct.pack("<II", frames, dim))
            fh.write(rec.features.astype("<f4").tobytes(order="C"))
            _write_str16(fh, rec.tokens)
    manifest_path(path).write_text(manifest.to_json())


class _Reader:
    """Tracks byte offsets so truncation errors can name the exact position."""

    def __init__(self, fh):
        self.fh = fh
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        buf = self.fh.read(n)
        if len(buf) != n:
            raise DataFormatError(
                f"truncated corpus file: wanted {n} bytes for {what} at byte offset {self.offset}, got {len(buf)}")
        self.offset += n
        return buf

    def read_str16(self, what: str) -> str:
        (n,) = struct.unpack("<H", self.read(2, what + " length"))
        return self.read(n, what).decode("utf-8")


def read_manifest(path) -> CorpusManifest:
    mp = manifest_path(path)
    if not mp.exists():
        raise DataFormatError(f"missing manifest sidecar: {mp}")
    return CorpusManifest.from_json(mp.read_text())


def load_corpus(path, verify_manifest: bool = True):
    """Yield UtteranceRecords in file order; verifies header and manifest
    counts. Raises DataFormatError on magic mismatch, truncation (with byte
    offset), or count disagreement."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    manifest = read_manifest(path) if verify_manifest else None
    with open(path, "rb") as fh:
        r = _Reader(fh)
        magic = r.read(4, "magic")
        if magic != CORPUS_MAGIC:
            raise DataFormatError(f"bad corpus magic: {magic!r} (expected {CORPUS_MAGIC!r})")
        version, count = struct.unpack("<II", r.read(8, "header"))
        if version != CORPUS_VERSION:
            raise DataFormatError(f"unsupported corpus version {version}")
        total_frames = 0
        for i in range(count):
            utt_id = r.read_str16("record id")
            accent = r.read_str16("accent tag")
            frames, dim = struct.unpack("<II", r.read(8, "frame header"))
            raw = r.read(frames * dim * 4, f"features of record {i}")
            feats = np.frombuffer(raw, dtype="<f4").reshape(frames, dim).copy()
            tokens = r.read_str16("token string")
            total_frames += frames
            yield UtteranceRecord(id=utt_id, features=feats, tokens=tokens,
                                  corpus_tag=manifest.tag if manifest else "", accent=accent)
        trailing = fh.read(1)
        if trailing:
            raise DataFormatError(f"trailing bytes after {count} records at byte offset {r.offset}")
    if manifest is not None:
        if manifest.utterance_count != count:
            raise DataFormatError(
                f"manifest integrity: manifest says {manifest.utterance_count} utterances, file holds {count}")
        if manifest.total_frames != total_frames:
            raise DataFormatError(
                f"manifest integrity: manifest says {manifest.total_frames} frames, file holds {total_frames}")


def load_corpus_list(path) -> list[UtteranceRecord]:
    return list(load_corpus(path))


# -- feature normalization ---------------------------------------------------


def cmvn(features: np.ndarray, stats: tuple[np.ndarray, np.ndarray] | None = None,
         eps: float = 1e-8) -> np.ndarray:
    """Per-dimension mean/variance normalization.

    Default: per-utterance statistics (needs >= 2 frames). Pass precomputed
    ``stats`` (mean, std) to normalize with corpus-level statistics instead.
    Constant dimensions map to zeros via the variance floor.
    """
    x = np.asarray(features, dtype=np.float64)
    if stats is None:
        if x.shape[0] < 2:
            raise DataError(f"cmvn needs >= 2 frames for a variance estimate, got {x.shape[0]}")
        mu = x.mean(axis=0)
        sd = np.sqrt(x.var(axis=0) + eps)
    else:
        mu, sd = stats
    return ((x - mu) / sd).astype(np.float32)


def corpus_cmvn_stats(records, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Corpus-level (mean, std) over all frames of all records."""
    allx = np.concatenate([np.asarray(r.features, dtype=np.float64) for r in records], axis=0)
    return allx.mean(axis=0), np.sqrt(allx.var(axis=0) + eps)
