"""Synthetic emotional-utterance corpus with planted layer-wise structure.

Generated multi-layer frame features stand in for a frozen self-supervised
speech encoder: a configurable subset of layers deterministically embeds the
transcript tokens, another subset embeds the paralinguistic descriptor
attributes and the emotion, and the remaining layers are pure noise. The
module also owns the on-disk dataset formats (JSONL manifest plus a binary
feature file per utterance).
"""

from __future__ import annotations

import functools
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "EMOTIONS",
    "PITCH_VALUES",
    "ENERGY_VALUES",
    "SPEED_VALUES",
    "AGE_VALUES",
    "GENDER_VALUES",
    "EMPHASIS_VALUES",
    "TONE_VALUES",
    "DescriptorAttrs",
    "Utterance",
    "CorpusSpec",
    "DatasetFormatError",
    "render_descriptor_caption",
    "synth_features",
    "generate_corpus",
    "split_folds",
    "write_dataset",
    "read_dataset",
    "word_list",
]

EMOTIONS = ("happy", "sad", "angry", "neutral", "surprised", "disgusted", "fearful")

PITCH_VALUES = ("low", "medium", "high")
ENERGY_VALUES = ("low", "medium", "high")
SPEED_VALUES = ("slow", "medium", "fast")
AGE_VALUES = ("young", "adult", "senior")
GENDER_VALUES = ("male", "female")
EMPHASIS_VALUES = ("weak", "strong")
TONE_VALUES = ("calm", "bright", "harsh", "soft")

# (name, domain) in fixed sampling/embedding order; emotion is appended as an
# extra planted category in the descriptor layers
_ATTR_DOMAINS = (
    ("pitch", PITCH_VALUES),
    ("energy", ENERGY_VALUES),
    ("speed", SPEED_VALUES),
    ("age", AGE_VALUES),
    ("gender", GENDER_VALUES),
    ("tone", TONE_VALUES),
    ("emphasis", EMPHASIS_VALUES),
)

# P(attr = preferred | emotion); unlisted attrs are uniform
_ATTR_BIAS: dict[str, dict[str, tuple[str, float]]] = {
    "happy": {"pitch": ("high", 0.7), "energy": ("high", 0.6), "speed": ("fast", 0.5),
              "tone": ("bright", 0.7)},
    "sad": {"pitch": ("low", 0.6), "energy": ("low", 0.8), "speed": ("slow", 0.7),
            "tone": ("soft", 0.7)},
    "angry": {"energy": ("high", 0.8), "speed": ("fast", 0.6), "emphasis": ("strong", 0.7),
              "tone": ("harsh", 0.7)},
    "neutral": {"pitch": ("medium", 0.6), "energy": ("medium", 0.6), "speed": ("medium", 0.6),
                "tone": ("calm", 0.7)},
    "surprised": {"pitch": ("high", 0.8), "speed": ("fast", 0.7), "tone": ("bright", 0.6)},
    "disgusted": {"energy": ("low", 0.5), "speed": ("slow", 0.5), "tone": ("harsh", 0.6)},
    "fearful": {"pitch": ("high", 0.6), "energy": ("low", 0.6), "emphasis": ("weak", 0.6),
                "tone": ("soft", 0.6)},
}

_FEATURE_MAGIC = b"SERF"
_FEATURE_VERSION = 1

_MANIFEST_NAME = "manifest.jsonl"
_FEATURE_DIR = "features"


class DatasetFormatError(ValueError):
    """Raised when an on-disk dataset file is malformed."""


@dataclass(frozen=True)
class DescriptorAttrs:
    pitch: str
    energy: str
    speed: str
    age: str
    gender: str
    tone: str
    emphasis: str

    def __post_init__(self):
        for name, domain in _ATTR_DOMAINS:
            value = getattr(self, name)
            if name == "tone":
                # tone is a short free-text tag; generation samples it from
                # TONE_VALUES but any non-empty token is a valid attribute
                if not value or " " in value:
                    raise ValueError(f"tone must be a single non-empty token, got {value!r}")
            elif value not in domain:
                raise ValueError(f"invalid {name} value {value!r}; expected one of {domain}")


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [L, T, D] float32
    transcript: list[str]
    descriptor_caption: list[str]
    emotion: str

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 3 or feats.shape[0] < 2 or feats.shape[1] < 1:
            raise ValueError(f"features must be [L>=2, T>=1, D], got shape {feats.shape}")
        self.features = feats
        if not self.transcript:
            raise ValueError("transcript must be non-empty")
        if self.emotion not in EMOTIONS:
            raise ValueError(f"unknown emotion {self.emotion!r}")


@dataclass(frozen=True)
class CorpusSpec:
    n_utterances: int = 200
    n_layers: int = 6
    t_range: tuple[int, int] = (20, 60)
    dim: int = 32
    vocab_size: int = 200
    content_layers: tuple[int, ...] = (0, 1)
    descriptor_layers: tuple[int, ...] = (4, 5)
    class_prior: dict[str, float] = field(
        default_factory=lambda: {"happy": 0.25, "sad": 0.25, "angry": 0.25, "neutral": 0.25})
    seed: int = 0
    noise_std: float = 0.05
    correlate_attrs: bool = True

    def validate(self) -> None:
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be >= 1")
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2")
        tmin, tmax = self.t_range
        if not (1 <= tmin <= tmax):
            raise ValueError(f"invalid t_range {self.t_range}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.vocab_size < 20:
            raise ValueError("vocab_size must be >= 20")
        c, q = set(self.content_layers), set(self.descriptor_layers)
        if c & q:
            raise ValueError(f"content and descriptor layers overlap: {sorted(c & q)}")
        if not (c | q) <= set(range(self.n_layers)):
            raise ValueError("content/descriptor layers must lie in [0, n_layers)")
        if not self.class_prior:
            raise ValueError("class_prior must be non-empty")
        for label, p in self.class_prior.items():
            if label not in EMOTIONS:
                raise ValueError(f"class_prior label {label!r} is not a valid emotion")
            if p <= 0:
                raise ValueError(f"class_prior[{label!r}] must be positive")
        total = sum(self.class_prior.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"class_prior must sum to 1, got {total}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


# ---------------------------------------------------------------------------
# vocabulary and captions


_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


@functools.lru_cache(maxsize=8)
def word_list(vocab_size: int) -> tuple[str, ...]:
    """Deterministic, seed-independent synthetic vocabulary of two-syllable
    words, enumerated through a fixed bijective stride over all syllable
    pairs so nearby indices do not share a prefix."""
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    n = len(syllables)
    total = n * n
    if vocab_size > total:
        raise ValueError(f"vocab_size {vocab_size} exceeds {total} constructible words")
    stride = 2654435761  # odd, coprime with n*n = 8100
    words = []
    for k in range(vocab_size):
        idx = (k * stride) % total
        words.append(syllables[idx // n] + syllables[idx % n])
    return tuple(words)


def render_descriptor_caption(attrs: DescriptorAttrs, emotion: str) -> list[str]:
    """Fixed caption template, tokenized by whitespace.

    The emotion is validated but does not appear in the text; it is carried by
    the separate label field.
    """
    if emotion not in EMOTIONS:
        raise ValueError(f"unknown emotion {emotion!r}")
    text = (f"a {attrs.pitch} pitched {attrs.speed} speech with {attrs.emphasis} emphasis "
            f"spoken by a {attrs.age} {attrs.gender} in a {attrs.tone} tone")
    return text.split()


# ---------------------------------------------------------------------------
# planted feature synthesis


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((n, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return rows * math.sqrt(dim)  # element scale ~1, comparable to the noise layers


@functools.lru_cache(maxsize=64)
def _content_table(seed: int, layer: int, vocab_size: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4, layer]))
    table = _unit_rows(rng, vocab_size, dim)
    table.setflags(write=False)
    return table


@functools.lru_cache(maxsize=64)
def _descriptor_table(seed: int, layer: int, cat_index: int, n_values: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5, layer, cat_index]))
    table = _unit_rows(rng, n_values, dim)
    table.setflags(write=False)
    return table


def _frames_per_token(t_max: int) -> int:
    return max(1, round(t_max / 12))


def _descriptor_frame(spec: CorpusSpec, layer: int, attrs: DescriptorAttrs, emotion: str) -> np.ndarray:
    parts = []
    for ci, (name, domain) in enumerate(_ATTR_DOMAINS):
        value = getattr(attrs, name)
        if value not in domain:
            raise ValueError(
                f"cannot synthesize features for {name}={value!r}; expected one of {domain}")
        table = _descriptor_table(spec.seed, layer, ci, len(domain), spec.dim)
        parts.append(table[domain.index(value)])
    emo_table = _descriptor_table(spec.seed, layer, len(_ATTR_DOMAINS), len(EMOTIONS), spec.dim)
    parts.append(emo_table[EMOTIONS.index(emotion)])
    return np.sum(parts, axis=0) / math.sqrt(len(parts))


def synth_features(transcript: Sequence[str], attrs: DescriptorAttrs, emotion: str,
                   spec: CorpusSpec, noise_seed: int) -> np.ndarray:
    """Build the planted [L, T, D] float32 feature stack for one utterance.

    Layers in the content set embed the transcript tokens frame-wise; layers
    in the descriptor set carry a constant per-utterance encoding of the
    attributes and emotion; all other layers are pure standard noise. The
    planted layers receive additive Gaussian noise of std `spec.noise_std`.
    """
    spec.validate()
    words = word_list(spec.vocab_size)
    index = {w: i for i, w in enumerate(words)}
    try:
        token_ids = np.array([index[w] for w in transcript], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"transcript token {exc.args[0]!r} not in the corpus vocabulary") from None

    tmin, tmax = spec.t_range
    n_frames = int(np.clip(len(token_ids) * _frames_per_token(tmax), tmin, tmax))
    rng = np.random.default_rng(np.random.SeedSequence([int(noise_seed)]))

    content_set = set(spec.content_layers)
    descriptor_set = set(spec.descriptor_layers)
    frame_tokens = token_ids[(np.arange(n_frames) * len(token_ids)) // n_frames]

    layers = np.empty((spec.n_layers, n_frames, spec.dim), dtype=np.float64)
    for layer in range(spec.n_layers):
        if layer in content_set:
            base = _content_table(spec.seed, layer, spec.vocab_size, spec.dim)[frame_tokens]
            noise = rng.standard_normal((n_frames, spec.dim)) if spec.noise_std else 0.0
            layers[layer] = base + spec.noise_std * noise
        elif layer in descriptor_set:
            base = _descriptor_frame(spec, layer, attrs, emotion)
            noise = rng.standard_normal((n_frames, spec.dim)) if spec.noise_std else 0.0
            layers[layer] = base[None, :] + spec.noise_std * noise
        else:
            layers[layer] = rng.standard_normal((n_frames, spec.dim))
    return layers.astype(np.float32)


# ---------------------------------------------------------------------------
# corpus generation


def _stratified_labels(spec: CorpusSpec) -> list[str]:
    """Largest-remainder allocation of n utterances to the class prior,
    shuffled deterministically."""
    labels = sorted(spec.class_prior)
    quotas = [spec.n_utterances * spec.class_prior[lab] for lab in labels]
    counts = [int(math.floor(q)) for q in quotas]
    remainder = spec.n_utterances - sum(counts)
    by_frac = sorted(range(len(labels)), key=lambda i: (-(quotas[i] - counts[i]), labels[i]))
    for i in by_frac[:remainder]:
        counts[i] += 1
    assigned = [lab for lab, c in zip(labels, counts) for _ in range(c)]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
    perm = rng.permutation(len(assigned))
    return [assigned[i] for i in perm]


def _build_grammar(spec: CorpusSpec, branching: int = 6):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    succ = np.empty((spec.vocab_size, branching), dtype=np.int64)
    probs = np.empty((spec.vocab_size, branching), dtype=np.float64)
    for w in range(spec.vocab_size):
        succ[w] = rng.choice(spec.vocab_size, size=branching, replace=False)
        probs[w] = rng.dirichlet(np.ones(branching))
    return succ, probs


def _sample_transcript(rng: np.random.Generator, spec: CorpusSpec, succ, probs) -> list[str]:
    words = word_list(spec.vocab_size)
    length = int(rng.integers(5, 13))
    ids = [int(rng.integers(spec.vocab_size))]
    for _ in range(length - 1):
        prev = ids[-1]
        ids.append(int(rng.choice(succ[prev], p=probs[prev])))
    return [words[i] for i in ids]


def _sample_attrs(rng: np.random.Generator, emotion: str, correlate: bool) -> DescriptorAttrs:
    bias = _ATTR_BIAS[emotion] if correlate else {}
    chosen = {}
    for name, domain in _ATTR_DOMAINS:
        pref = bias.get(name)
        if pref is not None and rng.random() < pref[1]:
            chosen[name] = pref[0]
        else:
            chosen[name] = domain[int(rng.integers(len(domain)))]
    return DescriptorAttrs(**chosen)


def generate_corpus(spec: CorpusSpec) -> list[Utterance]:
    """Pure function of the spec (seed included): deterministic corpus.

    Per-utterance randomness is derived from the corpus seed by the splitting
    rule seed_i = SeedSequence([seed, 3, i]), so generation is parallelizable
    per utterance.
    """
    spec.validate()
    succ, probs = _build_grammar(spec)
    labels = _stratified_labels(spec)
    corpus = []
    for i, emotion in enumerate(labels):
        ss = np.random.SeedSequence([spec.seed, 3, i])
        rng = np.random.default_rng(ss)
        transcript = _sample_transcript(rng, spec, succ, probs)
        attrs = _sample_attrs(rng, emotion, spec.correlate_attrs)
        noise_seed = int(ss.generate_state(1, dtype=np.uint64)[0])
        features = synth_features(transcript, attrs, emotion, spec, noise_seed)
        corpus.append(Utterance(
            id=f"utt{i:05d}",
            features=features,
            transcript=transcript,
            descriptor_caption=render_descriptor_caption(attrs, emotion),
            emotion=emotion,
        ))
    return corpus


def split_folds(corpus: Sequence[Utterance], k: int, seed: int = 0,
                ) -> list[tuple[list[Utterance], list[Utterance]]]:
    """k disjoint (train, test) splits; test sets partition the corpus.

    The remainder goes to the earliest folds (largest-first sizes).
    """
    n = len(corpus)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds corpus size {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    perm = rng.permutation(n)
    base, extra = divmod(n, k)
    folds = []
    start = 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        test_idx = set(int(j) for j in perm[start:start + size])
        start += size
        test = [corpus[j] for j in sorted(test_idx)]
        train = [corpus[j] for j in range(n) if j not in test_idx]
        folds.append((train, test))
    return folds


# ---------------------------------------------------------------------------
# on-disk formats


def _write_feature_file(path: Path, features: np.ndarray) -> None:
    feats = np.ascontiguousarray(features, dtype="<f4")
    l, t, d = feats.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", _FEATURE_VERSION, l, t, d))
        fh.write(feats.tobytes())


def _read_feature_file(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < 20:
        raise DatasetFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != _FEATURE_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {blob[:4]!r}, expected {_FEATURE_MAGIC!r}")
    version, l, t, d = struct.unpack("<IIII", blob[4:20])
    if version != _FEATURE_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    expected = 20 + 4 * l * t * d
    if len(blob) != expected:
        raise DatasetFormatError(
            f"{path}: expected {expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=20)
    return data.reshape(l, t, d).astype(np.float32)


_MANIFEST_FIELDS = ("id", "features_file", "n_layers", "n_frames", "dim",
                    "transcript", "descriptor_caption", "emotion")


def write_dataset(corpus: Sequence[Utterance], path) -> None:
    """Write manifest.jsonl plus one SERF feature file per utterance."""
    root = Path(path)
    (root / _FEATURE_DIR).mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in corpus:
        rel = f"{_FEATURE_DIR}/{utt.id}.serf"
        _write_feature_file(root / rel, utt.features)
        l, t, d = utt.features.shape
        row = {
            "id": utt.id,
            "features_file": rel,
            "n_layers": int(l),
            "n_frames": int(t),
            "dim": int(d),
            "transcript": " ".join(utt.transcript),
            "descriptor_caption": " ".join(utt.descriptor_caption),
            "emotion": utt.emotion,
        }
        lines.append(json.dumps(row, ensure_ascii=True))
    (root / _MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path) -> list[Utterance]:
    """Read a dataset directory; raises DatasetFormatError naming the line and
    field for malformed manifests."""
    root = Path(path)
    manifest = root / _MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetFormatError(f"missing manifest: {manifest}")
    corpus = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"manifest line {lineno}: invalid JSON at offset {exc.pos}") from None
        if not isinstance(row, dict):
            raise DatasetFormatError(f"manifest line {lineno}: expected an object")
        for fieldname in _MANIFEST_FIELDS:
            if fieldname not in row:
                raise DatasetFormatError(f"manifest line {lineno}: missing field {fieldname!r}")
        unknown = set(row) - set(_MANIFEST_FIELDS)
        if unknown:
            raise DatasetFormatError(
                f"manifest line {lineno}: unknown field {sorted(unknown)[0]!r}")
        if row["emotion"] not in EMOTIONS:
            raise DatasetFormatError(
                f"manifest line {lineno}: field 'emotion' has invalid value {row['emotion']!r}")
        transcript = str(row["transcript"]).split()
        if not transcript:
            raise DatasetFormatError(f"manifest line {lineno}: field 'transcript' is empty")
        features = _read_feature_file(root / row["features_file"])
        l, t, d = features.shape
        for key, got in (("n_layers", l), ("n_frames", t), ("dim", d)):
            if int(row[key]) != got:
                raise DatasetFormatError(
                    f"manifest line {lineno}: field {key!r} = {row[key]} does not match "
                    f"feature file ({got})")
        corpus.append(Utterance(
            id=str(row["id"]),
            features=features,
            transcript=transcript,
            descriptor_caption=str(row["descriptor_caption"]).split(),
            emotion=str(row["emotion"]),
        ))
    return corpus


def corpora_equal(a: Sequence[Utterance], b: Sequence[Utterance]) -> bool:
    if len(a) != len(b):
        return False
    for ua, ub in zip(a, b):
        if (ua.id != ub.id or ua.transcript != ub.transcript
                or ua.descriptor_caption != ub.descriptor_caption
                or ua.emotion != ub.emotion
                or not np.array_equal(ua.features, ub.features)):
            return False
    return True
