"""Synthetic paired corpora, in-domain text and corpus files.

Each character (and the word separator) owns a fixed unit-norm prototype
vector; an utterance's features repeat the prototype of every character
``frames_per_token`` times and add Gaussian noise. Transcripts and extra
text come from one seeded first-order Markov source per language, so the
text-only data is in-domain. Two languages with different alphabets but the
same ``prototype_seed`` share their acoustic inventory.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError

FEATURE_MAGIC = b"HSQF"
SPACE_PROB = 0.2


@dataclass
class Utterance:
    id: str
    feats: np.ndarray
    text: str


@dataclass
class SyntheticTaskSpec:
    alphabet: str = "abcdefghijklmnop"
    count: int = 1000
    min_len: int = 8
    max_len: int = 16
    frames_per_token: int = 4
    feat_dim: int = 16
    noise: float = 0.1
    order: int = 1
    concentration: float = 0.3
    seed: int = 0
    prototype_seed: int | None = None
    id_prefix: str = "utt"

    def validate(self) -> "SyntheticTaskSpec":
        if not self.alphabet:
            raise ConfigError("alphabet is empty")
        if any(c.isspace() for c in self.alphabet) or len(set(self.alphabet)) != len(self.alphabet):
            raise ConfigError("alphabet must hold distinct non-space characters")
        if self.frames_per_token < 2:
            raise ConfigError("frames_per_token must be at least 2")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.order < 1 or self.concentration <= 0:
            raise ConfigError("order must be >= 1 and concentration > 0")
        if self.count < 1 or self.feat_dim < 1:
            raise ConfigError("count and feat_dim must be positive")
        return self

    @property
    def symbols(self) -> str:
        """Characters with acoustic prototypes: the alphabet then the space."""
        return self.alphabet + " "


class MarkovSource:
    """Character chain conditioned on the last ``order`` symbols.

    Next-letter distributions are Dirichlet draws, created lazily per context
    from a context-keyed seed so the chain is fully determined by ``seed``.
    After a letter a space follows with probability ``SPACE_PROB``; sentences
    never start or end with a space and never hold two in a row.
    """

    def __init__(self, alphabet: str, seed: int, order: int = 1, concentration: float = 0.3):
        self.alphabet = alphabet
        self.seed = seed
        self.order = order
        self.concentration = concentration
        self._tables: dict[str, np.ndarray] = {}

    def _letters(self, context: str) -> np.ndarray:
        table = self._tables.get(context)
        if table is None:
            key = [self.alphabet.find(c) + 2 for c in context]
            rng = np.random.default_rng([self.seed, 5, len(context)] + key)
            table = rng.dirichlet(np.full(len(self.alphabet), self.concentration))
            self._tables[context] = table
        return table

    def sentence(self, rng: np.random.Generator, min_len: int, max_len: int) -> str:
        target = int(rng.integers(min_len, max_len + 1))
        n = len(self.alphabet)
        text = ""
        while len(text) < target or text[-1] == " ":
            context = text[-self.order:] if text else ""
            probs = self._letters(context)
            may_space = bool(text) and text[-1] != " " and len(text) + 1 < target
            if may_space and rng.random() < SPACE_PROB:
                text += " "
            else:
                text += self.alphabet[int(rng.choice(n, p=probs))]
        return text

    def unigram(self, texts: Sequence[str]) -> np.ndarray:
        symbols = self.alphabet + " "
        counts = np.zeros(len(symbols))
        index = {c: i for i, c in enumerate(symbols)}
        for t in texts:
            for c in t:
                counts[index[c]] += 1
        return counts / counts.sum()


def prototypes(spec: SyntheticTaskSpec) -> np.ndarray:
    seed = spec.seed if spec.prototype_seed is None else spec.prototype_seed
    rng = np.random.default_rng([seed, 4])
    protos = rng.standard_normal((len(spec.symbols), spec.feat_dim))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def render(text: str, spec: SyntheticTaskSpec, protos: np.ndarray,
           rng: np.random.Generator) -> np.ndarray:
    index = {c: i for i, c in enumerate(spec.symbols)}
    clean = np.repeat(protos[[index[c] for c in text]], spec.frames_per_token, axis=0)
    noise = rng.standard_normal(clean.shape) * spec.noise if spec.noise > 0 else 0.0
    return (clean + noise).astype(np.float32)


def split_of(utt_id: str) -> str:
    bucket = int(hashlib.md5(utt_id.encode("utf-8")).hexdigest(), 16) % 10
    return "train" if bucket < 8 else ("dev" if bucket == 8 else "test")


def gen_synthetic(spec: SyntheticTaskSpec) -> dict[str, list[Utterance]]:
    """Paired corpora split 80/10/10 by a hash of the utterance id."""
    spec.validate()
    source = MarkovSource(spec.alphabet, spec.seed, spec.order, spec.concentration)
    protos = prototypes(spec)
    text_rng = np.random.default_rng([spec.seed, 1])
    noise_rng = np.random.default_rng([spec.seed, 2])
    out: dict[str, list[Utterance]] = {"train": [], "dev": [], "test": []}
    for i in range(spec.count):
        utt_id = f"{spec.id_prefix}{i:06d}"
        text = source.sentence(text_rng, spec.min_len, spec.max_len)
        out[split_of(utt_id)].append(Utterance(utt_id, render(text, spec, protos, noise_rng), text))
    return out


def gen_text(spec: SyntheticTaskSpec, count: int) -> list[str]:
    """Text-only sentences from the same source as the paired transcripts."""
    if count < 1:
        raise ConfigError("text count must be at least 1")
    spec.validate()
    source = MarkovSource(spec.alphabet, spec.seed, spec.order, spec.concentration)
    rng = np.random.default_rng([spec.seed, 3])
    return [source.sentence(rng, spec.min_len, spec.max_len) for _ in range(count)]


def nearest_prototype_accuracy(utts: Sequence[Utterance], spec: SyntheticTaskSpec) -> float:
    """Frame-level accuracy of classifying each frame by its closest prototype."""
    protos = prototypes(spec)
    index = {c: i for i, c in enumerate(spec.symbols)}
    correct = total = 0
    for u in utts:
        truth = np.repeat([index[c] for c in u.text], spec.frames_per_token)
        dist = ((u.feats[:, None, :] - protos[None]) ** 2).sum(-1)
        correct += int((dist.argmin(1) == truth).sum())
        total += len(truth)
    return correct / total


# -- files ---------------------------------------------------------------------
def write_features(path, utts: Sequence[Utterance]) -> None:
    parts = [FEATURE_MAGIC, struct.pack("<I", len(utts))]
    for u in utts:
        raw = u.id.encode("utf-8")
        feats = np.ascontiguousarray(u.feats, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<II", *feats.shape))
        parts.append(feats.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_features(path) -> list[tuple[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature container")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos = 8
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        utt_id = blob[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        frames, dim = struct.unpack_from("<II", blob, pos)
        pos += 8
        size = 4 * frames * dim
        if pos + size > len(blob):
            raise FormatError(f"{path}: truncated")
        feats = np.frombuffer(blob, dtype="<f4", count=frames * dim, offset=pos)
        out.append((utt_id, feats.reshape(frames, dim).astype(np.float32)))
        pos += size
    return out


def write_transcripts(path, items: Sequence[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{i}\t{t}\n" for i, t in items), encoding="utf-8")


def read_transcripts(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        utt_id, _, text = line.partition("\t")
        out[utt_id] = text.split("\t")[0]
    return out


def write_corpus(prefix, utts: Sequence[Utterance]) -> None:
    """Write ``<prefix>.feats`` and ``<prefix>.txt``."""
    prefix = Path(prefix)
    write_features(prefix.with_suffix(".feats"), utts)
    write_transcripts(prefix.with_suffix(".txt"), [(u.id, u.text) for u in utts])


def read_corpus(prefix) -> list[Utterance]:
    prefix = Path(prefix)
    texts = read_transcripts(prefix.with_suffix(".txt"))
    feats = read_features(prefix.with_suffix(".feats"))
    missing = [i for i, _ in feats if i not in texts]
    if missing:
        raise FormatError(f"no transcript for {missing[:5]}")
    return [Utterance(i, x, texts[i]) for i, x in feats]


def write_text(path, lines: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{t}\n" for t in lines), encoding="utf-8")


def read_text(path) -> list[str]:
    return [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
