"""Byte-pair-encoding subword units.

Words are split into characters followed by a separate end-of-word symbol,
and the most frequent adjacent pair inside a word is merged repeatedly.
Frequency ties go to the lexicographically smallest pair.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError, FormatError

logger = logging.getLogger(__name__)

EOW = "</w>"
PAD, SOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<sos>", "<eos>", "<unk>")
HEADER = "bpe-v1"


def _split_word(word: str) -> tuple[str, ...]:
    return tuple(word) + (EOW,)


def _merge_word(units: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    left, right = pair
    out = []
    i = 0
    while i < len(units):
        if i + 1 < len(units) and units[i] == left and units[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(units[i])
            i += 1
    return tuple(out)


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    units: list[str]
    reached_target: bool = True
    _ids: dict[str, int] = field(init=False, repr=False)
    _cache: dict[str, tuple[str, ...]] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if tuple(self.units[:4]) != RESERVED:
            raise FormatError("vocabulary must start with the reserved units")
        self._ids = {u: i for i, u in enumerate(self.units)}

    @property
    def vocab_size(self) -> int:
        return len(self.units)

    def id_of(self, unit: str) -> int:
        return self._ids.get(unit, UNK)

    def segment(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is None:
            units = _split_word(word)
            for pair in self.merges:
                if len(units) == 1:
                    break
                units = _merge_word(units, pair)
            cached = self._cache[word] = units
        return cached

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            ids.extend(self.id_of(u) for u in self.segment(word))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        pieces = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.units):
                raise IndexError(f"token id {i} outside vocabulary of {len(self.units)}")
            if i in (PAD, SOS, EOS):
                continue
            pieces.append(self.units[i])
        return "".join(pieces).replace(EOW, " ").strip()

    # -- persistence ------------------------------------------------------
    def dumps(self) -> str:
        lines = [f"{HEADER} {self.vocab_size}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        lines.append("---")
        lines += [f"{i} {u}" for i, u in enumerate(self.units)]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps().encode("utf-8"))

    @classmethod
    def loads(cls, text: str) -> "BpeModel":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        head = lines[0].split(" ") if lines else []
        if len(head) != 2 or head[0] != HEADER:
            raise FormatError("missing bpe-v1 header")
        try:
            sep = lines.index("---")
        except ValueError:
            raise FormatError("missing '---' separator") from None
        merges = []
        for line in lines[1:sep]:
            left, right = line.split(" ")
            merges.append((left, right))
        units = []
        for expected, line in enumerate(lines[sep + 1:]):
            idx, unit = line.split(" ", 1)
            if int(idx) != expected:
                raise FormatError(f"unit ids must be consecutive, got {idx} at {expected}")
            units.append(unit)
        if len(units) != int(head[1]):
            raise FormatError(f"header declares {head[1]} units, found {len(units)}")
        return cls(merges, units)

    @classmethod
    def load(cls, path) -> "BpeModel":
        return cls.loads(Path(path).read_bytes().decode("utf-8"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def count_pairs(words: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for units, freq in words.items():
        for pair in zip(units, units[1:]):
            counts[pair] += freq
    return counts


def train_bpe(corpus: Sequence[str], vocab_size: int = 500) -> BpeModel:
    """Learn merges until the vocabulary reaches ``vocab_size``.

    Stops early when no pair occurs at least twice; the returned model then
    has ``reached_target`` False.
    """
    words = Counter(w for line in corpus for w in line.split())
    if not words:
        raise ContractError("bpe training corpus is empty")
    base = sorted({c for w in words for c in w}) + [EOW]
    if vocab_size < len(base) + len(RESERVED):
        raise ContractError(
            f"target vocabulary {vocab_size} is below {len(base)} base units + 4 reserved")
    segmented = {_split_word(w): n for w, n in words.items()}
    units = list(RESERVED) + base
    merges: list[tuple[str, str]] = []
    known = set(units)
    while len(units) < vocab_size:
        counts = count_pairs(segmented)
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]), default=None)
        if best is None or best[1] < 2:
            break
        pair = best[0]
        merges.append(pair)
        merged = pair[0] + pair[1]
        if merged not in known:
            known.add(merged)
            units.append(merged)
        segmented = {_merge_word(u, pair): n for u, n in segmented.items()}
    model = BpeModel(merges, units, reached_target=len(units) == vocab_size)
    if not model.reached_target:
        logger.warning("bpe stopped at %d units (target %d)", len(units), vocab_size)
    return model
