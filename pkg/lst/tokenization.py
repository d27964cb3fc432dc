"""
Byte-pair merges over speech-token sequences.

Training works on the whole corpus flattened into one int64 array with -1 separating
utterances, so pair counting and merging are vectorized NumPy passes.
"""

import json
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from lst.corpus import SPEECH_VOCAB_SIZE
from lst.errors import ConfigError, CorpusFormatError, VocabularyIndexError

logger = logging.getLogger(__name__)

_SEP = -1


def _merge_pair(seq: np.ndarray, a: int, b: int, new_id: int) -> np.ndarray:
    """Replace non-overlapping (a, b) occurrences left to right with `new_id`."""
    if seq.size < 2:
        return seq
    hits = np.flatnonzero((seq[:-1] == a) & (seq[1:] == b))
    if hits.size == 0:
        return seq
    if a == b:
        keep, last = [], -2
        for h in hits:
            if h > last + 1:
                keep.append(h)
                last = h
        hits = np.asarray(keep, dtype=np.int64)
    out = seq.copy()
    out[hits] = new_id
    drop = np.zeros(seq.size, dtype=bool)
    drop[hits + 1] = True
    return out[~drop]


class MergeTable:
    """
    Ordered merge list. Merge `r` creates id `base_size + r` from its two parents.

    Args:
        base_size: Size of the raw speech vocabulary.
        merges: (left, right) pairs in rank order.
    """

    def __init__(self, base_size: int = SPEECH_VOCAB_SIZE, merges: Sequence[tuple[int, int]] = ()):
        self.base_size = base_size
        self.merges = [(int(a), int(b)) for a, b in merges]
        self._expansions: list[tuple[int, ...]] = [(i,) for i in range(base_size)]
        for r, (a, b) in enumerate(self.merges):
            if max(a, b) >= base_size + r:
                raise CorpusFormatError(f"merge {r} refers to an id that does not exist yet")
            self._expansions.append(self._expansions[a] + self._expansions[b])

    def __len__(self) -> int:
        return len(self.merges)

    @property
    def vocab_size(self) -> int:
        return self.base_size + len(self.merges)

    def expand(self, unit: int) -> tuple[int, ...]:
        if not 0 <= unit < self.vocab_size:
            raise VocabularyIndexError(f"unit {unit} outside merge vocabulary of size {self.vocab_size}")
        return self._expansions[unit]

    def encode(self, tokens: Sequence[int]) -> list[int]:
        seq = np.asarray(tokens, dtype=np.int64)
        if seq.size and (seq.min() < 0 or seq.max() >= self.base_size):
            raise VocabularyIndexError(f"speech token outside [0, {self.base_size})")
        for r, (a, b) in enumerate(self.merges):
            seq = _merge_pair(seq, a, b, self.base_size + r)
        return seq.tolist()

    def decode(self, units: Sequence[int]) -> list[int]:
        out: list[int] = []
        for unit in units:
            out.extend(self.expand(int(unit)))
        return out

    def compression_ratio(self, corpus: Iterable[Sequence[int]]) -> float:
        """Raw speech tokens per merged unit over `corpus`."""
        flat = _flatten(corpus)
        raw = int(np.count_nonzero(flat != _SEP))
        for r, (a, b) in enumerate(self.merges):
            flat = _merge_pair(flat, a, b, self.base_size + r)
        units = int(np.count_nonzero(flat != _SEP))
        return raw / units if units else 1.0

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"base_size": self.base_size, "merges": self.merges}))

    @classmethod
    def load(cls, path: str | Path) -> "MergeTable":
        try:
            data = json.loads(Path(path).read_text())
            return cls(int(data["base_size"]), [tuple(m) for m in data["merges"]])
        except (OSError, KeyError, TypeError, ValueError) as e:
            raise CorpusFormatError(f"cannot read merge table {path}: {e}") from e


def _flatten(corpus: Iterable[Sequence[int]]) -> np.ndarray:
    parts = []
    for seq in corpus:
        parts.append(np.asarray(seq, dtype=np.int64))
        parts.append(np.array([_SEP], dtype=np.int64))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def train_speech_bpe(
    corpus: Iterable[Sequence[int]], vocab_size: int, base_size: int = SPEECH_VOCAB_SIZE
) -> MergeTable:
    """
    Learn merges greedily by pair frequency (ties go to the smallest (left, right) pair).

    Training stops early when no pair occurs at least twice.

    Raises:
        ConfigError: If vocab_size does not exceed the base vocabulary.
    """
    if vocab_size <= base_size:
        raise ConfigError(f"BPE vocabulary {vocab_size} must exceed the base vocabulary {base_size}", "bpe_vocab_size")
    flat = _flatten(corpus)
    merges: list[tuple[int, int]] = []
    for r in range(vocab_size - base_size):
        if flat.size < 2:
            break
        left, right = flat[:-1], flat[1:]
        valid = (left != _SEP) & (right != _SEP)
        keys = left[valid] * vocab_size + right[valid]
        if keys.size == 0:
            break
        pairs, counts = np.unique(keys, return_counts=True)
        best = int(np.argmax(counts))
        if counts[best] < 2:
            break
        a, b = divmod(int(pairs[best]), vocab_size)
        merges.append((a, b))
        flat = _merge_pair(flat, a, b, base_size + r)
    if len(merges) < vocab_size - base_size:
        logger.info(f"BPE training stopped after {len(merges)} merges (no repeated pairs left)")
    return MergeTable(base_size, merges)
