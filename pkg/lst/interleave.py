"""
Interleaved speech/text sequences and row packing.

An utterance is turned into alternating runs: a random contiguous span of words is
rendered as text tokens (their speech frames are dropped) and the following span of
about half as many words stays speech. Every run is preceded by its modality marker.
Sequences are then packed greedily into rows with a separator between them; each row
carries a loss mask and a `PatchPlan` built from per-run segmentations.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from lst.corpus import AlignmentSpanList, Utterance, Vocabulary
from lst.errors import ConfigError, ContractError, SkipUtterance
from lst.patching import Patcher, PatchPlan, PatchSegmentation, PlanUnit
from lst.utils.enums import BudgetMode, Modality, RemainderMode, SegmentKind

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Run:
    """
    One single-modality run.

    `origin` is a half-open range into the source utterance: word indices for text
    runs, frame indices for speech runs. `words` holds the word ids of the spans of a
    speech run (or the words of a text run).
    """

    modality: Modality
    tokens: tuple[int, ...]
    origin: tuple[int, int] = (0, 0)
    spans: AlignmentSpanList | None = None
    words: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)


class FlatSequence(NamedTuple):
    tokens: np.ndarray
    is_speech: np.ndarray
    is_marker: np.ndarray
    run_of: np.ndarray  # -1 for markers


@dataclass
class InterleavedSequence:
    runs: list[Run] = field(default_factory=list)
    source: int | None = None

    @classmethod
    def text_only(cls, words: Sequence[int], source: int | None = None) -> "InterleavedSequence":
        return cls([Run(Modality.TEXT, tuple(int(w) for w in words), (0, len(words)), words=tuple(words))], source)

    @classmethod
    def speech_only(cls, utt: Utterance, source: int | None = None, with_spans: bool = True) -> "InterleavedSequence":
        run = Run(
            Modality.SPEECH,
            tuple(utt.speech_tokens),
            (0, len(utt.speech_tokens)),
            utt.alignment if with_spans else None,
            tuple(utt.text_tokens) if with_spans else (),
        )
        return cls([run], source)

    @property
    def n_tokens(self) -> int:
        """Tokens including one marker per run."""
        return sum(len(r) + 1 for r in self.runs)

    def content_counts(self) -> tuple[int, int]:
        text = sum(len(r) for r in self.runs if r.modality == Modality.TEXT)
        speech = sum(len(r) for r in self.runs if r.modality == Modality.SPEECH)
        return text, speech

    @property
    def markers(self) -> list[int]:
        positions, cursor = [], 0
        for run in self.runs:
            positions.append(cursor)
            cursor += len(run) + 1
        return positions

    def flatten(self, vocab: Vocabulary) -> FlatSequence:
        tokens, is_speech, is_marker, run_of = [], [], [], []
        for i, run in enumerate(self.runs):
            tokens.append(vocab.marker_for(run.modality))
            is_speech.append(False)
            is_marker.append(True)
            run_of.append(-1)
            tokens.extend(run.tokens)
            is_speech.extend([run.modality == Modality.SPEECH] * len(run))
            is_marker.extend([False] * len(run))
            run_of.extend([i] * len(run))
        return FlatSequence(
            np.asarray(tokens, dtype=np.int64),
            np.asarray(is_speech, dtype=bool),
            np.asarray(is_marker, dtype=bool),
            np.asarray(run_of, dtype=np.int64),
        )

    def extend(self, other: "InterleavedSequence") -> "InterleavedSequence":
        """Concatenate, continuing the last run when `other` starts in the same modality."""
        runs = list(self.runs)
        for run in other.runs:
            if runs and runs[-1].modality == run.modality:
                last = runs[-1]
                runs[-1] = Run(last.modality, last.tokens + run.tokens, (last.origin[0], last.origin[1] + len(run)))
            else:
                runs.append(run)
        return InterleavedSequence(runs, self.source)

    def map_speech(self, fn: Callable[[Sequence[int]], Sequence[int]]) -> "InterleavedSequence":
        """Re-encode speech runs (e.g. into BPE units); spans are dropped."""
        runs = [
            Run(r.modality, tuple(fn(r.tokens)), r.origin) if r.modality == Modality.SPEECH else r
            for r in self.runs
        ]
        return InterleavedSequence(runs, self.source)

    def restore(self) -> dict[Modality, dict[int, int]]:
        """Source offset -> token for every content token, markers dropped."""
        content: dict[Modality, dict[int, int]] = {Modality.TEXT: {}, Modality.SPEECH: {}}
        for run in self.runs:
            start, stop = run.origin
            if stop - start != len(run):
                raise ContractError(f"run origin {run.origin} does not match its {len(run)} tokens")
            content[run.modality].update(zip(range(start, stop), run.tokens))
        return content

    def render(self, vocab: Vocabulary | None = None, spans: bool = True) -> str:
        parts = []
        for run in self.runs:
            if run.modality == Modality.TEXT:
                parts.append("<t> " + " ".join(str(t) for t in run.tokens))
                continue
            if spans and run.spans is not None:
                pieces, cursor = [], 0
                for span in run.spans:
                    if span.b > cursor:
                        pieces.append("~" + " ".join(str(t) for t in run.tokens[cursor : span.b]))
                    pieces.append(" ".join(str(t) for t in run.tokens[span.b : span.e + 1]))
                    cursor = span.e + 1
                if cursor < len(run):
                    pieces.append("~" + " ".join(str(t) for t in run.tokens[cursor:]))
                parts.append("<s> [" + " | ".join(pieces) + "]")
            else:
                parts.append("<s> " + " ".join(str(t) for t in run.tokens))
        return " ".join(parts)


TokenSequence = InterleavedSequence


##############
# Interleave #
##############
@dataclass(frozen=True)
class InterleaveConfig:
    remainder: RemainderMode = RemainderMode.REPEAT
    min_words: int = 2

    def validate(self) -> None:
        if self.min_words < 2:
            raise ConfigError("interleaving needs at least two words", "interleave.min_words")


def sample_layout(n_words: int, rng: np.random.Generator, cfg: InterleaveConfig) -> list[tuple[Modality, int, int]]:
    """
    Choose (modality, first word, end word) runs covering a word range of the utterance.

    Words before a randomly placed first text span stay speech. Each text span of k words
    is followed by floor(k/2) (at least 1) speech words.
    """
    if n_words < cfg.min_words:
        raise SkipUtterance(f"{n_words} words")
    layout = []
    start = int(rng.integers(0, n_words))
    if start:
        layout.append((Modality.SPEECH, 0, start))
    cursor = start
    while cursor < n_words:
        k = int(rng.integers(1, n_words - cursor + 1))
        layout.append((Modality.TEXT, cursor, cursor + k))
        cursor += k
        if cursor >= n_words:
            break
        half = min(max(k // 2, 1), n_words - cursor)
        layout.append((Modality.SPEECH, cursor, cursor + half))
        cursor += half
        if cfg.remainder == RemainderMode.SINGLE:
            break
    return layout


def render_layout(utt: Utterance, layout: Sequence[tuple[Modality, int, int]], source: int | None = None) -> InterleavedSequence:
    """
    Materialize runs. A speech run over words [w0, w1) also keeps the silence before w0
    (and the leading/trailing silence of the utterance at the edges).
    """
    T, n = len(utt.speech_tokens), utt.n_words
    runs = []
    for modality, w0, w1 in layout:
        if modality == Modality.TEXT:
            words = tuple(utt.text_tokens[w0:w1])
            runs.append(Run(Modality.TEXT, words, (w0, w1), words=words))
            continue
        b = 0 if w0 == 0 else utt.alignment[w0 - 1].e + 1
        e = T - 1 if w1 == n else utt.alignment[w1 - 1].e
        runs.append(
            Run(
                Modality.SPEECH,
                tuple(utt.speech_tokens[b : e + 1]),
                (b, e + 1),
                utt.alignment.restrict(b, e),
                tuple(utt.text_tokens[w0:w1]),
            )
        )
    return InterleavedSequence(runs, source)


def interleave(
    utt: Utterance, rng: np.random.Generator, cfg: InterleaveConfig | None = None, source: int | None = None
) -> InterleavedSequence:
    """
    Raises:
        SkipUtterance: If the utterance has fewer than `cfg.min_words` words.
    """
    cfg = cfg or InterleaveConfig()
    return render_layout(utt, sample_layout(utt.n_words, rng, cfg), source)


###########
# Packing #
###########
@dataclass
class _Item:
    tokens: np.ndarray
    is_speech: np.ndarray
    is_marker: np.ndarray
    units: list[PlanUnit]

    def size(self, capacity: BudgetMode) -> int:
        return len(self.units) if capacity == BudgetMode.COMPUTE else len(self.tokens)

    def truncate(self, limit: int, capacity: BudgetMode) -> "_Item":
        if capacity == BudgetMode.COMPUTE:
            length = self.units[limit - 1].end + 1
            units = self.units[:limit]
        else:
            length = limit
            units = PatchPlan(self.units, len(self.tokens)).truncate(limit).units
        return _Item(self.tokens[:length], self.is_speech[:length], self.is_marker[:length], list(units))


def _plan_sequence(seq: InterleavedSequence, vocab: Vocabulary, patcher: Patcher) -> _Item:
    flat = seq.flatten(vocab)
    units, cursor = [], 0
    for run in seq.runs:
        units.append(PlanUnit(cursor, cursor, SegmentKind.TEXT))
        cursor += 1
        if run.modality == Modality.TEXT:
            units += [PlanUnit(cursor + i, cursor + i, SegmentKind.TEXT) for i in range(len(run))]
        elif len(run):
            segmentation: PatchSegmentation = patcher(len(run), run.spans, run.words)
            units += [PlanUnit(cursor + s.start, cursor + s.end, s.kind) for s in segmentation]
        cursor += len(run)
    return _Item(flat.tokens, flat.is_speech, flat.is_marker, units)


@dataclass
class PackedRow:
    tokens: np.ndarray
    is_speech: np.ndarray
    loss_mask: np.ndarray  # token at this position is a prediction target
    plan: PatchPlan
    is_marker: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def n_units(self) -> int:
        return self.plan.n_units

    def next_token_targets(self, ignore_index: int = -100) -> np.ndarray:
        """targets[t] = tokens[t + 1] when that token is a loss target, else ignore_index."""
        targets = np.full(self.length, ignore_index, dtype=np.int64)
        valid = self.loss_mask[1:]
        targets[:-1][valid] = self.tokens[1:][valid]
        return targets

    def counts(self, vocab: Vocabulary) -> dict[str, int]:
        speech = int(self.is_speech.sum())
        pads = int(np.count_nonzero(~self.is_speech & (self.tokens == vocab.pad_id)))
        seps = int(np.count_nonzero(~self.is_speech & (self.tokens == vocab.sep_id)))
        markers = int(np.count_nonzero(
            ~self.is_speech & ((self.tokens == vocab.text_marker) | (self.tokens == vocab.speech_marker))
        ))
        speech_units = len(self.plan.speech_units())
        return {
            "tokens": self.length,
            "units": self.n_units,
            "speech_tokens": speech,
            "speech_units": speech_units,
            "text_tokens": self.length - speech - pads - seps - markers,
            "markers": markers,
            "pads": pads,
        }


@dataclass
class PackedBatch:
    rows: list[PackedRow]
    consumed: int
    truncated: int = 0

    def token_matrix(self, pad_id: int) -> tuple[np.ndarray, np.ndarray]:
        """(tokens, loss mask) padded to the longest row."""
        width = max((r.length for r in self.rows), default=0)
        tokens = np.full((len(self.rows), width), pad_id, dtype=np.int64)
        mask = np.zeros((len(self.rows), width), dtype=bool)
        for i, row in enumerate(self.rows):
            tokens[i, : row.length] = row.tokens
            mask[i, : row.length] = row.loss_mask
        return tokens, mask

    def counts(self, vocab: Vocabulary) -> dict[str, int]:
        total: dict[str, int] = {}
        for row in self.rows:
            for key, value in row.counts(vocab).items():
                total[key] = total.get(key, 0) + value
        return total


def build_row(items: Sequence[_Item], L: int, vocab: Vocabulary, capacity: BudgetMode, predict_markers: bool) -> PackedRow:
    tokens, is_speech, is_marker, units = [], [], [], []
    cursor, used = 0, 0
    for i, item in enumerate(items):
        if i:
            tokens.append(np.array([vocab.sep_id], dtype=np.int64))
            is_speech.append(np.zeros(1, dtype=bool))
            is_marker.append(np.zeros(1, dtype=bool))
            units.append(PlanUnit(cursor, cursor, SegmentKind.TEXT))
            cursor += 1
            used += 1
        tokens.append(item.tokens)
        is_speech.append(item.is_speech)
        is_marker.append(item.is_marker)
        units += [PlanUnit(u.start + cursor, u.end + cursor, u.kind) for u in item.units]
        cursor += len(item.tokens)
        used += item.size(capacity)
    n_pad = max(L - used, 0)
    if n_pad:
        tokens.append(np.full(n_pad, vocab.pad_id, dtype=np.int64))
        is_speech.append(np.zeros(n_pad, dtype=bool))
        is_marker.append(np.zeros(n_pad, dtype=bool))
        units += [PlanUnit(cursor + i, cursor + i, SegmentKind.TEXT) for i in range(n_pad)]
        cursor += n_pad
    row_tokens = np.concatenate(tokens)
    row_speech = np.concatenate(is_speech)
    row_marker = np.concatenate(is_marker)
    specials = ~row_speech & np.isin(row_tokens, [vocab.pad_id, vocab.sep_id])
    loss_mask = ~specials & (predict_markers | ~row_marker)
    return PackedRow(row_tokens, row_speech, loss_mask, PatchPlan(units, cursor), row_marker)


def pack_batch(
    seqs: Sequence[InterleavedSequence],
    L: int,
    *,
    patchers: Patcher | Sequence[Patcher],
    vocab: Vocabulary | None = None,
    capacity: BudgetMode = BudgetMode.DATA,
    max_rows: int | None = None,
    predict_markers: bool = False,
) -> PackedBatch:
    """
    Greedily pack sequences into rows of capacity L.

    Capacity counts global units (COMPUTE) or tokens (DATA); separators and padding
    count one of each. A sequence longer than L is truncated into its own row and
    counted in `truncated`. Packing stops once `max_rows` rows are full; `consumed`
    says how many leading sequences made it into the batch.

    Raises:
        ConfigError: If L < 8.
    """
    if L < 8:
        raise ConfigError(f"context length must be >= 8, got {L}", "train.row_units")
    vocab = vocab or Vocabulary.text()
    if isinstance(patchers, Patcher):
        patchers = [patchers] * len(seqs)
    rows: list[list[_Item]] = []
    current: list[_Item] = []
    used, consumed, truncated = 0, 0, 0
    for i, seq in enumerate(seqs):
        item = _plan_sequence(seq, vocab, patchers[i])
        size = item.size(capacity)
        if current and used + 1 + size > L:
            rows.append(current)
            current, used = [], 0
            if max_rows is not None and len(rows) >= max_rows:
                break
        if size > L:
            logger.warning(f"Sequence {i} of size {size} truncated to the row capacity {L}")
            item = item.truncate(L, capacity)
            size = L
            truncated += 1
        used += size + (1 if current else 0)
        current.append(item)
        consumed = i + 1
    if current and (max_rows is None or len(rows) < max_rows):
        rows.append(current)
    return PackedBatch(
        [build_row(items, L, vocab, capacity, predict_markers) for items in rows], consumed, truncated
    )


def sequence_row(
    seq: InterleavedSequence, patcher: Patcher, vocab: Vocabulary | None = None, predict_markers: bool = False
) -> PackedRow:
    """A single unpadded row for scoring and generation."""
    vocab = vocab or Vocabulary.text()
    return build_row([_plan_sequence(seq, vocab, patcher)], 0, vocab, BudgetMode.DATA, predict_markers)
