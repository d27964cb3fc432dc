"""
Synthetic paired speech/text corpora with ground-truth alignments.

A `SynthLanguage` fixes, for one `SynthConfig`, a closed word inventory, a bigram
successor table over it, and for every word a short list of preferred speech tokens.
Utterances are sampled from that language: each word emits a geometric-length run of
frames drawn mostly from its preferred tokens, and silence runs (drawn from a small set
of silence tokens) may precede, separate and follow words.

All sampling decisions are integer-only so corpora are reproducible across platforms.
"""

import gzip
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from lst.errors import AlignmentError, ConfigError, CorpusFormatError, VocabularyError
from lst.utils import substream
from lst.utils.enums import Modality

logger = logging.getLogger(__name__)

SPEECH_VOCAB_SIZE = 501
TEXT_VOCAB_SIZE = 512
N_TEXT_SPECIALS = 4
_UINT32 = 2**32


##############
# Vocabulary #
##############
@dataclass(frozen=True)
class Vocabulary:
    """
    Token id space of one modality.

    Text vocabularies reserve their last four ids for pad, the text marker `<t>`, the
    speech marker `<s>` and the sequence separator; content ids are [0, content_size).
    Speech vocabularies have no specials.
    """

    kind: Modality
    size: int
    pad_id: int | None = None
    text_marker: int | None = None
    speech_marker: int | None = None
    sep_id: int | None = None

    def __post_init__(self):
        if self.size <= 0:
            raise ConfigError(f"vocabulary size must be positive, got {self.size}", "vocab.size")
        for name in ("pad_id", "text_marker", "speech_marker", "sep_id"):
            value = getattr(self, name)
            if value is not None and not (self.content_size <= value < self.size):
                raise ConfigError(f"special id {value} overlaps content ids", f"vocab.{name}")

    @classmethod
    def text(cls, size: int = TEXT_VOCAB_SIZE) -> "Vocabulary":
        if size <= N_TEXT_SPECIALS:
            raise ConfigError(f"text vocabulary needs more than {N_TEXT_SPECIALS} ids", "vocab.size")
        return cls(Modality.TEXT, size, size - 4, size - 3, size - 2, size - 1)

    @classmethod
    def speech(cls, size: int = SPEECH_VOCAB_SIZE) -> "Vocabulary":
        return cls(Modality.SPEECH, size)

    @property
    def specials(self) -> tuple[int, ...]:
        return tuple(
            i for i in (self.pad_id, self.text_marker, self.speech_marker, self.sep_id) if i is not None
        )

    @property
    def content_size(self) -> int:
        return self.size - len(
            [i for i in (self.pad_id, self.text_marker, self.speech_marker, self.sep_id) if i is not None]
        )

    def is_special(self, token: int) -> bool:
        return token in self.specials

    def marker_for(self, modality: Modality) -> int:
        if self.kind != Modality.TEXT:
            raise VocabularyError("markers live in the text vocabulary")
        return self.text_marker if modality == Modality.TEXT else self.speech_marker


def tokenize_text(words: Sequence[int], vocab: Vocabulary | None = None) -> list[int]:
    """Map synthetic word ids to text token ids (one token per word)."""
    vocab = vocab or Vocabulary.text()
    tokens = []
    for word in words:
        if not 0 <= int(word) < vocab.content_size:
            raise VocabularyError(f"unknown word {word} (text vocabulary has {vocab.content_size} words)")
        tokens.append(int(word))
    return tokens


def detokenize(tokens: Sequence[int], vocab: Vocabulary | None = None) -> list[int]:
    vocab = vocab or Vocabulary.text()
    words = []
    for token in tokens:
        if not 0 <= int(token) < vocab.content_size:
            raise VocabularyError(f"token {token} is not a word")
        words.append(int(token))
    return words


##############
# Alignments #
##############
class AlignmentSpan(NamedTuple):
    unit: int
    b: int
    e: int  # inclusive

    @property
    def length(self) -> int:
        return self.e - self.b + 1


class AlignmentSpanList:
    """Sorted, non-overlapping (unit, begin, end) word spans over a run of frames."""

    def __init__(self, spans: Iterable[tuple[int, int, int]] = ()):
        self.spans = [AlignmentSpan(int(u), int(b), int(e)) for u, b, e in spans]

    def __iter__(self) -> Iterator[AlignmentSpan]:
        return iter(self.spans)

    def __len__(self) -> int:
        return len(self.spans)

    def __getitem__(self, index: int) -> AlignmentSpan:
        return self.spans[index]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, AlignmentSpanList) and self.spans == other.spans

    def __repr__(self) -> str:
        return f"AlignmentSpanList({[tuple(s) for s in self.spans]})"

    def validate(self, T: int) -> None:
        """
        Raises:
            AlignmentError: If a span is empty, unsorted, overlapping or outside [0, T).
        """
        previous_end = -1
        for span in self.spans:
            if span.b > span.e:
                raise AlignmentError(f"span {tuple(span)} has begin after end")
            if span.b <= previous_end:
                raise AlignmentError(f"span {tuple(span)} overlaps or precedes the previous span")
            if span.b < 0 or span.e >= T:
                raise AlignmentError(f"span {tuple(span)} exceeds a run of {T} frames")
            previous_end = span.e

    def silence_gaps(self, T: int) -> list[tuple[int, int]]:
        """Maximal inclusive frame ranges of [0, T) not covered by any span."""
        gaps, cursor = [], 0
        for span in self.spans:
            if span.b > cursor:
                gaps.append((cursor, span.b - 1))
            cursor = span.e + 1
        if cursor < T:
            gaps.append((cursor, T - 1))
        return gaps

    def restrict(self, b: int, e: int) -> "AlignmentSpanList":
        """Spans lying fully inside [b, e], re-indexed so frame b becomes 0."""
        return AlignmentSpanList((s.unit, s.b - b, s.e - b) for s in self.spans if s.b >= b and s.e <= e)

    def to_list(self) -> list[list[int]]:
        return [list(s) for s in self.spans]


@dataclass
class Utterance:
    text_tokens: list[int]
    speech_tokens: list[int]
    alignment: AlignmentSpanList

    @property
    def n_words(self) -> int:
        return len(self.text_tokens)

    def validate(self) -> None:
        self.alignment.validate(len(self.speech_tokens))
        units = [s.unit for s in self.alignment]
        if units != list(range(self.n_words)):
            raise AlignmentError(f"every word needs exactly one span, got units {units}")

    def word_frames(self, k: int) -> list[int]:
        span = self.alignment[k]
        return self.speech_tokens[span.b : span.e + 1]

    def to_record(self) -> dict:
        return {
            "text_tokens": self.text_tokens,
            "speech_tokens": self.speech_tokens,
            "spans": self.alignment.to_list(),
        }

    @classmethod
    def from_record(cls, record: dict) -> "Utterance":
        try:
            utterance = cls(
                text_tokens=[int(t) for t in record["text_tokens"]],
                speech_tokens=[int(t) for t in record["speech_tokens"]],
                alignment=AlignmentSpanList(record["spans"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusFormatError(f"invalid utterance record: {e}") from e
        utterance.validate()
        return utterance


#############
# Synthesis #
#############
@dataclass(frozen=True)
class SynthConfig:
    n_word_types: int = 256
    speech_vocab: int = SPEECH_VOCAB_SIZE
    mean_word_frames: float = 5.8
    mean_sil_frames: float = 3.7
    sil_prob: float = 0.3
    fidelity: float = 0.8
    tokens_per_word: int = 3
    silence_tokens: int = 4
    successors: int = 4
    subword_prob: float = 0.16
    min_words: int = 8
    max_words: int = 24
    language_seed: int = 1234

    def validate(self) -> None:
        if self.mean_word_frames < 1:
            raise ConfigError("mean word length must be at least one frame", "corpus.mean_word_frames")
        if self.mean_sil_frames < 1:
            raise ConfigError("mean silence length must be at least one frame", "corpus.mean_sil_frames")
        for name in ("sil_prob", "fidelity", "subword_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError("must be a probability", f"corpus.{name}")
        if self.n_word_types < 2:
            raise ConfigError("need at least two word types", "corpus.n_word_types")
        if self.silence_tokens < 1 or self.tokens_per_word < 1:
            raise ConfigError("token sets must be non-empty", "corpus.tokens_per_word")
        if self.silence_tokens + self.tokens_per_word > self.speech_vocab:
            raise ConfigError("speech vocabulary too small for the token sets", "corpus.speech_vocab")
        if not 1 <= self.successors <= self.n_word_types:
            raise ConfigError(f"must be in [1, {self.n_word_types}]", "corpus.successors")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError("need 1 <= min_words <= max_words", "corpus.min_words")


def _threshold(probability: float) -> int:
    return int(round(probability * _UINT32))


def _bernoulli(rng: np.random.Generator, threshold: int) -> bool:
    return int(rng.integers(0, _UINT32, dtype=np.uint64)) < threshold


def _geometric(rng: np.random.Generator, threshold: int) -> int:
    """Trials up to and including the first success; mean is 2**32 / threshold."""
    trials = 0
    while True:
        draws = rng.integers(0, _UINT32, size=16, dtype=np.uint64)
        hits = np.flatnonzero(draws < threshold)
        if hits.size:
            return trials + int(hits[0]) + 1
        trials += 16


class SynthLanguage:
    """Word inventory, bigram successors and per-word preferred speech tokens."""

    def __init__(self, cfg: SynthConfig):
        cfg.validate()
        self.cfg = cfg
        rng = substream(cfg.language_seed, "language")
        self.silence_tokens = np.arange(cfg.silence_tokens, dtype=np.int64)
        content = np.arange(cfg.silence_tokens, cfg.speech_vocab, dtype=np.int64)
        self.preferred = np.stack(
            [rng.choice(content, size=cfg.tokens_per_word, replace=False) for _ in range(cfg.n_word_types)]
        )
        self.successor_table = np.stack(
            [rng.choice(cfg.n_word_types, size=cfg.successors, replace=False) for _ in range(cfg.n_word_types)]
        )
        self.content_tokens = content
        self._word_threshold = _threshold(1.0 / cfg.mean_word_frames)
        self._sil_threshold = _threshold(1.0 / cfg.mean_sil_frames)
        self._sil_prob = _threshold(cfg.sil_prob)
        self._fidelity = _threshold(cfg.fidelity)

    def sample_words(self, rng: np.random.Generator, n_words: int, first: int | None = None) -> list[int]:
        word = int(rng.integers(0, self.cfg.n_word_types)) if first is None else first
        words = [word]
        for _ in range(n_words - 1):
            word = int(self.successor_table[word, rng.integers(0, self.cfg.successors)])
            words.append(word)
        return words

    def word_run(self, rng: np.random.Generator, word: int) -> list[int]:
        length = _geometric(rng, self._word_threshold)
        preferred = self.preferred[word]
        k = len(preferred)
        frames = []
        for j in range(length):
            if _bernoulli(rng, self._fidelity):
                frames.append(int(preferred[(j * k) // length]))
            else:
                frames.append(int(self.content_tokens[rng.integers(0, len(self.content_tokens))]))
        return frames

    def silence_run(self, rng: np.random.Generator) -> list[int]:
        length = _geometric(rng, self._sil_threshold)
        return [int(t) for t in self.silence_tokens[rng.integers(0, len(self.silence_tokens), size=length)]]

    def maybe_silence(self, rng: np.random.Generator) -> list[int]:
        return self.silence_run(rng) if _bernoulli(rng, self._sil_prob) else []

    def render(self, rng: np.random.Generator, words: Sequence[int]) -> Utterance:
        speech: list[int] = self.maybe_silence(rng)
        spans = []
        for k, word in enumerate(words):
            if k:
                speech.extend(self.maybe_silence(rng))
            run = self.word_run(rng, word)
            spans.append((k, len(speech), len(speech) + len(run) - 1))
            speech.extend(run)
        speech.extend(self.maybe_silence(rng))
        return Utterance(tokenize_text(words), speech, AlignmentSpanList(spans))


@lru_cache(maxsize=8)
def synth_language(cfg: SynthConfig) -> SynthLanguage:
    return SynthLanguage(cfg)


def _render(seed: int, stream: str, index: int, n_words: int, cfg: SynthConfig) -> Utterance:
    language = synth_language(cfg)
    rng = substream(seed, stream, index)
    return language.render(rng, language.sample_words(rng, n_words))


def synth_utterance(seed: int, n_words: int, cfg: SynthConfig | None = None, *, index: int = 0) -> Utterance:
    """
    Sample one utterance.

    Args:
        seed: Root seed; together with `index` it fully determines the utterance.
        n_words: Number of words (>= 1).
        cfg: Synthesis parameters.
        index: Utterance index within a corpus.

    Raises:
        ConfigError: On degenerate configs or n_words < 1.
    """
    cfg = cfg or SynthConfig()
    if n_words < 1:
        raise ConfigError(f"need at least one word, got {n_words}", "n_words")
    return _render(seed, "utterance", index, n_words, cfg)


def synth_corpus(
    n_utterances: int, seed: int, cfg: SynthConfig | None = None, stream: str = "utterance"
) -> list[Utterance]:
    """Sample a corpus; held-out sets use a different `stream` label with the same seed."""
    cfg = cfg or SynthConfig()
    cfg.validate()
    lengths = substream(seed, f"{stream}-lengths").integers(cfg.min_words, cfg.max_words + 1, size=n_utterances)
    corpus = [_render(seed, stream, i, int(n), cfg) for i, n in enumerate(lengths)]
    logger.info(f"Synthesized {n_utterances} utterances ({sum(len(u.speech_tokens) for u in corpus)} speech tokens)")
    return corpus


def synth_subword_map(cfg: SynthConfig | None = None) -> dict[int, int]:
    """Number of speech-BPE-style subwords (1 or 2) per word type."""
    cfg = cfg or SynthConfig()
    rng = substream(cfg.language_seed, "subwords")
    threshold = _threshold(cfg.subword_prob)
    return {w: 2 if _bernoulli(rng, threshold) else 1 for w in range(cfg.n_word_types)}


@dataclass
class CorpusStats:
    utterances: int = 0
    words: int = 0
    speech_tokens: int = 0
    word_frames: int = 0
    silence_runs: int = 0
    silence_frames: int = 0
    word_lengths: list[int] = field(default_factory=list, repr=False)

    @property
    def mean_word_frames(self) -> float:
        return self.word_frames / self.words if self.words else 0.0

    @property
    def mean_silence_frames(self) -> float:
        return self.silence_frames / self.silence_runs if self.silence_runs else 0.0


def corpus_stats(utterances: Iterable[Utterance]) -> CorpusStats:
    stats = CorpusStats()
    for utt in utterances:
        T = len(utt.speech_tokens)
        stats.utterances += 1
        stats.words += utt.n_words
        stats.speech_tokens += T
        for span in utt.alignment:
            stats.word_frames += span.length
            stats.word_lengths.append(span.length)
        for b, e in utt.alignment.silence_gaps(T):
            stats.silence_runs += 1
            stats.silence_frames += e - b + 1
    return stats


#######
# I/O #
#######
def open_ndjson(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def write_corpus(path: str | Path, utterances: Iterable[Utterance]) -> int:
    """Write newline-delimited JSON (gzip when the name ends in .gz). Returns the count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open_ndjson(path, "w") as f:
        for utt in utterances:
            f.write(json.dumps(utt.to_record()) + "\n")
            count += 1
    return count


def read_corpus(path: str | Path) -> list[Utterance]:
    path = Path(path)
    utterances = []
    try:
        with open_ndjson(path, "r") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    utterances.append(Utterance.from_record(json.loads(line)))
                except json.JSONDecodeError as e:
                    raise CorpusFormatError(f"{path}:{line_no}: {e}") from e
    except OSError as e:
        raise CorpusFormatError(f"cannot read corpus {path}: {e}") from e
    return utterances
