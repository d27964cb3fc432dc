"""
Speech-token patch segmentation.

A `PatchSegmentation` re-tiles [0, T) of one contiguous speech run into ordered,
non-empty, inclusive [start, end] segments. Segmentations are always computed per
speech run, so patches never cross a modality boundary. A `PatchPlan` lifts the
per-run segmentations of a packed row to row positions, adding singleton units for
text positions.
"""

import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from lst.corpus import AlignmentSpanList
from lst.errors import AlignmentError, AlignmentMissingError, ConfigError, ContractError, SplitError
from lst.utils.enums import CurriculumShape, PatchingMode, PatchStrategy, SegmentKind, SilenceMode

logger = logging.getLogger(__name__)


class Segment(NamedTuple):
    start: int
    end: int  # inclusive
    kind: SegmentKind

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class PatchSegmentation:
    T: int
    segments: tuple[Segment, ...]

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments)

    def __len__(self) -> int:
        return len(self.segments)

    def __getitem__(self, index: int) -> Segment:
        return self.segments[index]

    @property
    def ranges(self) -> list[tuple[int, int]]:
        return [(s.start, s.end) for s in self.segments]

    @property
    def lengths(self) -> list[int]:
        return [s.length for s in self.segments]

    def validate(self) -> None:
        """
        Raises:
            ContractError: If the segments do not tile [0, T) in order.
        """
        cursor = 0
        for segment in self.segments:
            if segment.start != cursor or segment.end < segment.start:
                raise ContractError(f"segment {tuple(segment[:2])} breaks the tiling at frame {cursor}")
            cursor = segment.end + 1
        if cursor != self.T:
            raise ContractError(f"segments cover [0, {cursor}) instead of [0, {self.T})")


def static_patch(T: int, p: int) -> PatchSegmentation:
    if p < 1:
        raise ConfigError(f"patch size must be >= 1, got {p}", "patch_size")
    if T < 0:
        raise ConfigError(f"run length must be >= 0, got {T}", "T")
    return PatchSegmentation(
        T, tuple(Segment(i, min(i + p - 1, T - 1), SegmentKind.STATIC) for i in range(0, T, p))
    )


def _word_and_silence(T: int, spans: AlignmentSpanList) -> list[Segment]:
    spans.validate(T)
    pieces = [Segment(s.b, s.e, SegmentKind.WORD) for s in spans]
    pieces += [Segment(b, e, SegmentKind.SILENCE) for b, e in spans.silence_gaps(T)]
    return sorted(pieces)


def aligned_patch(
    T: int, spans: AlignmentSpanList, silence_mode: SilenceMode = SilenceMode.SEPARATE
) -> PatchSegmentation:
    """
    One patch per word span. Silence gaps are their own patches (separate) or are
    absorbed into the following word (merged); trailing silence always stands alone.

    Raises:
        AlignmentError: If a span is invalid for a run of T frames.
    """
    pieces = _word_and_silence(T, spans)
    if silence_mode == SilenceMode.SEPARATE:
        return PatchSegmentation(T, tuple(pieces))
    merged: list[Segment] = []
    pending: int | None = None
    for piece in pieces:
        if piece.kind == SegmentKind.SILENCE:
            pending = piece.start if pending is None else pending
            continue
        if pending is not None:
            merged.append(Segment(pending, piece.end, SegmentKind.MERGED))
            pending = None
        else:
            merged.append(piece)
    if pending is not None:
        merged.append(Segment(pending, T - 1, SegmentKind.SILENCE))
    return PatchSegmentation(T, tuple(merged))


def split_span(b: int, e: int, n: int) -> list[tuple[int, int]]:
    """Split [b, e] into n contiguous parts, sizes as equal as possible, remainder to the left."""
    length = e - b + 1
    if n < 1 or n > length:
        raise SplitError(f"cannot split a {length}-frame span into {n} subwords")
    size, extra = divmod(length, n)
    parts, cursor = [], b
    for i in range(n):
        width = size + (1 if i < extra else 0)
        parts.append((cursor, cursor + width - 1))
        cursor += width
    return parts


def bpe_aligned_patch(T: int, spans: AlignmentSpanList, word_to_subwords: Mapping[int, int]) -> PatchSegmentation:
    """
    Split every word span into its subwords; silence stays separate.

    Args:
        word_to_subwords: Subword count per span unit (missing units count as one).

    Raises:
        SplitError: If a span has fewer frames than subwords.
    """
    pieces = []
    for piece, unit in _pieces_with_units(T, spans):
        if piece.kind == SegmentKind.SILENCE:
            pieces.append(piece)
            continue
        n = int(word_to_subwords.get(unit, 1))
        kind = SegmentKind.WORD if n == 1 else SegmentKind.SUBWORD
        pieces += [Segment(b, e, kind) for b, e in split_span(piece.start, piece.end, n)]
    return PatchSegmentation(T, tuple(pieces))


def _pieces_with_units(T: int, spans: AlignmentSpanList) -> list[tuple[Segment, int | None]]:
    units = {s.b: s.unit for s in spans}
    return [(piece, units.get(piece.start)) for piece in _word_and_silence(T, spans)]


def singleton_patch(T: int) -> PatchSegmentation:
    return PatchSegmentation(T, tuple(Segment(i, i, SegmentKind.TOKEN) for i in range(T)))


##############
# Curriculum #
##############
@dataclass(frozen=True)
class CurriculumSchedule:
    tau1: int
    tau2: int
    shape: CurriculumShape = CurriculumShape.LINEAR

    def __post_init__(self):
        if not 0 <= self.tau1 < self.tau2:
            raise ConfigError(f"need 0 <= tau1 < tau2, got {self.tau1}, {self.tau2}", "train.curriculum")


def curriculum_prob(u: int, sched: CurriculumSchedule) -> float:
    """Probability of aligned patching at training step u."""
    if u < sched.tau1:
        return 1.0
    if u >= sched.tau2:
        return 0.0
    if sched.shape == CurriculumShape.THREE_PHASE:
        return 0.5
    return 1.0 - (u - sched.tau1) / (sched.tau2 - sched.tau1)


def select_patching(
    u: int,
    rng: np.random.Generator,
    mode: PatchingMode,
    sched: CurriculumSchedule | None = None,
    *,
    has_spans: bool = True,
    mixed_prob: float = 0.5,
    aligned_strategy: PatchStrategy = PatchStrategy.ALIGNED,
) -> PatchStrategy:
    """
    Choose the concrete strategy for one sequence. Exactly one draw is taken from `rng`
    for mixed and curriculum modes.

    Raises:
        AlignmentMissingError: If an alignment-based strategy is needed but no spans exist.
    """
    match mode:
        case PatchingMode.STATIC:
            return PatchStrategy.STATIC
        case PatchingMode.ALIGNED:
            strategy = PatchStrategy.ALIGNED
        case PatchingMode.BPE_ALIGNED:
            strategy = PatchStrategy.BPE_ALIGNED
        case PatchingMode.MIXED:
            strategy = aligned_strategy if rng.random() < mixed_prob else PatchStrategy.STATIC
        case PatchingMode.CURRICULUM:
            if sched is None:
                raise ConfigError("curriculum patching needs a schedule", "train.curriculum")
            strategy = aligned_strategy if rng.random() < curriculum_prob(u, sched) else PatchStrategy.STATIC
        case _:
            raise ConfigError(f"unknown patching mode {mode}", "train.patching")
    if strategy != PatchStrategy.STATIC and not has_spans:
        raise AlignmentMissingError(f"{mode.value} patching needs alignment spans")
    return strategy


_clamped_words: set[int] = set()
_clamped_lock = threading.Lock()


def _warn_clamped(word: int, subwords: int, frames: int) -> None:
    """Log once per word type that its subword count was cut to its span length."""
    with _clamped_lock:
        if word in _clamped_words:
            return
        _clamped_words.add(word)
    logger.warning(f"Word {word} has {subwords} subwords but a {frames}-frame span; using {frames} patches")


@dataclass
class Patcher:
    """
    Per-run segmentation policy.

    `strategy` fixes the segmentation; `PatchStrategy.SINGLETON` is the baseline
    "no patching" policy where every token is a unit. A BPE-aligned word whose span is
    shorter than its subword count gets one patch per frame, or a `SplitError` when
    `strict` is set.
    """

    strategy: PatchStrategy = PatchStrategy.STATIC
    patch_size: int = 4
    silence_mode: SilenceMode = SilenceMode.SEPARATE
    subword_map: Mapping[int, int] = field(default_factory=dict)
    strict: bool = False

    def __call__(self, T: int, spans: AlignmentSpanList | None = None, words: Sequence[int] = ()) -> PatchSegmentation:
        match self.strategy:
            case PatchStrategy.STATIC:
                return static_patch(T, self.patch_size)
            case PatchStrategy.SINGLETON:
                return singleton_patch(T)
            case PatchStrategy.ALIGNED:
                if spans is None:
                    raise AlignmentMissingError("aligned patching needs alignment spans")
                return aligned_patch(T, spans, self.silence_mode)
            case PatchStrategy.BPE_ALIGNED:
                if spans is None:
                    raise AlignmentMissingError("BPE-aligned patching needs alignment spans")
                counts = {}
                for span, word in zip(spans, words):
                    n = int(self.subword_map.get(word, 1))
                    if n > span.length:
                        if self.strict:
                            raise SplitError(f"word {word} has {n} subwords but spans {span.length} frame(s)")
                        _warn_clamped(word, n, span.length)
                        n = span.length
                    counts[span.unit] = n
                return bpe_aligned_patch(T, spans, counts)
        raise ConfigError(f"unknown strategy {self.strategy}", "patching")


#############
# Row plans #
#############
class PlanUnit(NamedTuple):
    start: int
    end: int  # inclusive row positions
    kind: SegmentKind


@dataclass
class PatchPlan:
    """
    Units of one packed row in timeline order. Speech patches cover their token
    positions; every text position (content, marker, separator, pad) is a singleton
    unit of kind TEXT.
    """

    units: list[PlanUnit]
    length: int

    def __post_init__(self):
        self.unit_of = np.empty(self.length, dtype=np.int64)
        cursor = 0
        for i, unit in enumerate(self.units):
            if unit.start != cursor or unit.end < unit.start:
                raise ContractError(f"plan unit {i} does not continue the tiling at position {cursor}")
            self.unit_of[unit.start : unit.end + 1] = i
            cursor = unit.end + 1
        if cursor != self.length:
            raise ContractError(f"plan covers {cursor} of {self.length} positions")

    def __len__(self) -> int:
        return len(self.units)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def starts(self) -> np.ndarray:
        return np.array([u.start for u in self.units], dtype=np.int64)

    @property
    def ends(self) -> np.ndarray:
        return np.array([u.end for u in self.units], dtype=np.int64)

    def is_text_unit(self) -> np.ndarray:
        return np.array([u.kind == SegmentKind.TEXT for u in self.units], dtype=bool)

    def speech_units(self) -> list[int]:
        return [i for i, u in enumerate(self.units) if u.kind != SegmentKind.TEXT]

    def truncate(self, length: int) -> "PatchPlan":
        """Keep positions [0, length); a unit cut by the boundary is shortened."""
        kept = []
        for unit in self.units:
            if unit.start >= length:
                break
            kept.append(PlanUnit(unit.start, min(unit.end, length - 1), unit.kind))
        return PatchPlan(kept, length)

    def mean_patch_size(self) -> float:
        sizes = [u.end - u.start + 1 for u in self.units if u.kind != SegmentKind.TEXT]
        return float(np.mean(sizes)) if sizes else math.nan


##############
# Statistics #
##############
def patch_stats(
    runs: Sequence[tuple[int, AlignmentSpanList, Sequence[int]]],
    patch_size: int = 4,
    subword_map: Mapping[int, int] | None = None,
    *,
    modes: Sequence[PatchStrategy] | None = None,
) -> dict[str, dict[str, Any]]:
    """
    Patch statistics over whole speech runs (length, spans, word ids) for aligned
    patching with separate and merged silence, static patching, and BPE-aligned
    patching when a subword map is given. `modes` restricts the report to those
    strategies; singleton segmentation is reported only when asked for.

    Every entry holds the patch count, mean size overall and per segment kind,
    `segments_per_run` (histogram: segments in a run -> runs) and `sizes`
    (histogram: patch length -> patches).
    """
    policies = {
        "aligned-separate": Patcher(PatchStrategy.ALIGNED, silence_mode=SilenceMode.SEPARATE),
        "aligned-merged": Patcher(PatchStrategy.ALIGNED, silence_mode=SilenceMode.MERGED),
        f"static-{patch_size}": Patcher(PatchStrategy.STATIC, patch_size),
    }
    if subword_map:
        policies["bpe-aligned"] = Patcher(PatchStrategy.BPE_ALIGNED, subword_map=subword_map)
    if modes is not None:
        if PatchStrategy.SINGLETON in modes:
            policies["singleton"] = Patcher(PatchStrategy.SINGLETON)
        if PatchStrategy.BPE_ALIGNED in modes and not subword_map:
            raise ConfigError("BPE-aligned statistics need a subword map", "patching")
        policies = {name: patcher for name, patcher in policies.items() if patcher.strategy in modes}
    report = {}
    for name, patcher in policies.items():
        sizes: dict[str, list[int]] = {}
        per_run: Counter[int] = Counter()
        for T, spans, words in runs:
            segmentation = patcher(T, spans, words)
            per_run[len(segmentation)] += 1
            for segment in segmentation:
                sizes.setdefault(segment.kind.value, []).append(segment.length)
        every = [n for values in sizes.values() for n in values]
        entry: dict[str, Any] = {"patches": float(len(every)), "overall": float(np.mean(every)) if every else math.nan}
        for kind, values in sorted(sizes.items()):
            entry[kind] = float(np.mean(values))
        entry["segments_per_run"] = {str(k): per_run[k] for k in sorted(per_run)}
        length_counts = Counter(every)
        entry["sizes"] = {str(k): length_counts[k] for k in sorted(length_counts)}
        report[name] = entry
    return report
