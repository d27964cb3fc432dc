"""
Multiple-choice likelihood evaluation, patch-embedding cluster statistics and
multi-seed stability reports.

A record holds one prompt and 2 or 4 candidate continuations of one modality. Every
candidate is appended to the same prompt, scored by the summed negative
log-likelihood of its tokens, and the lowest-scoring candidate is the prediction.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, NamedTuple, Sequence

import numpy as np
from sklearn.metrics import silhouette_score

from lst.corpus import AlignmentSpanList, Utterance, open_ndjson
from lst.errors import (
    ConfigError,
    ContextOverflowError,
    ContractError,
    CorpusFormatError,
    EmptyEvalError,
)
from lst.interleave import InterleavedSequence, Run, render_layout, sequence_row
from lst.model import LatentSpeechTextTransformer, SpeechLLM, SpeechTextModel
from lst.tensor import no_grad
from lst.utils import substream
from lst.utils.enums import Modality, Normalization

logger = logging.getLogger(__name__)

STORY = "story"
CLOZE = "cloze"
REPORT_FIELDS = ["metric", "mean", "std", "n_seeds"]


##########
# Config #
##########
@dataclass
class EvalConfig:
    normalization: Normalization = Normalization.SUM
    workers: int = 1
    story_records: int = 100
    cloze_records: int = 100
    heldout_utterances: int = 200
    stream: str = "heldout"

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError("must be >= 1", "eval.workers")
        if self.story_records < 0 or self.cloze_records < 0:
            raise ConfigError("record counts must be >= 0", "eval.story_records")
        if self.heldout_utterances < 5:
            raise ConfigError("need at least 5 held-out utterances to draw distractors", "eval.heldout_utterances")
        if self.stream == "utterance":
            raise ConfigError("held-out stream must differ from the training stream", "eval.stream")


###########
# Records #
###########
@dataclass
class EvalRecord:
    prompt: InterleavedSequence
    candidates: list[InterleavedSequence]
    gold: int
    modality: Modality
    format: str = STORY

    def validate(self) -> None:
        if len(self.candidates) < 2:
            raise ContractError(f"a record needs at least two candidates, got {len(self.candidates)}")
        if not 0 <= self.gold < len(self.candidates):
            raise ContractError(f"gold index {self.gold} out of range for {len(self.candidates)} candidates")
        for candidate in self.candidates:
            if any(run.modality != self.modality for run in candidate.runs):
                raise ContractError(f"candidate modality differs from record modality {self.modality.value}")


def _run_record(run: Run) -> dict[str, Any]:
    record = {"modality": run.modality.value, "tokens": list(run.tokens), "origin": list(run.origin)}
    if run.spans is not None:
        record["spans"] = run.spans.to_list()
    if run.words:
        record["words"] = list(run.words)
    return record


def _run_from_record(record: dict[str, Any]) -> Run:
    spans = record.get("spans")
    return Run(
        Modality(record["modality"]),
        tuple(int(t) for t in record["tokens"]),
        tuple(record.get("origin", (0, len(record["tokens"])))),
        AlignmentSpanList(spans) if spans is not None else None,
        tuple(int(w) for w in record.get("words", ())),
    )


def _sequence_record(seq: InterleavedSequence) -> list[dict[str, Any]]:
    return [_run_record(run) for run in seq.runs]


def _sequence_from_record(runs: list[dict[str, Any]]) -> InterleavedSequence:
    return InterleavedSequence([_run_from_record(r) for r in runs])


def write_eval_set(path: str | Path, records: Iterable[EvalRecord]) -> int:
    """Newline-delimited JSON {prompt, candidates, gold, modality, format}; gzip for `.gz`."""
    n = 0
    with open_ndjson(Path(path), "w") as f:
        for record in records:
            f.write(
                json.dumps(
                    {
                        "prompt": _sequence_record(record.prompt),
                        "candidates": [_sequence_record(c) for c in record.candidates],
                        "gold": record.gold,
                        "modality": record.modality.value,
                        "format": record.format,
                    }
                )
                + "\n"
            )
            n += 1
    return n


def read_eval_set(path: str | Path) -> list[EvalRecord]:
    """
    Raises:
        CorpusFormatError: On unreadable files or malformed records.
    """
    records = []
    try:
        with open_ndjson(Path(path), "r") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                    record = EvalRecord(
                        prompt=_sequence_from_record(raw["prompt"]),
                        candidates=[_sequence_from_record(c) for c in raw["candidates"]],
                        gold=int(raw["gold"]),
                        modality=Modality(raw["modality"]),
                        format=raw.get("format", STORY),
                    )
                    record.validate()
                except (KeyError, TypeError, ValueError, ContractError) as e:
                    raise CorpusFormatError(f"{path}:{line_no}: invalid eval record: {e}") from e
                records.append(record)
    except OSError as e:
        raise CorpusFormatError(f"cannot read eval set {path}: {e}") from e
    return records


################
# Construction #
################
def _piece(utt: Utterance, modality: Modality, w0: int, w1: int) -> InterleavedSequence:
    return render_layout(utt, [(modality, w0, w1)])


def _continuation_words(n_words: int, fmt: str) -> int:
    return 1 if fmt == CLOZE else max(2, n_words // 4)


def build_eval_set(heldout: Sequence[Utterance], seed: int, cfg: EvalConfig | None = None) -> list[EvalRecord]:
    """
    Synthetic multiple-choice sets in both modalities from held-out utterances.

    Story records keep the last quarter of an utterance (at least two words) as the gold
    continuation against three distractors; cloze records hide the final word against
    one distractor. Distractors are spans of the same number of words taken from other
    held-out utterances.
    """
    cfg = cfg or EvalConfig()
    cfg.validate()
    usable = [u for u in heldout if u.n_words >= 3]
    if len(usable) < 2:
        raise ConfigError("need at least two held-out utterances with 3+ words", "eval.heldout_utterances")
    records = []
    for fmt, count, n_candidates in ((STORY, cfg.story_records, 4), (CLOZE, cfg.cloze_records, 2)):
        for modality in (Modality.SPEECH, Modality.TEXT):
            rng = substream(seed, f"evalset-{fmt}-{modality.value}")
            for _ in range(count):
                i = int(rng.integers(len(usable)))
                utt = usable[i]
                m = _continuation_words(utt.n_words, fmt)
                cut = utt.n_words - m
                candidates = [_piece(utt, modality, cut, utt.n_words)]
                while len(candidates) < n_candidates:
                    j = int(rng.integers(len(usable)))
                    other = usable[j]
                    if j == i or other.n_words < m:
                        continue
                    start = int(rng.integers(0, other.n_words - m + 1))
                    candidates.append(_piece(other, modality, start, start + m))
                gold = int(rng.integers(n_candidates))
                candidates[0], candidates[gold] = candidates[gold], candidates[0]
                records.append(EvalRecord(_piece(utt, modality, 0, cut), candidates, gold, modality, fmt))
    logger.info(f"Built {len(records)} eval records from {len(usable)} held-out utterances")
    return records


###########
# Scoring #
###########
class CandidateScore(NamedTuple):
    total: float
    normalized: float
    n_tokens: int
    units: int


def score_candidate(
    model: SpeechTextModel,
    prompt: InterleavedSequence,
    candidate: InterleavedSequence,
    normalization: Normalization = Normalization.SUM,
) -> CandidateScore:
    """
    Summed -log p of the candidate's tokens given the prompt, under the model's
    inference patching. Prompt tokens (and a marker opening the candidate) are not
    scored. Speech-BPE baselines encode prompt and candidate separately; the -log p of
    one unit is that of the raw tokens it expands to, so totals are over raw tokens and
    `n_tokens` and per-token normalization use the expanded length.

    Raises:
        ContractError: If the candidate has no tokens.
        ContextOverflowError: If prompt + candidate does not fit the model context.
    """
    if sum(len(run) for run in candidate.runs) == 0:
        raise ContractError("empty candidate")
    if isinstance(model, SpeechLLM):
        prompt, candidate = model.encode_speech(prompt), model.encode_speech(candidate)
    full = prompt.extend(candidate)
    row = sequence_row(full, model.inference_patcher(), model.text_vocab)
    model.check_context(row)
    n = sum(len(run) for run in candidate.runs)
    nlls = model.position_nlls(row)[row.length - n :]
    total = float(np.sum(nlls))
    n_raw = _raw_length(model, candidate)
    normalized = total / n_raw if normalization == Normalization.PER_TOKEN else total
    return CandidateScore(total, normalized, n_raw, row.n_units)


def _raw_length(model: SpeechTextModel, seq: InterleavedSequence) -> int:
    merge_table = getattr(model, "merge_table", None)
    if merge_table is None:
        return sum(len(run) for run in seq.runs)
    return sum(
        sum(len(merge_table.expand(int(u))) for u in run.tokens) if run.modality == Modality.SPEECH else len(run)
        for run in seq.runs
    )


@dataclass
class RecordResult:
    prediction: int
    scores: list[float]
    gold: int
    modality: Modality
    units: int

    @property
    def correct(self) -> bool:
        return self.prediction == self.gold

    @property
    def nll_diff(self) -> float:
        distractors = [s for i, s in enumerate(self.scores) if i != self.gold]
        return self.scores[self.gold] - float(np.mean(distractors))


@dataclass
class EvalReport:
    accuracy: float
    nll_diff: float
    n_records: int
    n_skipped: int
    units: int
    by_modality: dict[str, dict[str, float]] = field(default_factory=dict)
    predictions: list[int] = field(default_factory=list)

    def metrics(self) -> dict[str, float]:
        """Flat metric names for stability tables, e.g. `speech_accuracy`."""
        out = {"accuracy": self.accuracy, "nll_diff": self.nll_diff}
        for modality, values in self.by_modality.items():
            out[f"{modality}_accuracy"] = values["accuracy"]
            out[f"{modality}_nll_diff"] = values["nll_diff"]
        return out


class Evaluator:
    """Scores records on a model whose weights are not changed while it runs."""

    logger_name = "Evaluator"

    def __init__(self, model: SpeechTextModel, normalization: Normalization = Normalization.SUM, workers: int = 1):
        self.model = model
        self.normalization = normalization
        self.workers = workers
        self.logger = self._setup_logger()

    def _setup_logger(self) -> logging.Logger:
        logger = logging.getLogger(self.logger_name)
        if not logger.handlers:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter("[%(levelname)s] [%(filename)s] %(message)s"))
            logger.addHandler(handler)
            logger.setLevel(logging.INFO)
        return logger

    def score_record(self, index: int, record: EvalRecord) -> RecordResult | None:
        record.validate()
        with no_grad():
            try:
                scores = [score_candidate(self.model, record.prompt, c, self.normalization) for c in record.candidates]
            except ContextOverflowError as e:
                self.logger.warning(f"Skipping record {index}: {e}")
                return None
        values = [s.normalized for s in scores]
        return RecordResult(int(np.argmin(values)), values, record.gold, record.modality, sum(s.units for s in scores))

    def run(self, records: Sequence[EvalRecord]) -> EvalReport:
        """
        Raises:
            EmptyEvalError: If there are no records or every record was skipped.
        """
        if not records:
            raise EmptyEvalError("no evaluation records")
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(self.score_record, range(len(records)), records))
        else:
            results = [self.score_record(i, r) for i, r in enumerate(records)]
        scored = [r for r in results if r is not None]
        if not scored:
            raise EmptyEvalError(f"all {len(records)} records were skipped")
        by_modality = {}
        for modality in Modality:
            subset = [r for r in scored if r.modality == modality]
            if subset:
                by_modality[modality.value] = {
                    "accuracy": float(np.mean([r.correct for r in subset])),
                    "nll_diff": float(np.mean([r.nll_diff for r in subset])),
                    "n_records": len(subset),
                }
        return EvalReport(
            accuracy=float(np.mean([r.correct for r in scored])),
            nll_diff=float(np.mean([r.nll_diff for r in scored])),
            n_records=len(scored),
            n_skipped=len(records) - len(scored),
            units=sum(r.units for r in scored),
            by_modality=by_modality,
            predictions=[-1 if r is None else r.prediction for r in results],
        )


def evaluate(
    model: SpeechTextModel,
    records: Sequence[EvalRecord],
    normalization: Normalization = Normalization.SUM,
    workers: int = 1,
) -> EvalReport:
    return Evaluator(model, normalization, workers).run(records)


######################
# Cluster statistics #
######################
@dataclass
class ClusterStats:
    within: float
    between: float
    silhouette: float
    n_words: int
    n_embeddings: int
    excluded: list[int] = field(default_factory=list)


def cluster_stats_from_embeddings(embeddings: np.ndarray, labels: Sequence[int]) -> ClusterStats:
    """
    Mean pairwise cosine similarity within and between labels, and the silhouette
    score under cosine distance.

    Raises:
        ContractError: With fewer than two labels or mismatched lengths.
    """
    labels = np.asarray(labels)
    if len(labels) != len(embeddings):
        raise ContractError(f"{len(embeddings)} embeddings but {len(labels)} labels")
    if len(np.unique(labels)) < 2:
        raise ContractError("need at least two words for cluster statistics")
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    unit = embeddings / np.where(norms == 0, 1.0, norms)
    sim = unit @ unit.T
    same = labels[:, None] == labels[None, :]
    off_diagonal = ~np.eye(len(labels), dtype=bool)
    within = float(sim[same & off_diagonal].mean())
    between = float(sim[~same].mean())
    silhouette = float(silhouette_score(embeddings, labels, metric="cosine"))
    return ClusterStats(within, between, silhouette, len(np.unique(labels)), len(labels))


def cluster_stats(
    model: SpeechTextModel,
    utterances: Iterable[Utterance],
    words: Iterable[int] | None = None,
    max_per_word: int = 50,
) -> ClusterStats:
    """
    Patch-embedding geometry of word patches (aligned patching, silence separate).
    Words with fewer than two occurrences are excluded with a warning.

    Raises:
        ContractError: If the model has no local encoder or fewer than two words remain.
    """
    if not isinstance(model, LatentSpeechTextTransformer):
        raise ContractError(f"cluster statistics need a local encoder, got a {model.kind.value} model")
    wanted = set(words) if words is not None else None
    grouped: dict[int, list[np.ndarray]] = {}
    for utt in utterances:
        embeddings, text = model.patch_embeddings(utt)
        for vector, word in zip(embeddings, text):
            if wanted is not None and word not in wanted:
                continue
            bucket = grouped.setdefault(int(word), [])
            if len(bucket) < max_per_word:
                bucket.append(vector)
    excluded = sorted(w for w, vectors in grouped.items() if len(vectors) < 2)
    if wanted is not None:
        excluded = sorted(set(excluded) | (wanted - set(grouped)))
    if excluded:
        logger.warning(f"Excluded {len(excluded)} words with fewer than 2 occurrences")
    kept = {w: v for w, v in grouped.items() if len(v) >= 2}
    embeddings = np.stack([v for w in sorted(kept) for v in kept[w]]) if kept else np.zeros((0, 1))
    labels = [w for w in sorted(kept) for _ in kept[w]]
    stats = cluster_stats_from_embeddings(embeddings, labels)
    stats.excluded = excluded
    return stats


#############
# Stability #
#############
@dataclass
class StabilityReport:
    rows: list[tuple[str, float, float, int]]
    seeds: list[int]
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {metric: {"mean": mean, "std": std, "n_seeds": n} for metric, mean, std, n in self.rows}


def stability_report(run_fn: Callable[[int], dict[str, float]], seeds: Sequence[int]) -> StabilityReport:
    """
    Run `run_fn(seed)` for every seed and tabulate mean and sample standard deviation
    per metric. A failing seed is logged and the report is flagged partial.

    Raises:
        ConfigError: With fewer than two seeds.
    """
    if len(seeds) < 2:
        raise ConfigError(f"need at least two seeds, got {len(seeds)}", "stability.seeds")
    values: dict[str, list[float]] = {}
    failures = {}
    for seed in seeds:
        try:
            metrics = run_fn(seed)
        except Exception as e:
            logger.warning(f"Seed {seed} failed: {e}")
            failures[seed] = str(e)
            continue
        for name, value in metrics.items():
            values.setdefault(name, []).append(float(value))
    rows = []
    for name in sorted(values):
        v = np.asarray(values[name])
        std = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
        rows.append((name, float(np.mean(v)), std, len(v)))
    if failures:
        logger.warning(f"Partial stability report: {len(failures)} of {len(seeds)} seeds failed")
    return StabilityReport(rows, list(seeds), failures)


def write_report_csv(path: str | Path, report: StabilityReport) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_FIELDS)
        for metric, mean, std, n in report.rows:
            writer.writerow([metric, mean, std, n])
