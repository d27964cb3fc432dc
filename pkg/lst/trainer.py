"""
Training loop: modality mixing, per-step patching choice, budget accounting, AdamW
updates, metrics CSVs, periodic evaluation and resumable checkpoints.

Batches are built by a `BatchBuilder` on a daemon `BatchPrefetcher` thread; the
trainer thread alone owns the parameters. Every batch carries a snapshot of the mixer
state after it was built, and that snapshot is what checkpoints store, so a resumed
run rebuilds exactly the batch it would have trained on next.
"""

import csv
import logging
import math
import queue
import signal
import sys
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence, TypeVar

import numpy as np

from lst.checkpoint import MANIFEST_NAME, CheckpointStore
from lst.corpus import Utterance
from lst.errors import CheckpointError, ConfigError, EndOfBudget, SkipUtterance, TrainingDivergenceError
from lst.evaluator import EvalConfig, EvalRecord, EvalReport, evaluate
from lst.interleave import InterleaveConfig, InterleavedSequence, PackedBatch, interleave, pack_batch
from lst.model import SpeechLLM, SpeechTextModel
from lst.optim import AdamState, adamw_step, clip_grad_norm, warmup_cosine
from lst.patching import CurriculumSchedule, Patcher, curriculum_prob, select_patching
from lst.utils import has_final_state, substream
from lst.utils.enums import (
    BudgetMode,
    CurriculumShape,
    Modality,
    ModelKind,
    PatchingMode,
    PatchStrategy,
    RemainderMode,
    RunStatus,
    SilenceMode,
    TrainEvent,
)

logger = logging.getLogger(__name__)

B = TypeVar("B")

INTERLEAVED = "interleaved"
TEXT = "text"

METRIC_FIELDS = [
    "step", "source", "lr", "loss", "text_loss", "speech_loss", "grad_norm", "units", "tokens",
    "speech_tokens", "text_tokens", "speech_fraction", "savings", "p_aligned", "aligned_fraction",
]
EVAL_FIELDS = ["step", "modality", "accuracy", "nll_diff", "n_records", "n_skipped"]


##########
# Config #
##########
@dataclass
class TrainConfig:
    lr: float = 4e-4
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup: int = 2000
    total_steps: int = 20000
    min_lr_ratio: float = 0.01
    grad_clip: float = 1.0
    batch_rows: int = 8
    row_units: int = 512
    ratio: tuple[float, float] = (1.0, 2.0)  # speech : text
    budget: BudgetMode = BudgetMode.COMPUTE
    token_budget: int | None = None
    unit_budget: int | None = None
    speech_only: bool = False
    patching: PatchingMode = PatchingMode.STATIC
    patch_size: int = 4
    silence_mode: SilenceMode = SilenceMode.SEPARATE
    tau1: int = 1000
    tau2: int = 4000
    curriculum_shape: CurriculumShape = CurriculumShape.LINEAR
    curriculum_base: PatchStrategy = PatchStrategy.ALIGNED
    mixed_prob: float = 0.5
    remainder: RemainderMode = RemainderMode.REPEAT
    predict_markers: bool = False
    log_every: int = 10
    eval_every: int = 0
    checkpoint_every: int = 0
    prefetch: int = 4

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("must be >= 1", "train.total_steps")
        if not 0 <= self.warmup < self.total_steps:
            raise ConfigError(f"warmup {self.warmup} must be below total steps {self.total_steps}", "train.warmup")
        if self.lr <= 0:
            raise ConfigError("must be positive", "train.lr")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must lie in [0, 1)", "train.betas")
        if not 0 < self.min_lr_ratio <= 1:
            raise ConfigError("must lie in (0, 1]", "train.min_lr_ratio")
        if len(self.ratio) != 2 or self.ratio[0] < 0 or self.ratio[1] < 0 or sum(self.ratio) == 0:
            raise ConfigError(f"invalid speech:text ratio {self.ratio}", "train.ratio")
        if self.ratio[0] == 0 and self.speech_only:
            raise ConfigError("speech-only training needs a speech share", "train.ratio")
        if self.batch_rows < 1:
            raise ConfigError("must be >= 1", "train.batch_rows")
        if self.row_units < 8:
            raise ConfigError(f"context length must be >= 8, got {self.row_units}", "train.row_units")
        if self.patch_size < 1:
            raise ConfigError("must be >= 1", "train.patch_size")
        if not 0 <= self.mixed_prob <= 1:
            raise ConfigError("must lie in [0, 1]", "train.mixed_prob")
        if self.curriculum_base not in (PatchStrategy.ALIGNED, PatchStrategy.BPE_ALIGNED):
            raise ConfigError("must be aligned or bpe-aligned", "train.curriculum_base")
        if self.patching == PatchingMode.CURRICULUM and not 0 <= self.tau1 < self.tau2:
            raise ConfigError(f"need 0 <= tau1 < tau2, got {self.tau1}, {self.tau2}", "train.tau1")
        if self.budget == BudgetMode.DATA and self.token_budget is not None and self.token_budget < 1:
            raise ConfigError("must be positive", "train.token_budget")
        if self.prefetch < 1:
            raise ConfigError("must be >= 1", "train.prefetch")

    def schedule(self) -> CurriculumSchedule | None:
        if self.patching != PatchingMode.CURRICULUM:
            return None
        return CurriculumSchedule(self.tau1, self.tau2, self.curriculum_shape)


def lr_at(step: int, cfg: TrainConfig) -> float:
    return warmup_cosine(step, cfg.lr, cfg.warmup, cfg.total_steps, cfg.min_lr_ratio)


def aligned_probability(step: int, cfg: TrainConfig) -> float:
    """Configured probability that a speech-bearing sequence gets alignment-based patches."""
    match cfg.patching:
        case PatchingMode.STATIC:
            return 0.0
        case PatchingMode.ALIGNED | PatchingMode.BPE_ALIGNED:
            return 1.0
        case PatchingMode.MIXED:
            return cfg.mixed_prob
    return curriculum_prob(step, cfg.schedule())


##########
# Ledger #
##########
@dataclass
class BudgetLedger:
    """
    Monotone budget counters.

    `text_tokens`/`speech_tokens` are raw content tokens consumed. `units` counts every
    row position the global model processed (patches, text tokens, markers, separators
    and padding); `baseline_units` is what a token-level model would have processed for
    the same rows.
    """

    steps: int = 0
    sequences: int = 0
    text_tokens: int = 0
    speech_tokens: int = 0
    units: int = 0
    baseline_units: int = 0
    speech_units: int = 0
    row_speech_tokens: int = 0
    pads: int = 0
    truncated: int = 0
    aligned_sequences: int = 0
    static_sequences: int = 0
    interleaved_batches: int = 0
    text_batches: int = 0

    def add_raw(self, text: int, speech: int) -> None:
        self.text_tokens += text
        self.speech_tokens += speech

    def record(self, item: "StepBatch") -> None:
        counts = item.counts
        self.steps += 1
        self.sequences += item.batch.consumed
        self.add_raw(item.raw_text, item.raw_speech)
        self.units += counts["units"]
        self.baseline_units += counts["tokens"] - counts["speech_tokens"] + item.row_speech_tokens
        self.speech_units += counts["speech_units"]
        self.row_speech_tokens += item.row_speech_tokens
        self.pads += counts["pads"]
        self.truncated += item.batch.truncated
        self.aligned_sequences += sum(1 for s in item.strategies if s is not None and s != PatchStrategy.STATIC)
        self.static_sequences += sum(1 for s in item.strategies if s == PatchStrategy.STATIC)
        if item.source == INTERLEAVED:
            self.interleaved_batches += 1
        else:
            self.text_batches += 1

    @property
    def savings(self) -> float:
        return 1.0 - self.units / self.baseline_units if self.baseline_units else 0.0

    @property
    def speech_savings(self) -> float:
        return 1.0 - self.speech_units / self.row_speech_tokens if self.row_speech_tokens else 0.0

    @property
    def speech_fraction(self) -> float:
        content = self.text_tokens + self.speech_tokens
        return self.speech_tokens / content if content else 0.0

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, int]) -> "BudgetLedger":
        return cls(**data)


##########
# Mixing #
##########
@dataclass
class MixerState:
    speech_tokens: int = 0
    content_tokens: int = 0
    cursors: dict[str, int] = field(default_factory=lambda: {INTERLEAVED: 0, TEXT: 0})

    def copy(self) -> "MixerState":
        return MixerState(self.speech_tokens, self.content_tokens, dict(self.cursors))

    def add(self, text: int, speech: int) -> None:
        self.speech_tokens += speech
        self.content_tokens += text + speech

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MixerState":
        return cls(int(data["speech_tokens"]), int(data["content_tokens"]), dict(data["cursors"]))


def choose_source(state: MixerState, target: float) -> str:
    """Greedy choice: draw interleaved data while the realized speech fraction is below target."""
    if target >= 1.0:
        return INTERLEAVED
    if target <= 0.0:
        return TEXT
    if state.content_tokens == 0:
        return INTERLEAVED
    return INTERLEAVED if state.speech_tokens < target * state.content_tokens else TEXT


def _raw_counts(seqs: Sequence[InterleavedSequence]) -> tuple[int, int]:
    text = speech = 0
    for seq in seqs:
        t, s = seq.content_counts()
        text += t
        speech += s
    return text, speech


def mix_stream(
    interleaved: Iterator[B],
    text: Iterator[B],
    ratio: tuple[float, float],
    ledger: BudgetLedger | None = None,
    *,
    state: MixerState | None = None,
    counts: Callable[[B], tuple[int, int]] = _raw_counts,
) -> Iterator[tuple[str, B]]:
    """
    Interleave batches from two sources so the realized speech-token fraction tracks
    ratio[0] / sum(ratio). Yields (source label, batch).

    Args:
        state: Mixer state to continue from; updated in place after every batch.
        counts: (text, speech) content tokens of one batch.

    Raises:
        EndOfBudget: When the chosen source is exhausted.
    """
    target = ratio[0] / (ratio[0] + ratio[1])
    state = state if state is not None else MixerState()
    while True:
        label = choose_source(state, target)
        try:
            batch = next(interleaved if label == INTERLEAVED else text)
        except StopIteration:
            raise EndOfBudget(f"{label} source exhausted")
        t, s = counts(batch)
        state.add(t, s)
        if ledger is not None:
            ledger.add_raw(t, s)
        yield label, batch


###########
# Sources #
###########
class SequenceSource:
    """
    Endless, epoch-shuffled stream of sequences addressed by a cursor k. Item k comes
    from utterance perm_epoch[k mod n] and is built with generator substream(seed,
    label, k), so any position can be rebuilt after a resume.
    """

    def __init__(
        self,
        utterances: Sequence[Utterance],
        seed: int,
        label: str,
        make: Callable[[Utterance, np.random.Generator, int], InterleavedSequence],
    ):
        if not utterances:
            raise ConfigError("training corpus is empty", "corpus")
        self.utterances = utterances
        self.seed = seed
        self.label = label
        self.make = make
        self._orders: dict[int, np.ndarray] = {}

    def _order(self, epoch: int) -> np.ndarray:
        if epoch not in self._orders:
            self._orders = {epoch: substream(self.seed, f"{self.label}-order", epoch).permutation(len(self.utterances))}
        return self._orders[epoch]

    def get(self, k: int) -> InterleavedSequence:
        n = len(self.utterances)
        index = int(self._order(k // n)[k % n])
        return self.make(self.utterances[index], substream(self.seed, self.label, k), index)


def interleaved_source(utterances: Sequence[Utterance], seed: int, cfg: TrainConfig) -> SequenceSource:
    icfg = InterleaveConfig(cfg.remainder)

    def make(utt: Utterance, rng: np.random.Generator, index: int) -> InterleavedSequence:
        if cfg.speech_only:
            return InterleavedSequence.speech_only(utt, index)
        try:
            return interleave(utt, rng, icfg, index)
        except SkipUtterance:
            return InterleavedSequence.speech_only(utt, index)

    return SequenceSource(utterances, seed, "interleave", make)


def text_source(utterances: Sequence[Utterance], seed: int) -> SequenceSource:
    def make(utt: Utterance, rng: np.random.Generator, index: int) -> InterleavedSequence:
        return InterleavedSequence.text_only(utt.text_tokens, index)

    return SequenceSource(utterances, seed, "text", make)


############
# Batching #
############
@dataclass
class StepBatch:
    step: int
    source: str
    batch: PackedBatch
    counts: dict[str, int]
    strategies: list[PatchStrategy | None]
    raw_text: int
    raw_speech: int
    row_speech_tokens: int
    state: MixerState = field(default_factory=MixerState)


def _step_counts(item: StepBatch) -> tuple[int, int]:
    return item.raw_text, item.raw_speech


class BatchBuilder:
    """
    Builds the batch for a given step. Sources are chosen by `mix_stream` over the
    mixer state this builder holds; assigning `state` restarts the stream from it.
    """

    def __init__(
        self,
        model: SpeechTextModel,
        config: TrainConfig,
        utterances: Sequence[Utterance],
        *,
        seed: int = 0,
        subword_map: dict[int, int] | None = None,
        state: MixerState | None = None,
    ):
        self.model = model
        self.config = config
        self.seed = seed
        self.vocab = model.text_vocab
        self.sources = {
            INTERLEAVED: interleaved_source(utterances, seed, config),
            TEXT: text_source(utterances, seed),
        }
        self.schedule = config.schedule()
        self.subword_map = subword_map or {}
        self._max_pull = config.batch_rows * config.row_units
        self._step = 0
        self._stream: Iterator[tuple[str, StepBatch]] | None = None
        self.state = state or MixerState()

    @property
    def state(self) -> MixerState:
        return self._state

    @state.setter
    def state(self, value: MixerState) -> None:
        self._state = value
        self._stream = None

    def _strategy(self, step: int, k: int, seq: InterleavedSequence) -> PatchStrategy | None:
        speech_runs = [r for r in seq.runs if r.modality == Modality.SPEECH and len(r)]
        if not speech_runs:
            return None
        return select_patching(
            step,
            substream(self.seed, "curriculum", step, k),
            self.config.patching,
            self.schedule,
            has_spans=all(r.spans is not None for r in speech_runs),
            mixed_prob=self.config.mixed_prob,
            aligned_strategy=self.config.curriculum_base,
        )

    def _prepare(
        self, step: int, start: int, seqs: list[InterleavedSequence]
    ) -> tuple[list[InterleavedSequence], list[Patcher], list[PatchStrategy | None]]:
        if self.model.kind != ModelKind.LST:
            encoded = [self.model.encode_speech(s) for s in seqs] if isinstance(self.model, SpeechLLM) else seqs
            patcher = Patcher(PatchStrategy.SINGLETON)
            return encoded, [patcher] * len(seqs), [None] * len(seqs)
        patchers, strategies = [], []
        for i, seq in enumerate(seqs):
            strategy = self._strategy(step, start + i, seq)
            strategies.append(strategy)
            patchers.append(
                Patcher(
                    strategy or PatchStrategy.STATIC,
                    self.config.patch_size,
                    self.config.silence_mode,
                    self.subword_map,
                )
            )
        return seqs, patchers, strategies

    def _row_speech_tokens(self, batch: PackedBatch) -> int:
        merge_table = getattr(self.model, "merge_table", None)
        total = 0
        for row in batch.rows:
            speech = row.tokens[row.is_speech]
            total += sum(len(merge_table.expand(int(t))) for t in speech) if merge_table else len(speech)
        return total

    def _pack(self, label: str) -> StepBatch:
        cfg = self.config
        step = self._step
        source = self.sources[label]
        start = self.state.cursors[label]
        want = cfg.batch_rows * 2
        pulled: list[InterleavedSequence] = []
        while True:
            pulled += [source.get(start + i) for i in range(len(pulled), want)]
            seqs, patchers, strategies = self._prepare(step, start, pulled)
            batch = pack_batch(
                seqs,
                cfg.row_units,
                patchers=patchers,
                vocab=self.vocab,
                capacity=cfg.budget,
                max_rows=cfg.batch_rows,
                predict_markers=cfg.predict_markers,
            )
            if batch.consumed < len(pulled) or want >= self._max_pull:
                break
            want *= 2
        raw_text, raw_speech = _raw_counts(pulled[: batch.consumed])
        self.state.cursors[label] = start + batch.consumed
        return StepBatch(
            step=step,
            source=label,
            batch=batch,
            counts=batch.counts(self.vocab),
            strategies=strategies[: batch.consumed],
            raw_text=raw_text,
            raw_speech=raw_speech,
            row_speech_tokens=self._row_speech_tokens(batch),
        )

    def _packed(self, label: str) -> Iterator[StepBatch]:
        while True:
            yield self._pack(label)

    def build(self, step: int) -> StepBatch:
        """
        Raises:
            EndOfBudget: In data-controlled mode once the token budget is consumed.
        """
        cfg = self.config
        if cfg.budget == BudgetMode.DATA and cfg.token_budget is not None and self.state.content_tokens >= cfg.token_budget:
            raise EndOfBudget(f"token budget {cfg.token_budget} consumed")
        if self._stream is None:
            self._stream = mix_stream(
                self._packed(INTERLEAVED), self._packed(TEXT), cfg.ratio, state=self.state, counts=_step_counts
            )
        self._step = step
        _, item = next(self._stream)
        item.state = self.state.copy()
        return item


class BatchPrefetcher:
    """Daemon thread filling a bounded queue with `StepBatch`es for steps [start, end)."""

    logger_name = "BatchPrefetcher"

    def __init__(self, builder: BatchBuilder, start: int, end: int, maxsize: int = 4):
        self.builder = builder
        self.start_step = start
        self.end_step = end
        self.logger = self._setup_logger()
        self._queue: queue.Queue = queue.Queue(maxsize=maxsize)
        self._lock = threading.Lock()
        self._stop_requested = False
        self._finished = False
        self._end_of_budget = False
        self._thread = threading.Thread(target=self._run, name="batch-prefetcher", daemon=True)

    def _setup_logger(self) -> logging.Logger:
        logger = logging.getLogger(self.logger_name)
        if not logger.handlers:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter("[%(levelname)s] [%(filename)s] %(message)s"))
            logger.addHandler(handler)
            logger.setLevel(logging.INFO)
        return logger

    @property
    def stop_requested(self) -> bool:
        with self._lock:
            return self._stop_requested

    @property
    def finished(self) -> bool:
        with self._lock:
            return self._finished

    @property
    def end_of_budget(self) -> bool:
        with self._lock:
            return self._end_of_budget

    def start(self) -> None:
        self._thread.start()

    def _put(self, item: Any) -> bool:
        while not self.stop_requested:
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self) -> None:
        try:
            for step in range(self.start_step, self.end_step):
                if self.stop_requested:
                    return
                try:
                    item = self.builder.build(step)
                except EndOfBudget as e:
                    self.logger.info(f"End of budget before step {step}: {e}")
                    with self._lock:
                        self._end_of_budget = True
                    break
                if not self._put(item):
                    return
            self._put(None)
        except Exception as e:
            self.logger.error(f"Batch construction failed: {e}")
            self._put(e)
        finally:
            with self._lock:
                self._finished = True

    def get(self) -> StepBatch | None:
        """Next batch, or None once the step range or the budget is exhausted."""
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        return item

    def stop(self, timeout: float = 5.0) -> None:
        with self._lock:
            self._stop_requested = True
        if self._thread.is_alive():
            self._thread.join(timeout)


###########
# Trainer #
###########
@dataclass
class StepMetrics:
    step: int
    source: str
    lr: float
    loss: float
    text_loss: float | None
    speech_loss: float | None
    grad_norm: float
    units: int
    tokens: int
    speech_tokens: int
    text_tokens: int
    speech_fraction: float
    savings: float
    p_aligned: float
    aligned_fraction: float | None

    def row(self) -> dict[str, Any]:
        return {k: ("" if v is None else v) for k, v in asdict(self).items()}


@dataclass
class TrainResult:
    status: RunStatus
    steps: int
    ledger: BudgetLedger
    last_loss: float | None
    metrics_path: Path
    eval_path: Path
    checkpoint: str | None = None


class Trainer:
    """
    Runs optimization for one model on one corpus and writes under `out_dir`:

    - `metrics.csv`: one row per step
    - `eval.csv`: one row per evaluation and modality
    - `checkpoints/step-NNNNNNN` and `checkpoints/latest`: float64 resumable states
    - `weights`: the final float32 weight export
    """

    logger_name = "Trainer"

    def __init__(
        self,
        model: SpeechTextModel,
        config: TrainConfig,
        utterances: Sequence[Utterance],
        out_dir: str | Path,
        *,
        seed: int = 0,
        eval_records: Sequence[EvalRecord] = (),
        eval_config: EvalConfig | None = None,
        subword_map: dict[int, int] | None = None,
    ):
        config.validate()
        self.model = model
        self.config = config
        self.seed = seed
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.logger = self._setup_logger()
        self.store = CheckpointStore(root=self.out_dir / "checkpoints")
        self.weights_store = CheckpointStore(root=self.out_dir)
        self.metrics_path = self.out_dir / "metrics.csv"
        self.eval_path = self.out_dir / "eval.csv"
        self.eval_records = list(eval_records)
        self.eval_config = eval_config or EvalConfig()
        self.builder = BatchBuilder(model, config, utterances, seed=seed, subword_map=subword_map)
        self.adam = AdamState()
        self.ledger = BudgetLedger()
        self.mixer_state = MixerState()
        self.step = 0
        self.last_loss: float | None = None

        self._lock = threading.Lock()
        self._status = RunStatus.PENDING
        self._stop_requested = False
        self._callbacks: dict[TrainEvent, list[Callable[[Any], None]]] = {event: [] for event in TrainEvent}

    def _setup_logger(self) -> logging.Logger:
        logger = logging.getLogger(self.logger_name)
        if not logger.handlers:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter("[%(levelname)s] [%(filename)s] %(message)s"))
            logger.addHandler(handler)
            logger.setLevel(logging.INFO)
        return logger

    def install_signal_handlers(self) -> None:
        """
        SIGINT/SIGTERM request a graceful stop (checkpoint, then return); a second
        signal exits immediately.
        """

        def signal_handler(signum, frame):
            signal.signal(signal.SIGINT, lambda signum, frame: sys.exit(signum))
            signal.signal(signal.SIGTERM, lambda signum, frame: sys.exit(signum))
            self.logger.info(f"Received signal {signum}, stopping after the current step...")
            self.request_stop()

        signal.signal(signal.SIGINT, signal_handler)
        signal.signal(signal.SIGTERM, signal_handler)

    #########################
    # Thread-safe interface #
    #########################
    @property
    def status(self) -> RunStatus:
        with self._lock:
            return self._status

    @property
    def stop_requested(self) -> bool:
        with self._lock:
            return self._stop_requested

    def request_stop(self) -> None:
        with self._lock:
            self._stop_requested = True

    def _set_status(self, status: RunStatus) -> None:
        with self._lock:
            self._status = status

    def register_callback(self, event: TrainEvent, fn: Callable[[Any], None]) -> None:
        self._callbacks[event].append(fn)

    def _emit(self, event: TrainEvent, payload: Any) -> None:
        for fn in self._callbacks[event]:
            try:
                fn(payload)
            except Exception as e:
                self.logger.error(f"Callback for {event.value} failed: {e}")

    ###############
    # Checkpoints #
    ###############
    @staticmethod
    def checkpoint_key(step: int) -> str:
        return f"step-{step:07d}"

    def save_checkpoint(self, key: str | None = None) -> str:
        """Save a resumable float64 state as `key` (default step-N) and as `latest`."""
        key = key or self.checkpoint_key(self.step)
        arrays = self.model.params.state_arrays()
        arrays.update(self.adam.arrays())
        meta = {
            "step": self.step,
            "adam_t": self.adam.t,
            "model_kind": self.model.kind.value,
            "seed": self.seed,
            "ledger": self.ledger.to_dict(),
            "mixer": self.mixer_state.to_dict(),
        }
        for target in dict.fromkeys((key, "latest")):
            self.store.save_tensors(target, arrays, dtype="float64", meta=meta)
        self.logger.info(f"Saved checkpoint {key} at step {self.step}")
        self._emit(TrainEvent.CHECKPOINT, key)
        return key

    def resume(self, key: str = "latest") -> int:
        """
        Restore parameters, optimizer, ledger and mixer state; returns the next step.

        Raises:
            CheckpointError: If the checkpoint is missing or does not match the model.
        """
        if not self.store.object_exists(f"{key}/{MANIFEST_NAME}"):
            raise CheckpointError(f"no checkpoint {key!r} under {self.store.root}")
        arrays, meta = self.store.load_tensors(key)
        params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
        self.model.params.load_arrays(params)
        self.adam = AdamState.from_arrays(arrays, int(meta["adam_t"]))
        self.step = int(meta["step"])
        self.ledger = BudgetLedger.from_dict(meta["ledger"])
        self.mixer_state = MixerState.from_dict(meta["mixer"])
        self.builder.state = self.mixer_state.copy()
        self._trim_csv(self.metrics_path, self.step)
        self._trim_csv(self.eval_path, self.step + 1)
        self.logger.info(f"Resumed from {key} at step {self.step}")
        return self.step

    def export_weights(self) -> str:
        self.model.save_weights(
            self.weights_store, "weights", dtype="float32",
            meta={"step": self.step, "model_kind": self.model.kind.value, "seed": self.seed},
        )
        return "weights"

    ###########
    # Logging #
    ###########
    @staticmethod
    def _append_csv(path: Path, fields: list[str], row: dict[str, Any]) -> None:
        new = not path.exists()
        with path.open("a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            if new:
                writer.writeheader()
            writer.writerow(row)

    @staticmethod
    def _trim_csv(path: Path, step: int) -> None:
        """Drop rows at or after `step` (left behind by the run being resumed)."""
        if not path.exists():
            return
        with path.open(newline="") as f:
            reader = csv.DictReader(f)
            fields = reader.fieldnames or []
            rows = [r for r in reader if int(r["step"]) < step]
        with path.open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)

    def _aligned_fraction(self, strategies: list[PatchStrategy | None]) -> float | None:
        speech = [s for s in strategies if s is not None]
        if not speech:
            return None
        return sum(1 for s in speech if s != PatchStrategy.STATIC) / len(speech)

    ############
    # Training #
    ############
    def _diverged(self, step: int, reason: str) -> None:
        self.logger.error(f"Training diverged at step {step}: {reason}")
        self.save_checkpoint("last-good")
        self._set_status(RunStatus.FAILED)
        raise TrainingDivergenceError(reason, step)

    def train_step(self, item: StepBatch) -> StepMetrics:
        """One optimizer update on `item`; the model and optimizer state change in place."""
        cfg = self.config
        params = self.model.params
        lr = lr_at(item.step, cfg)
        params.zero_grad()
        out = self.model.loss(item.batch)
        loss = out.total.item()
        if not math.isfinite(loss):
            self._diverged(item.step, f"loss is {loss}")
        out.total.backward()
        try:
            grads, norm = clip_grad_norm(params.grads(), cfg.grad_clip, item.step)
        except TrainingDivergenceError as e:
            self._diverged(item.step, e.message)
        current = {name: t.data for name, t in params.items()}
        updated = adamw_step(
            current, grads, self.adam, lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
        )
        for name, tensor in params.items():
            tensor.data = updated[name]
        counts = item.counts
        content = item.raw_text + item.raw_speech
        units = counts["units"]
        baseline = counts["tokens"] - counts["speech_tokens"] + item.row_speech_tokens
        return StepMetrics(
            step=item.step,
            source=item.source,
            lr=lr,
            loss=loss,
            text_loss=out.text,
            speech_loss=out.speech,
            grad_norm=norm,
            units=units,
            tokens=counts["tokens"],
            speech_tokens=item.raw_speech,
            text_tokens=item.raw_text,
            speech_fraction=item.raw_speech / content if content else 0.0,
            savings=1.0 - units / baseline if baseline else 0.0,
            p_aligned=aligned_probability(item.step, cfg) if self.model.kind == ModelKind.LST else 0.0,
            aligned_fraction=self._aligned_fraction(item.strategies),
        )

    def run_eval(self) -> dict[str, EvalReport]:
        """Score the eval records per modality on the current weights and append to eval.csv."""
        reports = {}
        for modality in (Modality.SPEECH, Modality.TEXT):
            records = [r for r in self.eval_records if r.modality == modality]
            if not records:
                continue
            report = evaluate(
                self.model, records, self.eval_config.normalization, workers=self.eval_config.workers
            )
            reports[modality.value] = report
            self._append_csv(
                self.eval_path,
                EVAL_FIELDS,
                {
                    "step": self.step,
                    "modality": modality.value,
                    "accuracy": report.accuracy,
                    "nll_diff": report.nll_diff,
                    "n_records": report.n_records,
                    "n_skipped": report.n_skipped,
                },
            )
            self.logger.info(
                f"Eval at step {self.step} [{modality.value}]: accuracy {report.accuracy:.3f}, "
                f"NLL diff {report.nll_diff:.3f} over {report.n_records} records"
            )
        self._emit(TrainEvent.EVAL, reports)
        return reports

    def _budget_reached(self) -> bool:
        cfg = self.config
        return cfg.budget == BudgetMode.COMPUTE and cfg.unit_budget is not None and self.ledger.units >= cfg.unit_budget

    def train(self) -> TrainResult:
        """
        Train from `self.step` to `config.total_steps`, or until the unit or token
        budget is used up or a stop is requested.

        Raises:
            TrainingDivergenceError: On a non-finite loss or gradient; a `last-good`
                checkpoint is written first.
        """
        cfg = self.config
        self._set_status(RunStatus.RUNNING)
        self.logger.info(
            f"Training {self.model.kind.value} from step {self.step} to {cfg.total_steps} "
            f"({cfg.budget.value}-controlled, patching {cfg.patching.value})"
        )
        prefetcher = BatchPrefetcher(self.builder, self.step, cfg.total_steps, cfg.prefetch)
        prefetcher.start()
        evaluated_at = -1
        try:
            while not self._budget_reached():
                if self.stop_requested:
                    self._set_status(RunStatus.STOPPED)
                    break
                item = prefetcher.get()
                if item is None:
                    break
                metrics = self.train_step(item)
                self.ledger.record(item)
                self.mixer_state = item.state
                self.step = item.step + 1
                self.last_loss = metrics.loss
                self._append_csv(self.metrics_path, METRIC_FIELDS, metrics.row())
                self._emit(TrainEvent.STEP, metrics)
                if cfg.log_every and self.step % cfg.log_every == 0:
                    self.logger.info(
                        f"step {self.step}: loss {metrics.loss:.4f} (text {metrics.text_loss}, "
                        f"speech {metrics.speech_loss}), lr {metrics.lr:.2e}, units {self.ledger.units}"
                    )
                if cfg.eval_every and self.eval_records and self.step % cfg.eval_every == 0:
                    self.run_eval()
                    evaluated_at = self.step
                if cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save_checkpoint()
        except Exception:
            if not has_final_state(self.status):
                self._set_status(RunStatus.FAILED)
            raise
        finally:
            prefetcher.stop()

        if self.eval_records and evaluated_at != self.step:
            self.run_eval()
        key = self.save_checkpoint()
        self.export_weights()
        if self.status == RunStatus.RUNNING:
            self._set_status(RunStatus.COMPLETED)
        self.logger.info(
            f"Finished at step {self.step}: {self.ledger.units} units, savings {self.ledger.savings:.3f}, "
            f"speech fraction {self.ledger.speech_fraction:.3f}"
        )
        result = TrainResult(self.status, self.step, self.ledger, self.last_loss, self.metrics_path, self.eval_path, key)
        self._emit(TrainEvent.FINISHED, result)
        return result
