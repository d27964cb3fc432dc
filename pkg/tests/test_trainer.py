import csv

import numpy as np
import pytest

from lst.corpus import synth_subword_map
from lst.errors import CheckpointError, ConfigError, EndOfBudget, TrainingDivergenceError
from lst.interleave import InterleavedSequence
from lst.model import LatentSpeechTextTransformer, SpeechLLM
from lst.trainer import (
    INTERLEAVED,
    TEXT,
    BatchBuilder,
    BudgetLedger,
    MixerState,
    TrainConfig,
    Trainer,
    aligned_probability,
    choose_source,
    lr_at,
    mix_stream,
)
from lst.utils.enums import BudgetMode, ModelKind, PatchingMode, PatchStrategy, RunStatus, TrainEvent
from tests.conftest import micro_config, speech_utterance
from tests.utils.enums import Mixing, Schedule


def tiny_train(**overrides) -> TrainConfig:
    values = dict(
        lr=1e-3, warmup=1, total_steps=4, batch_rows=2, row_units=32, patch_size=3, log_every=0, prefetch=2
    )
    values.update(overrides)
    return TrainConfig(**values)


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def repeat(seq: InterleavedSequence, size: int = 1):
    while True:
        yield [seq] * size


############
# Schedule #
############
def test_lr_follows_warmup_cosine():
    cfg = TrainConfig(lr=Schedule.PEAK_LR.value, warmup=Schedule.WARMUP.value, total_steps=Schedule.TOTAL.value)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(Schedule.WARMUP.value, cfg) == pytest.approx(Schedule.PEAK_LR.value)
    assert lr_at(Schedule.TOTAL.value, cfg) == pytest.approx(Schedule.MIN_LR.value)


def test_aligned_probability_per_mode():
    assert aligned_probability(0, tiny_train()) == 0.0
    assert aligned_probability(0, tiny_train(patching=PatchingMode.ALIGNED)) == 1.0
    assert aligned_probability(0, tiny_train(patching=PatchingMode.MIXED, mixed_prob=0.3)) == 0.3
    curriculum = tiny_train(patching=PatchingMode.CURRICULUM, tau1=10, tau2=20)
    assert aligned_probability(15, curriculum) == pytest.approx(0.5)


def test_train_config_validation():
    with pytest.raises(ConfigError) as e:
        tiny_train(warmup=4).validate()
    assert e.value.field == "train.warmup"
    with pytest.raises(ConfigError):
        tiny_train(ratio=(0.0, 0.0)).validate()
    with pytest.raises(ConfigError):
        tiny_train(row_units=4).validate()
    with pytest.raises(ConfigError):
        tiny_train(patching=PatchingMode.CURRICULUM, tau1=5, tau2=5).validate()
    with pytest.raises(ConfigError):
        tiny_train(ratio=(0.0, 1.0), speech_only=True).validate()


##########
# Mixing #
##########
def test_mix_stream_tracks_speech_fraction():
    speech = InterleavedSequence.speech_only(speech_utterance())
    text = InterleavedSequence.text_only([1, 2, 3, 4])
    ledger = BudgetLedger()
    stream = mix_stream(repeat(speech), repeat(text), Mixing.RATIO.value, ledger)
    labels = [next(stream)[0] for _ in range(3000)]
    assert ledger.speech_fraction == pytest.approx(Mixing.TARGET.value, abs=Mixing.TOLERANCE.value)
    assert labels[0] == INTERLEAVED
    assert TEXT in labels


def test_mix_stream_continues_from_state():
    state = MixerState(speech_tokens=0, content_tokens=90)
    speech = InterleavedSequence.speech_only(speech_utterance())
    stream = mix_stream(repeat(speech), repeat(InterleavedSequence.text_only([1, 2])), Mixing.RATIO.value, state=state)
    assert next(stream)[0] == INTERLEAVED
    assert state.speech_tokens == len(speech_utterance().speech_tokens)


def test_pure_speech_ratio_never_draws_text():
    stream = mix_stream(repeat(InterleavedSequence.speech_only(speech_utterance())), iter([]), (1.0, 0.0))
    assert {next(stream)[0] for _ in range(20)} == {INTERLEAVED}


def test_exhausted_source_ends_budget():
    stream = mix_stream(iter([[InterleavedSequence.speech_only(speech_utterance())]]), iter([]), (1.0, 1.0))
    next(stream)
    with pytest.raises(EndOfBudget):
        next(stream)


def test_choose_source_greedy():
    state = MixerState()
    assert choose_source(state, 0.5) == INTERLEAVED
    state.add(text=0, speech=10)
    assert choose_source(state, 0.5) == TEXT
    state.add(text=30, speech=0)
    assert choose_source(state, 0.5) == INTERLEAVED
    assert choose_source(state, 0.0) == TEXT
    assert MixerState.from_dict(state.to_dict()) == state


##########
# Ledger #
##########
def test_static_speech_only_saves_three_quarters():
    model = LatentSpeechTextTransformer(micro_config(patch_size=4), seed=0)
    cfg = tiny_train(patch_size=4, speech_only=True, ratio=(1.0, 0.0))
    builder = BatchBuilder(model, cfg, [speech_utterance()] * 4)
    ledger = BudgetLedger()
    for step in range(3):
        ledger.record(builder.build(step))
    assert ledger.speech_savings == pytest.approx(0.75)
    assert ledger.text_tokens == 0
    assert ledger.speech_fraction == 1.0
    assert ledger.savings > 0.5
    assert BudgetLedger.from_dict(ledger.to_dict()) == ledger


def test_builder_is_deterministic(small_corpus):
    model = LatentSpeechTextTransformer(micro_config(), seed=0)
    a = BatchBuilder(model, tiny_train(), small_corpus, seed=2)
    b = BatchBuilder(model, tiny_train(), small_corpus, seed=2)
    for step in range(3):
        x, y = a.build(step), b.build(step)
        assert x.source == y.source
        for rx, ry in zip(x.batch.rows, y.batch.rows):
            np.testing.assert_array_equal(rx.tokens, ry.tokens)


def test_mixed_patching_draws_from_bpe_base(small_corpus, small_synth):
    model = LatentSpeechTextTransformer(micro_config(), seed=0)
    cfg = tiny_train(
        patching=PatchingMode.MIXED,
        mixed_prob=1.0,
        curriculum_base=PatchStrategy.BPE_ALIGNED,
        speech_only=True,
        ratio=(1.0, 0.0),
    )
    item = BatchBuilder(model, cfg, small_corpus, subword_map=synth_subword_map(small_synth)).build(0)
    assert set(item.strategies) == {PatchStrategy.BPE_ALIGNED}
    with pytest.raises(ConfigError) as e:
        tiny_train(curriculum_base=PatchStrategy.STATIC).validate()
    assert e.value.field == "train.curriculum_base"


def test_builder_tracks_speech_share(small_corpus):
    model = LatentSpeechTextTransformer(micro_config(), seed=0)
    builder = BatchBuilder(model, tiny_train(ratio=Mixing.RATIO.value), small_corpus, seed=1)
    ledger = BudgetLedger()
    for step in range(1_000):
        ledger.record(builder.build(step))
    assert ledger.speech_fraction == pytest.approx(Mixing.TARGET.value, abs=Mixing.TOLERANCE.value)
    assert builder.state.speech_tokens == ledger.speech_tokens
    assert builder.state.content_tokens == ledger.speech_tokens + ledger.text_tokens
    assert ledger.interleaved_batches > 0 and ledger.text_batches > 0


def test_compute_rows_are_unit_matched(small_corpus):
    model = LatentSpeechTextTransformer(micro_config(), seed=0)
    item = BatchBuilder(model, tiny_train(), small_corpus).build(0)
    assert all(row.n_units == 32 for row in item.batch.rows)


############
# Training #
############
def test_train_writes_metrics_and_checkpoints(tmp_path, small_corpus):
    model = LatentSpeechTextTransformer(micro_config(), seed=0)
    trainer = Trainer(model, tiny_train(checkpoint_every=2), small_corpus, tmp_path)
    seen = []
    trainer.register_callback(TrainEvent.STEP, lambda m: seen.append(m.step))
    finished = []
    trainer.register_callback(TrainEvent.FINISHED, finished.append)
    result = trainer.train()
    assert result.status == RunStatus.COMPLETED
    assert result.steps == 4
    assert seen == [0, 1, 2, 3]
    assert finished == [result]
    assert [int(r["step"]) for r in read_metrics(result.metrics_path)] == [0, 1, 2, 3]
    for key in ("step-0000002", "step-0000004", "latest"):
        assert trainer.store.object_exists(f"{key}/manifest.json")
    assert trainer.weights_store.load_manifest("weights")["dtype"] == "float32"
    assert result.ledger.steps == 4


def test_resume_reproduces_losses(tmp_path, small_corpus):
    first = Trainer(LatentSpeechTextTransformer(micro_config(), seed=0), tiny_train(checkpoint_every=2), small_corpus, tmp_path)
    first.train()
    original = read_metrics(first.metrics_path)

    second = Trainer(LatentSpeechTextTransformer(micro_config(), seed=0), tiny_train(checkpoint_every=2), small_corpus, tmp_path)
    assert second.resume("step-0000002") == 2
    assert [int(r["step"]) for r in read_metrics(second.metrics_path)] == [0, 1]
    second.train()
    resumed = read_metrics(second.metrics_path)
    assert [r["loss"] for r in resumed] == [r["loss"] for r in original]
    assert second.ledger == first.ledger


def test_resume_without_checkpoint(tmp_path, small_corpus):
    trainer = Trainer(LatentSpeechTextTransformer(micro_config(), seed=0), tiny_train(), small_corpus, tmp_path)
    with pytest.raises(CheckpointError) as e:
        trainer.resume()
    assert "latest" in e.value.message


def test_divergence_saves_last_good(tmp_path, small_corpus):
    model = LatentSpeechTextTransformer(micro_config(), seed=0)
    model.params["global.text_head"].data[:] = np.nan
    model.params["enc.speech_embed"].data[:] = np.nan
    trainer = Trainer(model, tiny_train(), small_corpus, tmp_path)
    with pytest.raises(TrainingDivergenceError) as e:
        trainer.train()
    assert e.value.step == 0
    assert trainer.status == RunStatus.FAILED
    assert trainer.store.object_exists("last-good/manifest.json")


def test_token_budget_ends_training(tmp_path, small_corpus):
    cfg = tiny_train(total_steps=200, budget=BudgetMode.DATA, token_budget=60)
    trainer = Trainer(LatentSpeechTextTransformer(micro_config(), seed=0), cfg, small_corpus, tmp_path)
    result = trainer.train()
    assert result.status == RunStatus.COMPLETED
    assert result.steps < 200
    assert result.ledger.text_tokens + result.ledger.speech_tokens >= 60


def test_unit_budget_ends_training(tmp_path, small_corpus):
    cfg = tiny_train(total_steps=50, batch_rows=1, unit_budget=64)
    result = Trainer(LatentSpeechTextTransformer(micro_config(), seed=0), cfg, small_corpus, tmp_path).train()
    assert result.steps == 2
    assert result.ledger.units == 64


def test_stop_request_before_first_step(tmp_path, small_corpus):
    trainer = Trainer(LatentSpeechTextTransformer(micro_config(), seed=0), tiny_train(), small_corpus, tmp_path)
    trainer.request_stop()
    result = trainer.train()
    assert result.status == RunStatus.STOPPED
    assert result.steps == 0
    assert trainer.store.object_exists("latest/manifest.json")


def test_baseline_trains(tmp_path, small_corpus):
    model = SpeechLLM(micro_config(kind=ModelKind.BASE), seed=0)
    result = Trainer(model, tiny_train(total_steps=2), small_corpus, tmp_path).train()
    assert result.steps == 2
    assert result.ledger.savings == pytest.approx(0.0)
    assert result.last_loss is not None
