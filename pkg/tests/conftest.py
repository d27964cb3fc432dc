import os
import sys

import numpy as np
import pytest
from dotenv import load_dotenv

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from lst.corpus import AlignmentSpanList, SynthConfig, Utterance, synth_corpus
from lst.gradcheck import GradCheckResult
from lst.interleave import InterleavedSequence, PackedRow, Run, sequence_row
from lst.model import LatentSpeechTextTransformer, ModelConfig, SpeechLLM
from lst.patching import Patcher, PatchSegmentation
from lst.tensor import Tensor
from lst.utils.enums import Modality, ModelKind, PatchStrategy

load_dotenv()

GRAD_TOLERANCE = 1e-4


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run multi-seed and long training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def micro_config(**overrides) -> ModelConfig:
    """Tiny model with 7 speech tokens and 12 text ids (8 content + 4 specials)."""
    values = dict(
        d_local=16,
        d_global=16,
        n_layers_enc=1,
        n_layers_global=2,
        n_layers_dec=1,
        n_heads=2,
        n_heads_local=2,
        window=8,
        speech_vocab=7,
        text_vocab=12,
        patch_size=3,
        ffn_mult=2,
        max_units=64,
        max_tokens=128,
    )
    values.update(overrides)
    return ModelConfig(**values)


def mixed_sequence() -> InterleavedSequence:
    """12 tokens: <t> 1 5 3 <s> + 7 speech tokens."""
    return InterleavedSequence(
        [
            Run(Modality.TEXT, (1, 5, 3), (0, 3), words=(1, 5, 3)),
            Run(Modality.SPEECH, (0, 3, 6, 2, 2, 5, 1), (0, 7)),
        ]
    )


def speech_utterance() -> Utterance:
    """Silence {0,1} and {5}; words {2..4} and {6,7}."""
    return Utterance(
        text_tokens=[2, 6],
        speech_tokens=[0, 0, 3, 4, 5, 1, 2, 6],
        alignment=AlignmentSpanList([(0, 2, 4), (1, 6, 7)]),
    )


class LSTTester:
    """Shared helpers and assertions for model, patching and training tests."""

    def __init__(self, model: LatentSpeechTextTransformer | SpeechLLM):
        self.model = model

    def row(self, seq: InterleavedSequence, patcher: Patcher | None = None) -> PackedRow:
        return sequence_row(seq, patcher or self.model.inference_patcher(), self.model.text_vocab)

    def zero_grads(self) -> None:
        self.model.params.zero_grad()

    @staticmethod
    def assert_tiles(segmentation: PatchSegmentation, T: int):
        segmentation.validate()
        assert segmentation.T == T
        covered = [i for s in segmentation for i in range(s.start, s.end + 1)]
        assert covered == list(range(T))

    @staticmethod
    def assert_gradients_match(results: list[GradCheckResult], tolerance: float = GRAD_TOLERANCE):
        worst = {r.name: r.max_relative_error for r in results if r.max_relative_error > tolerance}
        assert not worst, f"gradient mismatch: {worst}"
        assert all(r.checked > 0 for r in results)

    @staticmethod
    def assert_zero_grad(tensor: Tensor, rows):
        assert tensor.grad is not None
        np.testing.assert_array_equal(tensor.grad[np.asarray(rows)], 0.0)

    @staticmethod
    def assert_nonzero_grad(tensor: Tensor, rows):
        assert tensor.grad is not None
        assert np.any(tensor.grad[np.asarray(rows)] != 0.0)

    @staticmethod
    def assert_close(a, b, atol: float = 1e-12):
        np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=0, atol=atol)


@pytest.fixture(scope="module")
def lst_model() -> LatentSpeechTextTransformer:
    return LatentSpeechTextTransformer(micro_config(), seed=0)


@pytest.fixture(scope="module")
def base_model() -> SpeechLLM:
    return SpeechLLM(micro_config(kind=ModelKind.BASE), seed=0)


@pytest.fixture
def tester(lst_model) -> LSTTester:
    tester = LSTTester(lst_model)
    tester.zero_grads()
    return tester


@pytest.fixture(scope="module")
def small_synth() -> SynthConfig:
    """Synthetic language that fits the micro model's vocabularies."""
    return SynthConfig(
        n_word_types=8,
        speech_vocab=7,
        silence_tokens=2,
        successors=3,
        mean_word_frames=3.0,
        mean_sil_frames=2.0,
        min_words=3,
        max_words=6,
    )


@pytest.fixture(scope="module")
def small_corpus(small_synth) -> list[Utterance]:
    return synth_corpus(16, seed=0, cfg=small_synth)


@pytest.fixture(scope="module")
def static_patcher() -> Patcher:
    return Patcher(PatchStrategy.STATIC, 3)
