import logging
from dataclasses import dataclass, field

import numpy as np

from lst import ops
from lst.errors import ConfigError, ContractError
from lst.interleave import InterleavedSequence, Run, sequence_row
from lst.model import LatentSpeechTextTransformer
from lst.patching import Patcher
from lst.tensor import Tensor, no_grad
from lst.utils import ceil_div
from lst.utils.enums import Modality, PatchStrategy

logger = logging.getLogger(__name__)


@dataclass
class SamplingConfig:
    greedy: bool = True
    temperature: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("must be positive", "sampling.temperature")


@dataclass
class GenerationResult:
    tokens: list[int] = field(default_factory=list)
    global_advances: int = 0
    truncations: int = 0


def _truncate_left(seq: InterleavedSequence, max_tokens: int, p: int) -> InterleavedSequence:
    """Drop whole leading runs, or leading multiples of p tokens of the first run, until it fits."""
    runs = list(seq.runs)
    excess = sum(len(r) + 1 for r in runs) - max_tokens
    while excess > 0 and len(runs) > 1:
        first = runs[0]
        if len(first) + 1 <= excess:
            runs.pop(0)
            excess -= len(first) + 1
            continue
        cut = ceil_div(excess, p) * p if first.modality == Modality.SPEECH else excess
        cut = min(cut, len(first))
        runs[0] = Run(first.modality, first.tokens[cut:], (first.origin[0] + cut, first.origin[1]))
        excess -= cut
    if excess > 0:
        last = runs[-1]
        cut = ceil_div(excess, p) * p
        if cut >= len(last):
            raise ContractError(f"context of {max_tokens} tokens cannot hold the current patch")
        runs[-1] = Run(last.modality, last.tokens[cut:], (last.origin[0] + cut, last.origin[1]))
    return InterleavedSequence(runs, seq.source)


def generate_speech(
    model: LatentSpeechTextTransformer,
    prompt: InterleavedSequence,
    steps: int,
    sampling: SamplingConfig | None = None,
) -> GenerationResult:
    """
    Continue `prompt` with `steps` speech tokens under static patching.

    Tokens are decoded locally; the global model runs again only when the patch being
    filled reaches the patch size, so it advances exactly once every p generated tokens.
    Prompts longer than the model context are truncated from the left.
    """
    sampling = sampling or SamplingConfig()
    sampling.validate()
    p = model.config.patch_size
    patcher = Patcher(PatchStrategy.STATIC, p)
    rng = np.random.default_rng(sampling.seed)
    seq = prompt
    if not seq.runs or seq.runs[-1].modality != Modality.SPEECH:
        seq = InterleavedSequence(list(seq.runs) + [Run(Modality.SPEECH, ())], seq.source)
    result = GenerationResult()
    hidden: Tensor | None = None
    complete_units = -1

    with no_grad():
        for _ in range(steps):
            if seq.n_tokens > model.config.max_tokens:
                seq = _truncate_left(seq, model.config.max_tokens, p)
                result.truncations += 1
                complete_units = -1
            row = sequence_row(seq, patcher, model.text_vocab)
            open_tokens = len(seq.runs[-1]) % p
            n_complete = row.n_units - (1 if open_tokens else 0)
            if n_complete != complete_units:
                prefix = row.length - open_tokens
                closed = sequence_row(_drop_tail(seq, open_tokens), patcher, model.text_vocab)
                units, _ = model.embed_units(closed.tokens, closed.is_speech, closed.plan)
                hidden = model.global_forward(units)
                if complete_units >= 0 and n_complete > complete_units:
                    result.global_advances += n_complete - complete_units
                complete_units = n_complete
                if closed.length != prefix:
                    raise ContractError("closed prefix does not match the current row")
            dec = model.local_decode(row.tokens, row.is_speech, hidden, row.plan, row.plan.ends[:n_complete])
            logits = (dec @ model.speech_head).data[-1]
            token = _choose(logits, sampling, rng)
            result.tokens.append(token)
            last = seq.runs[-1]
            seq = InterleavedSequence(
                list(seq.runs[:-1]) + [Run(Modality.SPEECH, last.tokens + (token,), last.origin)], seq.source
            )
    logger.debug(f"Generated {len(result.tokens)} tokens with {result.global_advances} global advances")
    return result


def _drop_tail(seq: InterleavedSequence, n: int) -> InterleavedSequence:
    if n == 0:
        return seq
    last = seq.runs[-1]
    return InterleavedSequence(list(seq.runs[:-1]) + [Run(last.modality, last.tokens[:-n], last.origin)], seq.source)


def _choose(logits: np.ndarray, sampling: SamplingConfig, rng: np.random.Generator) -> int:
    if sampling.greedy:
        return int(np.argmax(logits))
    probs = np.exp(ops.log_softmax(logits[None, :] / sampling.temperature)[0])
    return int(rng.choice(len(probs), p=probs))
