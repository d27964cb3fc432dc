"""
Latent Speech-Text Transformer and the token-level SpeechLLM baselines.

LST data flow for one packed row:

1. Local encoder: speech-token embeddings go through sliding-window causal
   self-attention, then each speech patch is pooled by cross-attention from a query
   (learned vector + mean of the patch's token states) restricted to the patch, and
   projected to the global width.
2. Global transformer: text-token embeddings and patch embeddings in timeline order,
   block-causal self-attention with RoPE over unit positions. A text head on its
   outputs predicts the token that follows each unit when that token is text.
3. Local decoder: every row position (speech embedding or decoder text embedding)
   runs window self-attention and cross-attention to [start context] + global outputs
   of the units that end at or before the position; a speech head predicts the next
   speech token.

The baselines run the same global transformer over a merged vocabulary (text ids
first, then raw speech tokens or speech-BPE units) with singleton units.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lst import ops
from lst.checkpoint import CheckpointStore
from lst.corpus import Utterance, Vocabulary
from lst.errors import ConfigError, ContextOverflowError, ContractError, EmptyLossError
from lst.interleave import InterleavedSequence, PackedBatch, PackedRow, sequence_row
from lst.layers import Attention, Block, causal_mask, init_normal, membership_mask, norm_fn, visible_units_mask, window_mask
from lst.parameters import ParameterStore
from lst.patching import Patcher, PatchPlan
from lst.tensor import Tensor, no_grad
from lst.tokenization import MergeTable
from lst.utils import substream
from lst.utils.enums import ModelKind, PatchStrategy, SegmentKind, SilenceMode

logger = logging.getLogger(__name__)

IGNORE = -100


@dataclass
class ModelConfig:
    kind: ModelKind = ModelKind.LST
    d_local: int = 64
    d_global: int = 128
    n_layers_enc: int = 1
    n_layers_global: int = 4
    n_layers_dec: int = 2
    n_heads: int = 4
    n_heads_local: int = 2
    window: int = 64
    rope_theta: float = 5e5
    local_rope_theta: float = 1e4
    speech_vocab: int = 501
    text_vocab: int = 512
    bpe_vocab: int = 1000
    patch_size: int = 4
    ffn_mult: int = 4
    norm: str = "rms"
    activation: str = "silu"
    decoder_predicts_text: bool = False
    max_units: int = 1024
    max_tokens: int = 4096
    init_std: float = 0.02

    def validate(self) -> None:
        for name in ("d_local", "d_global", "n_heads", "n_heads_local", "speech_vocab", "text_vocab", "patch_size",
                     "ffn_mult", "max_units", "max_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError("must be positive", f"model.{name}")
        if self.d_global % self.n_heads:
            raise ConfigError(f"{self.d_global} not divisible by {self.n_heads} heads", "model.d_global")
        if self.d_local % self.n_heads_local:
            raise ConfigError(f"{self.d_local} not divisible by {self.n_heads_local} heads", "model.d_local")
        if (self.d_global // self.n_heads) % 2 or (self.d_local // self.n_heads_local) % 2:
            raise ConfigError("head dimensions must be even for rotary embeddings", "model.n_heads")
        if self.window < 0:
            raise ConfigError("must be >= 0", "model.window")
        if self.n_layers_global < 1 or self.n_layers_enc < 0 or self.n_layers_dec < 1:
            raise ConfigError("need >= 1 global and decoder layer", "model.n_layers_global")
        if self.text_vocab <= 4:
            raise ConfigError("text vocabulary needs room for the four specials", "model.text_vocab")
        if self.norm not in ("rms", "layer"):
            raise ConfigError(f"unknown normalization {self.norm!r}", "model.norm")
        if self.activation not in ("silu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}", "model.activation")


@dataclass
class ForwardOutput:
    text_logits: Tensor  # [units x V_text] for LST, [tokens x V] for baselines
    speech_logits: Tensor | None  # [tokens x V_speech]
    global_hidden: Tensor
    patch_embeddings: Tensor | None = None
    decoder_text_logits: Tensor | None = None


@dataclass
class LossOutput:
    total: Tensor
    text: float | None
    speech: float | None
    n_text: int
    n_speech: int


class GlobalTransformer:
    """Block-causal transformer over units with RoPE on unit positions."""

    def __init__(self, params: ParameterStore, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.norm = norm_fn(cfg.norm)
        self.blocks = [
            Block(params, f"global.layers.{i}", cfg.d_global, cfg.n_heads, cfg.ffn_mult, rng, cfg.init_std,
                  norm=cfg.norm, activation=cfg.activation)
            for i in range(cfg.n_layers_global)
        ]
        self.final_norm = params.add("global.norm", np.ones(cfg.d_global))

    def __call__(self, units: Tensor, offset: int = 0) -> Tensor:
        n = units.shape[0]
        positions = np.arange(offset, offset + n)
        mask = causal_mask(n)
        h = units
        for block in self.blocks:
            h = block(h, mask, positions, self.cfg.rope_theta)
        return self.norm(h, self.final_norm)


class SpeechTextModel:
    """Shared scaffolding: parameters, vocabularies, weight I/O and scoring helpers."""

    kind: ModelKind

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.config = cfg
        self.seed = seed
        self.params = ParameterStore()
        self.text_vocab = Vocabulary.text(cfg.text_vocab)
        self.rng = substream(seed, "init")

    ####################
    # Shared interface #
    ####################
    def forward(self, row: PackedRow) -> ForwardOutput:
        raise NotImplementedError

    def inference_patcher(self) -> Patcher:
        raise NotImplementedError

    def make_row(self, seq: InterleavedSequence) -> PackedRow:
        row = sequence_row(seq, self.inference_patcher(), self.text_vocab)
        self.check_context(row)
        return row

    def check_context(self, row: PackedRow) -> None:
        if row.length > self.config.max_tokens or row.n_units > self.config.max_units:
            raise ContextOverflowError(
                f"row of {row.length} tokens / {row.n_units} units exceeds "
                f"{self.config.max_tokens} tokens / {self.config.max_units} units"
            )

    def unit_count(self, row: PackedRow) -> int:
        return row.n_units

    def param_report(self) -> dict[str, int]:
        report = {
            prefix.rstrip("."): self.params.num_parameters(prefix)
            for prefix in ("enc.", "global.", "dec.")
            if self.params.num_parameters(prefix)
        }
        report["total"] = self.params.num_parameters()
        return report

    def save_weights(self, store: CheckpointStore, key: str, dtype: str = "float32", meta: dict | None = None) -> None:
        store.save_tensors(key, self.params.state_arrays(), dtype=dtype, meta=meta)

    def load_weights(self, store: CheckpointStore, key: str) -> dict:
        arrays, meta = store.load_tensors(key)
        self.params.load_arrays(arrays)
        return meta

    ###########
    # Helpers #
    ###########
    @staticmethod
    def _split_targets(row: PackedRow) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        targets = row.next_token_targets(IGNORE)
        valid = targets != IGNORE
        next_speech = np.zeros(row.length, dtype=bool)
        next_speech[:-1] = row.is_speech[1:]
        return targets, np.flatnonzero(valid & next_speech), np.flatnonzero(valid & ~next_speech)

    @staticmethod
    def _combine(parts: list[tuple[Tensor, np.ndarray]]) -> tuple[Tensor | None, float | None, int]:
        parts = [(logits, targets) for logits, targets in parts if len(targets)]
        if not parts:
            return None, None, 0
        logits = ops.concat_rows([p[0] for p in parts]) if len(parts) > 1 else parts[0][0]
        targets = np.concatenate([p[1] for p in parts])
        loss = ops.softmax_cross_entropy(logits, targets, IGNORE)
        return loss, loss.item(), len(targets)

    def _finish_loss(self, text_parts, speech_parts) -> LossOutput:
        text_loss, text_value, n_text = self._combine(text_parts)
        speech_loss, speech_value, n_speech = self._combine(speech_parts)
        if text_loss is None and speech_loss is None:
            raise EmptyLossError("batch has no text or speech targets")
        if text_loss is None:
            total = speech_loss
        elif speech_loss is None:
            total = text_loss
        else:
            total = text_loss + speech_loss
        return LossOutput(total, text_value, speech_value, n_text, n_speech)


class LatentSpeechTextTransformer(SpeechTextModel):
    kind = ModelKind.LST

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__(cfg, seed)
        p, rng, std = self.params, self.rng, cfg.init_std
        self.norm = norm_fn(cfg.norm)
        # Local encoder
        self.enc_embed = p.add("enc.speech_embed", init_normal(rng, (cfg.speech_vocab, cfg.d_local), std))
        self.enc_blocks = [
            Block(p, f"enc.layers.{i}", cfg.d_local, cfg.n_heads_local, cfg.ffn_mult, rng, std,
                  norm=cfg.norm, activation=cfg.activation)
            for i in range(cfg.n_layers_enc)
        ]
        self.pool_query = p.add("enc.pool.query", init_normal(rng, (cfg.d_local,), std))
        self.pool_norm = p.add("enc.pool.norm", np.ones(cfg.d_local))
        self.pool_attn = Attention(p, "enc.pool.attn", cfg.d_local, cfg.n_heads_local, rng, std)
        self.enc_proj = p.add("enc.proj", init_normal(rng, (cfg.d_local, cfg.d_global), std))
        # Global
        self.text_embed = p.add("global.text_embed", init_normal(rng, (cfg.text_vocab, cfg.d_global), std))
        self.global_model = GlobalTransformer(p, cfg, rng)
        self.text_head = p.add("global.text_head", init_normal(rng, (cfg.d_global, cfg.text_vocab), std))
        # Local decoder
        self.dec_speech_embed = p.add("dec.speech_embed", init_normal(rng, (cfg.speech_vocab, cfg.d_local), std))
        self.dec_text_embed = p.add("dec.text_embed", init_normal(rng, (cfg.text_vocab, cfg.d_local), std))
        self.ctx_proj = p.add("dec.ctx_proj", init_normal(rng, (cfg.d_global, cfg.d_local), std))
        self.bos_ctx = p.add("dec.bos_ctx", init_normal(rng, (cfg.d_local,), std))
        self.dec_blocks = [
            Block(p, f"dec.layers.{i}", cfg.d_local, cfg.n_heads_local, cfg.ffn_mult, rng, std,
                  norm=cfg.norm, activation=cfg.activation, cross=True)
            for i in range(cfg.n_layers_dec)
        ]
        self.dec_norm = p.add("dec.norm", np.ones(cfg.d_local))
        self.speech_head = p.add("dec.speech_head", init_normal(rng, (cfg.d_local, cfg.speech_vocab), std))
        self.dec_text_head = (
            p.add("dec.text_head", init_normal(rng, (cfg.d_local, cfg.text_vocab), std))
            if cfg.decoder_predicts_text
            else None
        )

    def inference_patcher(self) -> Patcher:
        return Patcher(PatchStrategy.STATIC, self.config.patch_size)

    #################
    # Local encoder #
    #################
    def local_encode(self, tokens: np.ndarray, is_speech: np.ndarray, plan: PatchPlan) -> Tensor | None:
        """
        Patch representations, one per speech unit of `plan` in plan order.

        Returns:
            Tensor | None: [speech units x d_global], or None for rows without speech.
        """
        positions = np.flatnonzero(is_speech)
        if positions.size == 0:
            return None
        units = plan.speech_units()
        starts = np.array([plan.units[u].start for u in units])
        ends = np.array([plan.units[u].end for u in units])
        member = membership_mask(starts, ends, positions)
        if not member.any(axis=1).all():
            raise ContractError("plan contains an empty speech patch")
        h = ops.embedding_lookup(self.enc_embed, tokens[positions])
        mask = window_mask(positions, self.config.window)
        for block in self.enc_blocks:
            h = block(h, mask, positions, self.config.local_rope_theta)
        averaging = Tensor(member / member.sum(axis=1, keepdims=True))
        query = ops.add(averaging @ h, self.pool_query)
        keys = self.norm(h, self.pool_norm)
        pooled = query + self.pool_attn(self.norm(query, self.pool_norm), member, context=keys)
        return pooled @ self.enc_proj

    def embed_units(self, tokens: np.ndarray, is_speech: np.ndarray, plan: PatchPlan) -> tuple[Tensor, Tensor | None]:
        """Global input rows in plan order, plus the patch embeddings."""
        text_units = np.flatnonzero(plan.is_text_unit())
        speech_units = plan.speech_units()
        parts, order = [], []
        if text_units.size:
            parts.append(ops.embedding_lookup(self.text_embed, tokens[plan.starts[text_units]]))
            order.extend(text_units.tolist())
        patches = self.local_encode(tokens, is_speech, plan)
        if patches is not None:
            parts.append(patches)
            order.extend(speech_units)
        stacked = ops.concat_rows(parts) if len(parts) > 1 else parts[0]
        inverse = np.empty(len(order), dtype=np.int64)
        inverse[np.asarray(order)] = np.arange(len(order))
        return ops.take_rows(stacked, inverse), patches

    def global_forward(self, units: Tensor) -> Tensor:
        return self.global_model(units)

    #################
    # Local decoder #
    #################
    def local_decode(
        self,
        tokens: np.ndarray,
        is_speech: np.ndarray,
        global_out: Tensor,
        plan: PatchPlan,
        unit_ends: np.ndarray | None = None,
    ) -> Tensor:
        """
        Decoder states for every row position.

        `unit_ends` overrides the last position of each global output; generation uses
        it to hide a patch that is still being filled.

        Raises:
            ContractError: If plan, tokens and global outputs disagree in length.
        """
        unit_ends = plan.ends if unit_ends is None else np.asarray(unit_ends)
        if plan.length != len(tokens) or global_out.shape[0] != len(unit_ends):
            raise ContractError(
                f"plan covers {plan.length} positions / {len(unit_ends)} units, "
                f"got {len(tokens)} tokens / {global_out.shape[0]} global outputs"
            )
        positions = np.arange(len(tokens))
        speech_pos = np.flatnonzero(is_speech)
        text_pos = np.flatnonzero(~is_speech)
        parts, order = [], []
        if speech_pos.size:
            parts.append(ops.embedding_lookup(self.dec_speech_embed, tokens[speech_pos]))
            order.extend(speech_pos.tolist())
        if text_pos.size:
            parts.append(ops.embedding_lookup(self.dec_text_embed, tokens[text_pos]))
            order.extend(text_pos.tolist())
        stacked = ops.concat_rows(parts) if len(parts) > 1 else parts[0]
        inverse = np.empty(len(order), dtype=np.int64)
        inverse[np.asarray(order)] = positions
        x = ops.take_rows(stacked, inverse)
        context = ops.concat_rows(
            [ops.reshape(self.bos_ctx, (1, self.config.d_local)), global_out @ self.ctx_proj]
        )
        context_mask = visible_units_mask(positions, unit_ends)
        mask = window_mask(positions, self.config.window)
        for block in self.dec_blocks:
            x = block(x, mask, positions, self.config.local_rope_theta, context=context, context_mask=context_mask)
        return self.norm(x, self.dec_norm)

    def forward(self, row: PackedRow) -> ForwardOutput:
        units, patches = self.embed_units(row.tokens, row.is_speech, row.plan)
        hidden = self.global_forward(units)
        dec = self.local_decode(row.tokens, row.is_speech, hidden, row.plan)
        return ForwardOutput(
            text_logits=hidden @ self.text_head,
            speech_logits=dec @ self.speech_head,
            global_hidden=hidden,
            patch_embeddings=patches,
            decoder_text_logits=dec @ self.dec_text_head if self.dec_text_head is not None else None,
        )

    ########
    # Loss #
    ########
    def _text_rows(self, out: ForwardOutput, row: PackedRow, positions: np.ndarray) -> Tensor:
        if out.decoder_text_logits is not None:
            return ops.take_rows(out.decoder_text_logits, positions)
        return ops.take_rows(out.text_logits, row.plan.unit_of[positions])

    def loss(self, batch: PackedBatch | Sequence[PackedRow]) -> LossOutput:
        """Text NTP loss from the text head plus speech NTP loss from the decoder."""
        rows = batch.rows if isinstance(batch, PackedBatch) else batch
        text_parts, speech_parts = [], []
        for row in rows:
            out = self.forward(row)
            targets, speech_t, text_t = self._split_targets(row)
            if speech_t.size:
                speech_parts.append((ops.take_rows(out.speech_logits, speech_t), targets[speech_t]))
            if text_t.size:
                text_parts.append((self._text_rows(out, row, text_t), targets[text_t]))
        return self._finish_loss(text_parts, speech_parts)

    lst_loss = loss

    def position_nlls(self, row: PackedRow) -> np.ndarray:
        """-log p(token_j | tokens_<j) for every position j >= 1 (NaN at 0)."""
        with no_grad():
            out = self.forward(row)
        speech_lp = ops.log_softmax(out.speech_logits.data)
        if out.decoder_text_logits is not None:
            text_lp = ops.log_softmax(out.decoder_text_logits.data)
            text_index = np.arange(row.length)
        else:
            text_lp = ops.log_softmax(out.text_logits.data)
            text_index = row.plan.unit_of
        nll = np.full(row.length, np.nan)
        for j in range(1, row.length):
            if row.is_speech[j]:
                nll[j] = -speech_lp[j - 1, row.tokens[j]]
            else:
                nll[j] = -text_lp[text_index[j - 1], row.tokens[j]]
        return nll

    def patch_embeddings(self, utt: Utterance) -> tuple[np.ndarray, list[int]]:
        """Encoder outputs of the word patches of a pure-speech utterance (aligned, silence separate)."""
        seq = InterleavedSequence.speech_only(utt)
        row = sequence_row(seq, Patcher(PatchStrategy.ALIGNED, silence_mode=SilenceMode.SEPARATE), self.text_vocab)
        with no_grad():
            patches = self.local_encode(row.tokens, row.is_speech, row.plan)
        kinds = [row.plan.units[u].kind for u in row.plan.speech_units()]
        keep = [i for i, kind in enumerate(kinds) if kind == SegmentKind.WORD]
        return patches.data[keep], list(utt.text_tokens)


class SpeechLLM(SpeechTextModel):
    """
    Decoder-only baseline over the merged vocabulary [text ids | speech ids + V_text].
    `kind=BPE` consumes speech-BPE units from `merge_table` instead of raw tokens.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, merge_table: MergeTable | None = None):
        super().__init__(cfg, seed)
        self.kind = cfg.kind
        if cfg.kind == ModelKind.BPE:
            if merge_table is None:
                raise ConfigError("the BPE baseline needs a merge table", "model.bpe_vocab")
            if merge_table.vocab_size > cfg.bpe_vocab:
                raise ConfigError(f"merge table has {merge_table.vocab_size} units", "model.bpe_vocab")
            self.speech_size = cfg.bpe_vocab
        else:
            self.speech_size = cfg.speech_vocab
        self.merge_table = merge_table
        self.vocab_size = cfg.text_vocab + self.speech_size
        p, rng, std = self.params, self.rng, cfg.init_std
        self.embed = p.add("global.embed", init_normal(rng, (self.vocab_size, cfg.d_global), std))
        self.global_model = GlobalTransformer(p, cfg, rng)
        self.head = p.add("global.head", init_normal(rng, (cfg.d_global, self.vocab_size), std))

    def inference_patcher(self) -> Patcher:
        return Patcher(PatchStrategy.SINGLETON)

    def encode_speech(self, seq: InterleavedSequence) -> InterleavedSequence:
        if self.merge_table is None:
            return seq
        return seq.map_speech(self.merge_table.encode)

    def make_row(self, seq: InterleavedSequence) -> PackedRow:
        return super().make_row(self.encode_speech(seq))

    def merged_ids(self, tokens: np.ndarray, is_speech: np.ndarray) -> np.ndarray:
        return tokens + is_speech * self.config.text_vocab

    def baseline_forward(self, row: PackedRow) -> Tensor:
        """Logits [tokens x merged vocab]."""
        ids = self.merged_ids(row.tokens, row.is_speech)
        hidden = self.global_model(ops.embedding_lookup(self.embed, ids))
        return hidden @ self.head

    def forward(self, row: PackedRow) -> ForwardOutput:
        ids = self.merged_ids(row.tokens, row.is_speech)
        hidden = self.global_model(ops.embedding_lookup(self.embed, ids))
        return ForwardOutput(text_logits=hidden @ self.head, speech_logits=None, global_hidden=hidden)

    def loss(self, batch: PackedBatch | Sequence[PackedRow]) -> LossOutput:
        rows = batch.rows if isinstance(batch, PackedBatch) else batch
        text_parts, speech_parts = [], []
        for row in rows:
            logits = self.baseline_forward(row)
            targets, speech_t, text_t = self._split_targets(row)
            merged = targets.copy()
            merged[speech_t] += self.config.text_vocab
            if speech_t.size:
                speech_parts.append((ops.take_rows(logits, speech_t), merged[speech_t]))
            if text_t.size:
                text_parts.append((ops.take_rows(logits, text_t), merged[text_t]))
        return self._finish_loss(text_parts, speech_parts)

    def position_nlls(self, row: PackedRow) -> np.ndarray:
        with no_grad():
            lp = ops.log_softmax(self.baseline_forward(row).data)
        ids = self.merged_ids(row.tokens, row.is_speech)
        nll = np.full(row.length, np.nan)
        nll[1:] = -lp[np.arange(row.length - 1), ids[1:]]
        return nll


def build_model(cfg: ModelConfig, seed: int = 0, merge_table: MergeTable | None = None) -> SpeechTextModel:
    if cfg.kind == ModelKind.LST:
        model = LatentSpeechTextTransformer(cfg, seed)
    else:
        model = SpeechLLM(cfg, seed, merge_table)
    logger.info(f"Built {cfg.kind.value} model: {model.param_report()}")
    return model
