"""Causal transformer backbone and the assembled token sequence.

The sequence is [context | proposal | key points | future states] with
optional proposal/key-point components. Blocks are pre-norm GPT-2 style
(LN -> attention -> residual, LN -> SiLU MLP -> residual) with learned
absolute positions shared across all components. There is no final
layer norm: a zero-layer stack is exactly embeddings + positions, which
keeps debug configs transparent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, LengthError, ShapeError
from .rng import make_rng
from .tensorcore import Module, Tensor

CONTEXT_TOKENS = 21
N_KEY_POINTS = 5
N_STATE_TOKENS = 80
MAX_SEQ_LEN = 128        # 21 + 1 + 5 + 80 = 107 plus margin


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    d_model: int
    d_inner: int
    heads: int
    preset: str = "custom"
    max_seq_len: int = MAX_SEQ_LEN

    def __post_init__(self):
        if self.layers < 0 or self.d_model < 1 or self.d_inner < 1 or self.heads < 1:
            raise ConfigError(f"non-positive dimension in {self}")
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads {self.heads}")


# Published table of backbone shapes, plus a CPU-scale ladder whose names
# approximate their own backbone parameter counts.
PRESETS: dict[str, ModelConfig] = {
    "300k": ModelConfig(1, 64, 256, 1, preset="300k"),
    "16m": ModelConfig(4, 256, 1024, 8, preset="16m"),
    "124m": ModelConfig(12, 768, 3072, 12, preset="124m"),
    "1.5b": ModelConfig(48, 1600, 6400, 25, preset="1.5b"),
    "10k": ModelConfig(1, 24, 96, 1, preset="10k"),
    "50k": ModelConfig(2, 44, 176, 1, preset="50k"),
    "250k": ModelConfig(3, 80, 320, 2, preset="250k"),
    "1m": ModelConfig(4, 136, 544, 4, preset="1m"),
}

DESK_LADDER = ("10k", "50k", "250k")


def get_preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    return PRESETS[name]


def backbone_param_count(config: ModelConfig) -> int:
    """Trainable parameters of the backbone (blocks + position table)."""
    d, di = config.d_model, config.d_inner
    per_layer = (
        2 * d                    # ln1
        + d * 3 * d + 3 * d      # qkv
        + d * d + d              # attention out projection
        + 2 * d                  # ln2
        + d * di + di            # mlp up
        + di * d + d             # mlp down
    )
    return config.layers * per_layer + config.max_seq_len * d


def gpt2_reference_param_count(config: ModelConfig, vocab_size: int = 50257,
                               n_positions: int = 1024) -> int:
    """What this shape would weigh as a full GPT-2 language model.

    Reporting convention only: adds the token/position embeddings and the
    final norm a text LM carries, which is how the conventional size labels
    of the larger shapes (16m/124m/1.5b) come out. Our model has no token
    vocabulary, so its real count is backbone_param_count plus heads.
    """
    d, di = config.d_model, config.d_inner
    per_layer = 2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d + d * di + di + di * d + d
    return config.layers * per_layer + vocab_size * d + n_positions * d + 2 * d


class TransformerBlock(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d, di = config.d_model, config.d_inner
        self.heads = config.heads
        self.ln1 = self.add_module("ln1", tc.LayerNorm(d))
        self.w_qkv = self.register("w_qkv", rng.normal(0.0, 0.02, (d, 3 * d)))
        self.b_qkv = self.register("b_qkv", np.zeros(3 * d))
        self.w_proj = self.register("w_proj", rng.normal(0.0, 0.02, (d, d)))
        self.b_proj = self.register("b_proj", np.zeros(d))
        self.ln2 = self.add_module("ln2", tc.LayerNorm(d))
        self.mlp_up = self.add_module("mlp_up", tc.Linear(d, di, rng))
        self.mlp_down = self.add_module("mlp_down", tc.Linear(di, d, rng))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + tc.causal_self_attention(self.ln1(x), self.w_qkv, self.b_qkv,
                                         self.w_proj, self.b_proj, self.heads)
        return x + self.mlp_down(tc.silu(self.mlp_up(self.ln2(x))))


class TransformerBackbone(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.wpe = self.register("wpe", rng.normal(0.0, 0.02,
                                                   (config.max_seq_len, config.d_model)))
        self.blocks: list[TransformerBlock] = []
        for i in range(config.layers):
            self.blocks.append(self.add_module(f"block{i}", TransformerBlock(config, rng)))

    def __call__(self, emb: Tensor) -> Tensor:
        squeeze = emb.ndim == 2
        if squeeze:
            emb = tc.reshape(emb, (1,) + emb.shape)
        if emb.ndim != 3 or emb.shape[2] != self.config.d_model:
            raise ShapeError(f"backbone input {emb.shape}, expected "
                             f"(batch, seq, {self.config.d_model})")
        seq = emb.shape[1]
        if seq > self.config.max_seq_len:
            raise LengthError(f"sequence length {seq} exceeds configured "
                              f"maximum {self.config.max_seq_len}")
        x = emb + tc.broadcast_to(tc.reshape(self.wpe[0:seq], (1, seq, -1)), emb.shape)
        for block in self.blocks:
            x = block(x)
        return tc.reshape(x, x.shape[1:]) if squeeze else x


def build_backbone(config: ModelConfig, seed: int) -> TransformerBackbone:
    """Deterministic backbone for (config, seed)."""
    return TransformerBackbone(config, make_rng(seed, "backbone", config.preset,
                                                config.layers, config.d_model))


def forward(model: TransformerBackbone, tokens: "TokenSequence") -> Tensor:
    """Hidden states for an assembled sequence; hidden[i] sees tokens[0..i]."""
    return model(tokens.embeddings)


# ---------------------------------------------------------------------------
# sequence assembly


@dataclass(frozen=True)
class SequenceLayout:
    """Index spans of each component in the assembled sequence."""
    context_span: tuple[int, int]
    proposal_span: tuple[int, int] | None
    keypoint_span: tuple[int, int] | None
    state_span: tuple[int, int]

    def __post_init__(self):
        spans = [self.context_span]
        if self.proposal_span is not None:
            spans.append(self.proposal_span)
        if self.keypoint_span is not None:
            spans.append(self.keypoint_span)
        spans.append(self.state_span)
        cursor = 0
        for lo, hi in spans:
            if lo != cursor or hi < lo:
                raise ConfigError(f"layout spans not contiguous/ordered: {spans}")
            cursor = hi

    @property
    def total(self) -> int:
        return self.state_span[1]


@dataclass
class TokenSequence:
    embeddings: Tensor           # (batch, seq, d_model)
    layout: SequenceLayout

    def __post_init__(self):
        if self.embeddings.shape[-2] != self.layout.total:
            raise ShapeError(f"embeddings seq {self.embeddings.shape} vs layout "
                             f"length {self.layout.total}")


def assemble_sequence(context_embs: Tensor,
                      proposal_emb: Tensor | None = None,
                      keypoint_embs: Tensor | None = None,
                      state_query_embs: Tensor | None = None) -> TokenSequence:
    """Concatenate components into one causal sequence and record spans.

    All inputs are (batch, n, d_model); key points, when present, are
    ordered as the training configuration orders them (farthest-first in
    the standard backward setup). Callers pass ground-truth embeddings
    for teacher forcing or generated ones during rollout.
    """
    if state_query_embs is None:
        raise ConfigError("assemble_sequence: state query embeddings are required")
    parts = [context_embs]
    d = context_embs.shape[-1]
    cursor = context_embs.shape[-2]
    context_span = (0, cursor)
    proposal_span = None
    keypoint_span = None
    for name, part in (("proposal", proposal_emb), ("keypoint", keypoint_embs),
                       ("state", state_query_embs)):
        if part is None:
            continue
        if part.shape[-1] != d or part.ndim != context_embs.ndim:
            raise ShapeError(f"{name} embeddings {part.shape} incompatible with "
                             f"context {context_embs.shape}")
        span = (cursor, cursor + part.shape[-2])
        cursor = span[1]
        if name == "proposal":
            proposal_span = span
        elif name == "keypoint":
            keypoint_span = span
        else:
            state_span = span
        parts.append(part)
    layout = SequenceLayout(context_span, proposal_span, keypoint_span, state_span)
    return TokenSequence(embeddings=tc.concat(parts, axis=-2), layout=layout)
