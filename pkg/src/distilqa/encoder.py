"""RoBERTa-style transformer encoder that records a distillation trace."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import (
    DEFAULT_DTYPE,
    Tensor,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    softmax_lastdim,
)

LN_EPS = 1e-5


class ConfigError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    ff: int
    heads: int
    vocab: int
    max_positions: int

    def __post_init__(self):
        for name in ("layers", "hidden", "ff", "heads", "vocab", "max_positions"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(d[k]) for k in ("layers", "hidden", "ff", "heads", "vocab", "max_positions")})


# Full-scale presets; vocab/max_positions follow the RoBERTa tokenizer layout.
STUDENT_PRESET = ModelConfig(layers=6, hidden=512, ff=3072, heads=16, vocab=50262, max_positions=514)
TEACHER_LARGE_PRESET = ModelConfig(layers=24, hidden=1024, ff=4096, heads=16, vocab=50262, max_positions=514)
# Same widths with the 12-layer depth quoted in the prose description of the teacher.
TEACHER_12_PRESET = ModelConfig(layers=12, hidden=1024, ff=4096, heads=16, vocab=50262, max_positions=514)

PRESETS = {
    "student": STUDENT_PRESET,
    "teacher-large": TEACHER_LARGE_PRESET,
    "teacher-12": TEACHER_12_PRESET,
}


def count_params(config: ModelConfig) -> int:
    """Scalar parameter count of the encoder body (no task head)."""
    d, f = config.hidden, config.ff
    embeddings = config.vocab * d + config.max_positions * d + 2 * d
    per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d)
    return embeddings + config.layers * per_layer


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.hidden, config.ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (config.vocab, d),
        "embed.position": (config.max_positions, d),
        "embed.ln.gamma": (d,),
        "embed.ln.beta": (d,),
    }
    for i in range(config.layers):
        p = f"layer{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "ff.in.weight"] = (d, f)
        shapes[p + "ff.in.bias"] = (f,)
        shapes[p + "ff.out.weight"] = (f, d)
        shapes[p + "ff.out.bias"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
    return shapes


def _init_value(name: str, shape, rng: np.random.Generator, std: float) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape)
    if name.endswith(".beta") or name.endswith(".bias"):
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


@dataclass
class EncoderTrace:
    """Per-forward record used by the distillation losses.

    ``attention_scores`` are the scaled pre-softmax ``QK^T / sqrt(head_dim)``
    matrices with no mask sentinel applied; ``attention_mask`` says which
    positions are real tokens.
    """

    embedding_output: Tensor
    hidden_states: list[Tensor]
    attention_scores: list[Tensor]
    attention_probs: list[Tensor]
    attention_mask: np.ndarray

    @property
    def last_hidden(self) -> Tensor:
        return self.hidden_states[-1] if self.hidden_states else self.embedding_output

    def hidden_at(self, k: int) -> Tensor:
        """Hidden state at layer index ``k``; 0 is the embedding output."""
        return self.embedding_output if k == 0 else self.hidden_states[k - 1]


@dataclass
class EncoderModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def requires_grad_(self, flag: bool = True) -> "EncoderModel":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "EncoderModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
                  for k, v in self.params.items()}
        return EncoderModel(self.config, params)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                                          for k, v in self.params.items()})

    def __call__(self, token_ids, attention_mask=None) -> EncoderTrace:
        return forward(self, token_ids, attention_mask)


def init_model(config: ModelConfig, seed: int, *, std: float = 0.02, dtype=DEFAULT_DTYPE,
               requires_grad: bool = True) -> EncoderModel:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        params[name] = Tensor(_init_value(name, shape, rng, std).astype(dtype),
                              requires_grad=requires_grad, name=name)
    return EncoderModel(config, params)


def _split_heads(x: Tensor, b: int, l: int, h: int, dh: int) -> Tensor:
    return x.reshape(b, l, h, dh).transpose(0, 2, 1, 3)


def forward(model: EncoderModel, token_ids, attention_mask=None) -> EncoderTrace:
    """Run the encoder over a batch of token ids.

    Args:
        model: encoder parameters.
        token_ids: integer array ``[batch, len]``.
        attention_mask: boolean array ``[batch, len]``, True on real tokens.
            Defaults to all True.

    Returns:
        EncoderTrace with the embedding output, every layer's hidden states,
        and every layer's scaled pre-softmax attention scores.
    """
    cfg = model.config
    ids = np.asarray(token_ids.data if isinstance(token_ids, Tensor) else token_ids)
    if ids.ndim != 2:
        raise ValueError(f"token_ids must be [batch, len], got shape {ids.shape}")
    ids = ids.astype(np.int64)
    b, l = ids.shape
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise VocabularyError(f"token id out of range [0, {cfg.vocab}): min {ids.min()}, max {ids.max()}")
    if l > cfg.max_positions:
        raise SequenceLengthError(f"sequence length {l} exceeds max_positions {cfg.max_positions}")
    if attention_mask is None:
        mask = np.ones((b, l), dtype=bool)
    else:
        mask = np.asarray(attention_mask.data if isinstance(attention_mask, Tensor) else attention_mask,
                          dtype=bool)
        if mask.shape != (b, l):
            raise ValueError(f"attention_mask shape {mask.shape} does not match ids {ids.shape}")

    P = model.params
    h, dh = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)

    x = embedding(P["embed.token"], ids) + embedding(P["embed.position"], np.arange(l))
    x = layer_norm(x, P["embed.ln.gamma"], P["embed.ln.beta"], LN_EPS)
    emb_out = x

    key_mask = mask[:, None, None, :]
    hidden, scores_list, probs_list = [], [], []
    for i in range(cfg.layers):
        p = f"layer{i}."
        q = _split_heads(linear(x, P[p + "attn.q.weight"], P[p + "attn.q.bias"]), b, l, h, dh)
        k = _split_heads(linear(x, P[p + "attn.k.weight"], P[p + "attn.k.bias"]), b, l, h, dh)
        v = _split_heads(linear(x, P[p + "attn.v.weight"], P[p + "attn.v.bias"]), b, l, h, dh)
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * scale
        probs = softmax_lastdim(scores, key_mask)
        ctx = matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, l, cfg.hidden)
        attn = linear(ctx, P[p + "attn.o.weight"], P[p + "attn.o.bias"])
        x = layer_norm(x + attn, P[p + "ln1.gamma"], P[p + "ln1.beta"], LN_EPS)
        ff = linear(gelu(linear(x, P[p + "ff.in.weight"], P[p + "ff.in.bias"])),
                    P[p + "ff.out.weight"], P[p + "ff.out.bias"])
        x = layer_norm(x + ff, P[p + "ln2.gamma"], P[p + "ln2.beta"], LN_EPS)
        hidden.append(x)
        scores_list.append(scores)
        probs_list.append(probs)

    return EncoderTrace(emb_out, hidden, scores_list, probs_list, mask)
