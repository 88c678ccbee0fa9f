"""Layered distillation losses: layer mapping, attention/hidden terms, total objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    DEFAULT_DTYPE,
    Tensor,
    matmul,
    mse,
    reduce_mean,
    reduce_sum,
    soft_cross_entropy,
)
from .encoder import EncoderTrace, ModelConfig

ATTENTION_TARGETS = ("scores", "probs")


class DistillConfigError(ValueError):
    pass


class MappingError(DistillConfigError):
    pass


class ProjectionError(DistillConfigError):
    pass


def layer_map_uniform(student_layers: int, teacher_layers: int) -> list[int]:
    """Map student layer ``k`` (1-based) onto teacher layer ``k * stride``."""
    if student_layers <= 0 or teacher_layers <= 0:
        raise MappingError("layer counts must be positive")
    if teacher_layers % student_layers:
        raise MappingError(
            f"{teacher_layers} teacher layers cannot be split uniformly over {student_layers} "
            "student layers; pass an explicit layer map instead"
        )
    stride = teacher_layers // student_layers
    return [k * stride for k in range(1, student_layers + 1)]


def validate_layer_map(layer_map, student_layers: int, teacher_layers: int) -> list[int]:
    m = [int(v) for v in layer_map]
    if len(m) != student_layers:
        raise MappingError(f"layer map has {len(m)} entries for {student_layers} student layers")
    if any(b <= a for a, b in zip(m, m[1:])):
        raise MappingError(f"layer map must be strictly increasing: {m}")
    if m and (m[0] < 1 or m[-1] > teacher_layers):
        raise MappingError(f"layer map {m} leaves the teacher range 1..{teacher_layers}")
    return m


@dataclass
class DistillPlan:
    """Layer map, hidden-state projections and loss weights.

    ``projections`` is keyed by student layer index, 0 being the embedding
    output; a value of ``None`` means the identity (equal widths only).
    """

    layer_map: list[int]
    projections: dict[int, Tensor | None]
    w_task: float = 1.0
    w_layer: float = 1.0
    w_hard: float = 0.0
    temperature: float = 1.0
    attention_target: str = "scores"

    def __post_init__(self):
        if self.temperature <= 0:
            raise DistillConfigError("temperature must be positive")
        if self.attention_target not in ATTENTION_TARGETS:
            raise DistillConfigError(f"attention_target must be one of {ATTENTION_TARGETS}")
        if any(b <= a for a, b in zip(self.layer_map, self.layer_map[1:])):
            raise MappingError(f"layer map must be strictly increasing: {self.layer_map}")

    def parameters(self) -> list[Tensor]:
        return [p for p in self.projections.values() if p is not None]

    def named_parameters(self):
        return [(f"plan.proj.{k}", p) for k, p in sorted(self.projections.items()) if p is not None]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def config_dict(self) -> dict:
        return {
            "layer_map": list(self.layer_map),
            "identity_projections": sorted(k for k, p in self.projections.items() if p is None),
            "w_task": self.w_task,
            "w_layer": self.w_layer,
            "w_hard": self.w_hard,
            "temperature": self.temperature,
            "attention_target": self.attention_target,
        }


def init_projection(d_student: int, d_teacher: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = math.sqrt(6.0 / (d_student + d_teacher))
    return rng.uniform(-bound, bound, size=(d_student, d_teacher)).astype(dtype)


def build_plan(student: ModelConfig, teacher: ModelConfig, layer_map=None, *, seed: int = 0,
               identity_projection: bool = False, w_task: float = 1.0, w_layer: float = 1.0,
               w_hard: float = 0.0, temperature: float = 1.0, attention_target: str = "scores",
               dtype=DEFAULT_DTYPE) -> DistillPlan:
    if student.heads != teacher.heads:
        raise DistillConfigError(
            f"attention distillation needs equal head counts (student {student.heads}, teacher {teacher.heads})"
        )
    if layer_map is None:
        layer_map = layer_map_uniform(student.layers, teacher.layers)
    layer_map = validate_layer_map(layer_map, student.layers, teacher.layers)
    if identity_projection and student.hidden != teacher.hidden:
        raise ProjectionError("identity projection requires equal hidden sizes")
    rng = np.random.default_rng(seed)
    projections: dict[int, Tensor | None] = {}
    for k in range(student.layers + 1):
        if identity_projection:
            projections[k] = None
        else:
            projections[k] = Tensor(init_projection(student.hidden, teacher.hidden, rng, dtype),
                                    requires_grad=True, name=f"plan.proj.{k}")
    return DistillPlan(layer_map, projections, w_task, w_layer, w_hard, temperature, attention_target)


def _detached(t: Tensor) -> Tensor:
    return Tensor(t.data) if t.requires_grad else t


def attention_loss(student_scores: Tensor, teacher_scores: Tensor, mask) -> Tensor:
    """Mean over heads of the per-head MSE, skipping padded query/key entries."""
    if student_scores.ndim != 4 or teacher_scores.ndim != 4:
        raise ValueError("attention tensors must be [batch, heads, len, len]")
    if student_scores.shape[1] != teacher_scores.shape[1]:
        raise DistillConfigError(
            f"head count mismatch: student {student_scores.shape[1]} vs teacher {teacher_scores.shape[1]}"
        )
    if student_scores.shape != teacher_scores.shape:
        raise ValueError(f"attention shapes differ: {student_scores.shape} vs {teacher_scores.shape}")
    b, h, l, _ = student_scores.shape
    m = np.ones((b, l), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pair = (m[:, :, None] & m[:, None, :])[:, None, :, :]
    per_head_count = float(pair.sum())
    if per_head_count == 0:
        raise ValueError("attention_loss: every position is masked")
    diff = student_scores - teacher_scores
    sq = diff * diff * pair.astype(student_scores.dtype)
    per_head = reduce_sum(sq, axis=(0, 2, 3)) * (1.0 / per_head_count)
    return reduce_mean(per_head)


def hidden_loss(student_hidden: Tensor, teacher_hidden: Tensor, W_h: Tensor | None, mask) -> Tensor:
    """Masked MSE between projected student states and teacher states."""
    if W_h is None:
        projected = student_hidden
    else:
        if W_h.shape != (student_hidden.shape[-1], teacher_hidden.shape[-1]):
            raise ProjectionError(
                f"projection shape {W_h.shape} does not map {student_hidden.shape[-1]} -> "
                f"{teacher_hidden.shape[-1]}"
            )
        projected = matmul(student_hidden, W_h)
    if projected.shape != teacher_hidden.shape:
        raise ProjectionError(f"projected student {projected.shape} vs teacher {teacher_hidden.shape}")
    if mask is None:
        return mse(projected, teacher_hidden)
    full = np.broadcast_to(np.asarray(mask, dtype=bool)[..., None], teacher_hidden.shape)
    return mse(projected, teacher_hidden, full)


def layer_loss(student_hidden: Tensor, teacher_hidden: Tensor, W_h: Tensor | None, mask,
               student_attention: Tensor | None = None, teacher_attention: Tensor | None = None) -> Tensor:
    """Attention plus hidden term; the embedding layer passes no attention."""
    hid = hidden_loss(student_hidden, teacher_hidden, W_h, mask)
    if student_attention is None:
        return hid
    return attention_loss(student_attention, teacher_attention, mask) + hid


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LossBreakdown:
    total: float
    task: float
    hard: float
    embedding: float
    attention: list[float] = field(default_factory=list)
    hidden: list[float] = field(default_factory=list)

    @property
    def layers(self) -> float:
        return self.embedding + sum(self.attention) + sum(self.hidden)

    def to_dict(self) -> dict:
        d = {"total": self.total, "task": self.task, "hard": self.hard, "embedding": self.embedding,
             "layers": self.layers}
        for k, (a, h) in enumerate(zip(self.attention, self.hidden), start=1):
            d[f"layer{k}.attention"] = a
            d[f"layer{k}.hidden"] = h
        return d


def total_distill_loss(student_trace: EncoderTrace, teacher_trace: EncoderTrace,
                       student_task_logits: tuple[Tensor, Tensor], teacher_task_logits,
                       plan: DistillPlan, gold=None, hard_loss_fn=None) -> tuple[Tensor, LossBreakdown]:
    """Task term plus weighted sum of embedding and per-layer distillation terms.

    Args:
        student_trace / teacher_trace: encoder traces; the teacher side is
            always treated as a constant.
        student_task_logits: ``(start, end)`` student logits, masked.
        teacher_task_logits: ``(start, end)`` teacher logits (tensors or arrays).
        plan: layer map, projections and weights.
        gold: optional ``(gold_start, gold_end)`` used when ``plan.w_hard > 0``.
        hard_loss_fn: callable ``(start, end, gs, ge) -> Tensor`` for the hard term.

    Returns:
        The scalar loss and a per-term breakdown.
    """
    L = len(student_trace.hidden_states)
    K = len(teacher_trace.hidden_states)
    if len(plan.layer_map) != L:
        raise DistillConfigError(f"plan maps {len(plan.layer_map)} layers but the student has {L}")
    if plan.layer_map and plan.layer_map[-1] > K:
        raise DistillConfigError(f"plan references teacher layer {plan.layer_map[-1]} of {K}")
    if L + 1 != len(plan.projections):
        raise DistillConfigError(f"plan has {len(plan.projections)} projections for {L + 1} student indices")
    mask = student_trace.attention_mask
    T = plan.temperature

    s_start, s_end = student_task_logits
    t_start, t_end = (np.asarray(x.data if isinstance(x, Tensor) else x) for x in teacher_task_logits)
    task = (soft_cross_entropy(s_start, _softmax(t_start / T), T)
            + soft_cross_entropy(s_end, _softmax(t_end / T), T)) * 0.5
    total = task * plan.w_task
    hard_value = 0.0
    if plan.w_hard:
        if gold is None or hard_loss_fn is None:
            raise DistillConfigError("w_hard > 0 needs gold labels and a hard loss")
        hard = hard_loss_fn(s_start, s_end, *gold)
        hard_value = hard.item()
        total = total + hard * plan.w_hard

    layer_terms = []
    emb = hidden_loss(student_trace.embedding_output, _detached(teacher_trace.embedding_output),
                      plan.projections[0], mask)
    layer_terms.append(emb)
    att_values, hid_values = [], []
    use_probs = plan.attention_target == "probs"
    for k in range(1, L + 1):
        g = plan.layer_map[k - 1]
        s_att = (student_trace.attention_probs if use_probs else student_trace.attention_scores)[k - 1]
        t_att = (teacher_trace.attention_probs if use_probs else teacher_trace.attention_scores)[g - 1]
        att = attention_loss(s_att, _detached(t_att), mask)
        hid = hidden_loss(student_trace.hidden_states[k - 1], _detached(teacher_trace.hidden_states[g - 1]),
                          plan.projections[k], mask)
        att_values.append(att.item())
        hid_values.append(hid.item())
        layer_terms.append(att + hid)

    layer_sum = layer_terms[0]
    for term in layer_terms[1:]:
        layer_sum = layer_sum + term
    if plan.w_layer:
        total = total + layer_sum * plan.w_layer
    breakdown = LossBreakdown(total.item(), task.item(), hard_value, emb.item(), att_values, hid_values)
    return total, breakdown
