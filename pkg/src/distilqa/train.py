"""Teacher fine-tuning and student distillation loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .autograd import Tensor, backward
from .checkpoint import Checkpoint, load_checkpoint
from .data import EncodedExample, collate
from .distill import DistillPlan, build_plan, total_distill_loss
from .encoder import EncoderModel, ModelConfig, forward, init_model
from .qa import SpanHead, span_logits, task_loss_hard

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-5
    batch_size: int = 32
    max_seq: int = 384
    epochs: int = 20
    max_grad_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: str = "constant"
    init_std: float = 0.02

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        for name in ("batch_size", "max_seq", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_grad_norm <= 0 or self.eps <= 0 or self.init_std <= 0:
            raise ValueError("max_grad_norm, eps and init_std must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * scale
    return scale


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; a missing gradient counts as zero."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match the parameter list")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        p.data = p.data - lr * update


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "linear":
        return cfg.learning_rate * max(0.0, 1.0 - step / total_steps)
    return cfg.learning_rate


def _optimize(params: list[Tensor], loss: Tensor, state: AdamState, cfg: TrainConfig, lr: float) -> float:
    for p in params:
        p.grad = None
    backward(loss)
    scale = clip_grad_norm(params, cfg.max_grad_norm)
    adam_step(params, [p.grad for p in params], state, lr, cfg.betas, cfg.eps)
    for p in params:
        p.grad = None
    return scale


@dataclass
class TrainResult:
    model: EncoderModel
    head: SpanHead
    log: list[dict] = field(default_factory=list)
    plan: DistillPlan | None = None


EpochHook = Callable[[int, "TrainResult"], dict | None]


def init_student(config: ModelConfig, seed: int, std: float = 0.02,
                 dtype=np.float64) -> tuple[EncoderModel, SpanHead]:
    """Fresh encoder plus span head, both seeded from ``seed``."""
    return (init_model(config, seed, std=std, dtype=dtype),
            SpanHead.init(config.hidden, seed + 1, std=std, dtype=dtype))


def train_teacher(model: EncoderModel, head: SpanHead, dataset: list[EncodedExample], cfg: TrainConfig,
                  on_epoch: EpochHook | None = None) -> TrainResult:
    """Fine-tune ``model`` and ``head`` in place on the hard span loss."""
    if not dataset:
        raise TrainingError("training dataset is empty")
    model.requires_grad_(True)
    head.requires_grad_(True)
    params = model.parameters() + head.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model, head)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        total, clipped = 0.0, 0
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            batch = collate([dataset[i] for i in idx])
            trace = forward(model, batch.token_ids, batch.attention_mask)
            start, end = span_logits(trace.last_hidden, head, batch.span_mask)
            loss = task_loss_hard(start, end, batch.gold_start, batch.gold_end, batch.span_mask)
            total += loss.item() * len(idx)
            scale = _optimize(params, loss, state, cfg, _lr_at(cfg, step, total_steps))
            clipped += scale < 1.0
            step += 1
        entry = {"epoch": epoch, "loss": total / len(dataset), "clipped_steps": int(clipped)}
        if on_epoch is not None:
            entry.update(on_epoch(epoch, result) or {})
        result.log.append(entry)
        logger.info("teacher epoch %d loss %.5f", epoch, entry["loss"])
    return result


def distill_student(teacher_ckpt: Checkpoint | str | Path, student_config: ModelConfig,
                    dataset: list[EncodedExample], plan_config: dict | None, cfg: TrainConfig,
                    on_epoch: EpochHook | None = None) -> TrainResult:
    """Train a fresh student against a frozen teacher with the layered objective.

    ``plan_config`` keys: ``layer_map`` (None for uniform), ``w_task``,
    ``w_layer``, ``w_hard``, ``temperature``, ``attention_target``,
    ``identity_projection``.
    """
    if not dataset:
        raise TrainingError("training dataset is empty")
    teacher = teacher_ckpt if isinstance(teacher_ckpt, Checkpoint) else load_checkpoint(teacher_ckpt)
    t_model, t_head = teacher.model, teacher.head
    t_model.requires_grad_(False)
    t_head.requires_grad_(False)

    plan_kwargs = dict(plan_config or {})
    layer_map = plan_kwargs.pop("layer_map", None)
    plan = build_plan(student_config, t_model.config, layer_map, seed=cfg.seed + 2, **plan_kwargs)
    model, head = init_student(student_config, cfg.seed, cfg.init_std)
    params = model.parameters() + head.parameters() + plan.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model, head, plan=plan)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            batch = collate([dataset[i] for i in idx])
            t_trace = forward(t_model, batch.token_ids, batch.attention_mask)
            t_logits = span_logits(t_trace.last_hidden, t_head, batch.span_mask)
            s_trace = forward(model, batch.token_ids, batch.attention_mask)
            s_logits = span_logits(s_trace.last_hidden, head, batch.span_mask)
            loss, parts = total_distill_loss(
                s_trace, t_trace, s_logits, t_logits, plan,
                gold=(batch.gold_start, batch.gold_end),
                hard_loss_fn=lambda s, e, gs, ge: task_loss_hard(s, e, gs, ge, batch.span_mask),
            )
            for k, v in parts.to_dict().items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            _optimize(params, loss, state, cfg, _lr_at(cfg, step, total_steps))
            step += 1
        entry = {"epoch": epoch, "loss": sums["total"] / len(dataset)}
        entry.update({k: v / len(dataset) for k, v in sums.items() if k != "total"})
        if on_epoch is not None:
            entry.update(on_epoch(epoch, result) or {})
        result.log.append(entry)
        logger.info("distill epoch %d loss %.5f", epoch, entry["loss"])
    return result
