"""Extractive QA head, span decoding and SQuAD-style metrics."""

from __future__ import annotations

import json
import re
import string
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import NEG_INF, DEFAULT_DTYPE, Tensor, linear, log_softmax_lastdim, masked_fill, reduce_sum

DEFAULT_ARTICLES = ("el", "la", "los", "las", "un", "una", "unos", "unas")
MAX_ANSWER_TOKENS = 30


class LabelError(ValueError):
    pass


class EmptyPredictionError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass
class SpanHead:
    weight: Tensor  # [hidden, 2]
    bias: Tensor  # [2]

    @classmethod
    def init(cls, hidden: int, seed: int, std: float = 0.02, dtype=DEFAULT_DTYPE,
             requires_grad: bool = True) -> "SpanHead":
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, std, size=(hidden, 2)).astype(dtype)
        return cls(Tensor(w, requires_grad=requires_grad, name="head.weight"),
                   Tensor(np.zeros(2, dtype=dtype), requires_grad=requires_grad, name="head.bias"))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def named_parameters(self):
        return [("head.weight", self.weight), ("head.bias", self.bias)]

    def num_params(self) -> int:
        return self.weight.data.size + self.bias.data.size

    def requires_grad_(self, flag: bool = True) -> "SpanHead":
        self.weight.requires_grad = flag
        self.bias.requires_grad = flag
        return self

    def astype(self, dtype) -> "SpanHead":
        return SpanHead(Tensor(self.weight.data.astype(dtype), self.weight.requires_grad, name="head.weight"),
                        Tensor(self.bias.data.astype(dtype), self.bias.requires_grad, name="head.bias"))

    def copy(self) -> "SpanHead":
        return self.astype(self.weight.dtype)


def head_param_count(hidden: int) -> int:
    return 2 * hidden + 2


def span_logits(hidden: Tensor, head: SpanHead, mask) -> tuple[Tensor, Tensor]:
    """Start and end logits ``[batch, len]``; masked positions get ``NEG_INF``."""
    out = linear(hidden, head.weight, head.bias)
    keep = np.asarray(mask, dtype=bool)
    start = masked_fill(out[..., 0], ~keep, NEG_INF)
    end = masked_fill(out[..., 1], ~keep, NEG_INF)
    return start, end


def _hard_ce(logits: Tensor, gold: np.ndarray) -> Tensor:
    logp = log_softmax_lastdim(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, gold[..., None], 1.0, axis=-1)
    rows = onehot.size // onehot.shape[-1]
    return -reduce_sum(logp * onehot) * (1.0 / rows)


def task_loss_hard(start_logits: Tensor, end_logits: Tensor, gold_start, gold_end, mask=None) -> Tensor:
    """Mean of start and end cross-entropies against gold token indices."""
    gs = np.atleast_1d(np.asarray(gold_start, dtype=np.int64))
    ge = np.atleast_1d(np.asarray(gold_end, dtype=np.int64))
    squeeze = start_logits.ndim == 1
    if squeeze:
        start_logits = start_logits.reshape(1, -1)
        end_logits = end_logits.reshape(1, -1)
    n = start_logits.shape[-1]
    if np.any((gs < 0) | (gs >= n) | (ge < 0) | (ge >= n)):
        raise LabelError("gold index outside the sequence")
    rows = np.arange(len(gs))
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(start_logits.shape)
        bad = ~m[rows, gs] | ~m[rows, ge]
    else:
        bad = (start_logits.data[rows, gs] <= NEG_INF / 2) | (end_logits.data[rows, ge] <= NEG_INF / 2)
    if np.any(bad):
        raise LabelError("gold index falls on a masked position")
    return (_hard_ce(start_logits, gs) + _hard_ce(end_logits, ge)) * 0.5


@dataclass
class Prediction:
    start_token: int
    end_token: int
    text: str
    score: float


def extract_span(start_logits, end_logits, context_token_offsets, context: str,
                 max_answer_tokens: int = MAX_ANSWER_TOKENS) -> Prediction:
    """Best-scoring legal span ``(s, e)`` by ``start[s] + end[e]``.

    ``context_token_offsets`` has one entry per sequence position: a
    ``(char_start, char_end)`` pair for context tokens and ``None`` elsewhere.
    Ties go to the smallest start, then the shortest span.
    """
    s = np.asarray(start_logits.data if isinstance(start_logits, Tensor) else start_logits, dtype=float)
    e = np.asarray(end_logits.data if isinstance(end_logits, Tensor) else end_logits, dtype=float)
    n = len(context_token_offsets)
    s, e = s[:n], e[:n]
    in_ctx = np.array([o is not None for o in context_token_offsets], dtype=bool)
    idx = np.arange(n)
    width = idx[None, :] - idx[:, None]
    legal = (width >= 0) & (width < max_answer_tokens) & in_ctx[:, None] & in_ctx[None, :]
    if not legal.any():
        raise EmptyPredictionError("no legal answer span in the context region")
    scores = np.where(legal, s[:, None] + e[None, :], -np.inf)
    flat = int(np.argmax(scores))
    start, end = divmod(flat, n)
    text = context[context_token_offsets[start][0]:context_token_offsets[end][1]]
    return Prediction(start, end, text, float(scores[start, end]))


def _is_punct(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith("P")


def normalize_answer(text: str, articles=DEFAULT_ARTICLES) -> str:
    text = text.lower()
    text = "".join(ch for ch in text if not _is_punct(ch))
    if articles:
        pattern = r"\b(" + "|".join(re.escape(a) for a in articles) + r")\b"
        text = re.sub(pattern, " ", text)
    return " ".join(text.split())


def _require_golds(golds) -> list[str]:
    if isinstance(golds, str):
        golds = [golds]
    golds = list(golds)
    if not golds:
        raise EvaluationError("at least one gold answer is required")
    return golds


def exact_match(prediction: str, golds, articles=DEFAULT_ARTICLES) -> int:
    golds = _require_golds(golds)
    p = normalize_answer(prediction, articles)
    return int(any(p == normalize_answer(g, articles) for g in golds))


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_score(prediction: str, golds, articles=DEFAULT_ARTICLES) -> float:
    golds = _require_golds(golds)
    p = normalize_answer(prediction, articles).split()
    return max(_f1_single(p, normalize_answer(g, articles).split()) for g in golds)


@dataclass
class ExampleRecord:
    id: str
    prediction: str
    golds: list[str]
    f1: float
    em: int


@dataclass
class EvalReport:
    f1: float
    em: float
    per_example: list[ExampleRecord] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: list[ExampleRecord]) -> "EvalReport":
        if not records:
            raise EvaluationError("no examples to evaluate")
        f1 = 100.0 * sum(r.f1 for r in records) / len(records)
        em = 100.0 * sum(r.em for r in records) / len(records)
        return cls(f1, em, records)

    def to_dict(self) -> dict:
        return {"f1": self.f1, "em": self.em, "per_example": [asdict(r) for r in self.per_example]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False), encoding="utf-8")


def score_predictions(predictions: dict[str, str], golds: dict[str, list[str]],
                      articles=DEFAULT_ARTICLES) -> EvalReport:
    records = []
    for qid, pred in predictions.items():
        g = golds[qid]
        records.append(ExampleRecord(qid, pred, list(g), f1_score(pred, g, articles),
                                     exact_match(pred, g, articles)))
    return EvalReport.from_records(records)
