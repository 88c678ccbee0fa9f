"""Batched span prediction and corpus-level F1/EM."""

from __future__ import annotations

from .data import EncodedExample, QAExample, collate
from .encoder import EncoderModel, forward
from .qa import MAX_ANSWER_TOKENS, EvalReport, SpanHead, extract_span, score_predictions, span_logits


def predict(model: EncoderModel, head: SpanHead, encoded: list[EncodedExample],
            contexts: dict[str, str], batch_size: int = 64,
            max_answer_tokens: int = MAX_ANSWER_TOKENS) -> dict[str, str]:
    """Answer text per example id."""
    out = {}
    for i in range(0, len(encoded), batch_size):
        batch = collate(encoded[i:i + batch_size])
        trace = forward(model, batch.token_ids, batch.attention_mask)
        start, end = span_logits(trace.last_hidden, head, batch.span_mask)
        for row, ex in enumerate(batch.examples):
            pred = extract_span(start.data[row, : ex.length], end.data[row, : ex.length],
                                ex.position_offsets(), contexts[ex.id], max_answer_tokens)
            out[ex.id] = pred.text
    return out


def evaluate_model(model: EncoderModel, head: SpanHead, encoded: list[EncodedExample],
                   examples: list[QAExample], batch_size: int = 64) -> EvalReport:
    by_id = {ex.id: ex for ex in examples}
    preds = predict(model, head, encoded, {k: v.context for k, v in by_id.items()}, batch_size)
    return score_predictions(preds, {k: by_id[k].gold_texts for k in preds})
