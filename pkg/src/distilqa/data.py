"""SQuAD-schema data, offset-tracking tokenizer, encoding and synthetic QA."""

from __future__ import annotations

import json
import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, SEP, CLS = "<pad>", "<unk>", "<sep>", "<cls>"
RESERVED = (PAD, UNK, SEP, CLS)
PAD_ID, UNK_ID, SEP_ID, CLS_ID = 0, 1, 2, 3
DEFAULT_MAX_SEQ = 384


class SquadParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class UnencodableExampleError(ValueError):
    pass


@dataclass
class Answer:
    text: str
    answer_start: int


@dataclass
class QAExample:
    id: str
    question: str
    context: str
    answers: list[Answer]

    def is_consistent(self) -> bool:
        return all(self.context[a.answer_start:a.answer_start + len(a.text)] == a.text for a in self.answers)

    @property
    def gold_texts(self) -> list[str]:
        return [a.text for a in self.answers]


@dataclass
class LoadReport:
    loaded: int = 0
    skipped: int = 0
    reasons: list[str] = field(default_factory=list)


def _field(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"missing field '{key}' in {where}")
    return obj[key]


def parse_squad(doc: dict) -> tuple[list[QAExample], LoadReport]:
    report = LoadReport()
    examples = []
    for ai, article in enumerate(_field(doc, "data", "document")):
        for pi, para in enumerate(_field(article, "paragraphs", f"data[{ai}]")):
            where = f"data[{ai}].paragraphs[{pi}]"
            context = _field(para, "context", where)
            for qi, qa in enumerate(_field(para, "qas", where)):
                qwhere = f"{where}.qas[{qi}]"
                qid = str(_field(qa, "id", qwhere))
                question = _field(qa, "question", qwhere)
                answers = [Answer(_field(a, "text", f"{qwhere}.answers"), int(_field(a, "answer_start", f"{qwhere}.answers")))
                           for a in _field(qa, "answers", qwhere)]
                ex = QAExample(qid, question, context, answers)
                if not answers:
                    report.skipped += 1
                    report.reasons.append(f"{qid}: no answers")
                elif not ex.is_consistent():
                    report.skipped += 1
                    report.reasons.append(f"{qid}: answer_start does not match answer text")
                else:
                    examples.append(ex)
    report.loaded = len(examples)
    return examples, report


def load_squad_json(path) -> tuple[list[QAExample], LoadReport]:
    """Flatten a SQuAD v1.1 file into examples, skipping inconsistent answers."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SquadParseError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    examples, report = parse_squad(doc)
    if report.skipped:
        logger.warning("%s: skipped %d malformed entries", path, report.skipped)
    return examples, report


def to_squad_dict(examples: list[QAExample], title: str = "distilqa", version: str = "1.1") -> dict:
    paragraphs: dict[str, list] = {}
    for ex in examples:
        paragraphs.setdefault(ex.context, []).append({
            "id": ex.id,
            "question": ex.question,
            "answers": [{"text": a.text, "answer_start": a.answer_start} for a in ex.answers],
        })
    return {
        "version": version,
        "data": [{"title": title,
                  "paragraphs": [{"context": c, "qas": qas} for c, qas in paragraphs.items()]}],
    }


def write_squad_json(examples: list[QAExample], path, title: str = "distilqa") -> None:
    Path(path).write_text(json.dumps(to_squad_dict(examples, title), ensure_ascii=False, indent=1),
                          encoding="utf-8")


# -- tokenization -----------------------------------------------------------

def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    """Whitespace split, then peel leading/trailing punctuation into single tokens."""
    out = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace():
            j += 1
        a, b = i, j
        lead = []
        while a < b and _is_punct(text[a]):
            lead.append((text[a], a, a + 1))
            a += 1
        trail = []
        while b > a and _is_punct(text[b - 1]):
            trail.append((text[b - 1], b - 1, b))
            b -= 1
        out.extend(lead)
        if a < b:
            out.append((text[a:b], a, b))
        out.extend(reversed(trail))
        i = j
    return out


@dataclass
class Vocab:
    token_to_id: dict[str, int]

    def __post_init__(self):
        for idx, tok in enumerate(RESERVED):
            if self.token_to_id.get(tok) != idx:
                raise ValueError(f"reserved token {tok} must have id {idx}")
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}
        if len(self.id_to_token) != len(self.token_to_id):
            raise ValueError("vocabulary ids are not unique")

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __getitem__(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens) -> list[int]:
        return [self[t] for t in tokens]

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls({k: int(v) for k, v in json.loads(text).items()})

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(examples: list[QAExample], max_size: int) -> Vocab:
    """Most frequent question/context tokens; ties broken lexicographically."""
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed {len(RESERVED)}")
    counts: Counter[str] = Counter()
    for ex in examples:
        counts.update(t for t, _, _ in tokenize_with_offsets(ex.question))
        counts.update(t for t, _, _ in tokenize_with_offsets(ex.context))
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max_size - len(RESERVED)]
    mapping = {tok: i for i, tok in enumerate(RESERVED)}
    for tok, _ in ranked:
        mapping[tok] = len(mapping)
    return Vocab(mapping)


# -- encoding ---------------------------------------------------------------

@dataclass
class EncodedExample:
    """``<cls> question <sep> context <sep>`` with context offsets.

    ``offsets[i]`` belongs to sequence position ``context_start + i``.
    """

    id: str
    token_ids: np.ndarray
    attention_mask: np.ndarray
    context_start: int
    context_end: int  # exclusive
    offsets: list[tuple[int, int]]
    gold_start: int | None = None
    gold_end: int | None = None

    @property
    def length(self) -> int:
        return len(self.token_ids)

    def span_mask(self) -> np.ndarray:
        m = np.zeros(self.length, dtype=bool)
        m[self.context_start:self.context_end] = True
        return m

    def position_offsets(self) -> list[tuple[int, int] | None]:
        out: list[tuple[int, int] | None] = [None] * self.length
        for i, off in enumerate(self.offsets):
            out[self.context_start + i] = off
        return out


def encode_example(ex: QAExample, vocab: Vocab, max_seq: int = DEFAULT_MAX_SEQ, *,
                   with_labels: bool = True) -> EncodedExample:
    q_tokens = [t for t, _, _ in tokenize_with_offsets(ex.question)]
    c_tokens = tokenize_with_offsets(ex.context)
    budget = max_seq - len(q_tokens) - 3
    if budget < 1:
        raise UnencodableExampleError(f"{ex.id}: question leaves no room for the context in {max_seq} tokens")
    kept = c_tokens[:budget]
    ids = [CLS_ID] + vocab.encode(q_tokens) + [SEP_ID]
    context_start = len(ids)
    ids += vocab.encode(t for t, _, _ in kept)
    context_end = len(ids)
    ids.append(SEP_ID)
    offsets = [(s, e) for _, s, e in kept]

    gold_start = gold_end = None
    if with_labels:
        if not ex.answers:
            raise UnencodableExampleError(f"{ex.id}: no gold answer")
        ans = ex.answers[0]
        a, b = ans.answer_start, ans.answer_start + len(ans.text)
        covering = [i for i, (_, s, e) in enumerate(c_tokens) if s < b and e > a]
        if not covering:
            raise UnencodableExampleError(f"{ex.id}: answer covers no token")
        first, last = covering[0], covering[-1]
        if last >= len(kept):
            raise UnencodableExampleError(f"{ex.id}: answer truncated away at max_seq={max_seq}")
        gold_start, gold_end = context_start + first, context_start + last
    return EncodedExample(ex.id, np.asarray(ids, dtype=np.int64), np.ones(len(ids), dtype=bool),
                          context_start, context_end, offsets, gold_start, gold_end)


def encode_dataset(examples: list[QAExample], vocab: Vocab, max_seq: int = DEFAULT_MAX_SEQ, *,
                   with_labels: bool = True) -> tuple[list[EncodedExample], int]:
    """Encode every example; returns the encodable ones and the skip count."""
    out, skipped = [], 0
    for ex in examples:
        try:
            out.append(encode_example(ex, vocab, max_seq, with_labels=with_labels))
        except UnencodableExampleError as exc:
            logger.debug("skip: %s", exc)
            skipped += 1
    return out, skipped


@dataclass
class Batch:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    span_mask: np.ndarray
    gold_start: np.ndarray | None
    gold_end: np.ndarray | None
    examples: list[EncodedExample]


def collate(items: list[EncodedExample]) -> Batch:
    n = max(e.length for e in items)
    ids = np.full((len(items), n), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(items), n), dtype=bool)
    span = np.zeros((len(items), n), dtype=bool)
    for i, e in enumerate(items):
        ids[i, : e.length] = e.token_ids
        mask[i, : e.length] = e.attention_mask
        span[i, e.context_start:e.context_end] = True
    labelled = all(e.gold_start is not None for e in items)
    gs = np.array([e.gold_start for e in items], dtype=np.int64) if labelled else None
    ge = np.array([e.gold_end for e in items], dtype=np.int64) if labelled else None
    return Batch(ids, mask, span, gs, ge, items)


# -- synthetic task ---------------------------------------------------------

def synthetic_example(pairs: list[tuple[int, int]], query: int, qid: str) -> QAExample:
    """Build one key/value example; ``query`` indexes the pair being asked about."""
    words = []
    for k, v in pairs:
        words += [f"k{k}", f"v{v}"]
    # every preceding word plus its separating space
    answer_start = sum(len(w) + 1 for w in words[: 2 * query + 1])
    answer = words[2 * query + 1]
    return QAExample(qid, words[2 * query], " ".join(words), [Answer(answer, answer_start)])


def gen_synthetic(num_examples: int, num_keys: int, context_pairs: int, seed: int) -> list[QAExample]:
    """Key/value lookup QA: the question names a key, the answer is its value.

    Contexts read like ``"k3 v7 k1 v2"``; keys within a context are distinct.
    """
    if not num_keys >= context_pairs >= 1:
        raise ValueError("need num_keys >= context_pairs >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(num_examples):
        keys = rng.choice(num_keys, size=context_pairs, replace=False)
        values = rng.integers(0, num_keys, size=context_pairs)
        query = int(rng.integers(context_pairs))
        out.append(synthetic_example([(int(k), int(v)) for k, v in zip(keys, values)], query, f"syn-{seed}-{i}"))
    return out


def brute_force_answer(ex: QAExample) -> str:
    """String-matching oracle for the synthetic task."""
    words = ex.context.split()
    for w, nxt in zip(words, words[1:]):
        if w == ex.question.strip():
            return nxt
    return ""
