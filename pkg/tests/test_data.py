import json

import numpy as np
import pytest

from distilqa.data import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    UNK_ID,
    Answer,
    QAExample,
    SchemaError,
    SquadParseError,
    UnencodableExampleError,
    Vocab,
    brute_force_answer,
    build_vocab,
    collate,
    encode_dataset,
    encode_example,
    gen_synthetic,
    load_squad_json,
    parse_squad,
    synthetic_example,
    tokenize_with_offsets,
    write_squad_json,
)

FIXTURE = [
    QAExample("q1", "¿Qué animal?", "El gato duerme.", [Answer("gato", 3)]),
    QAExample("q2", "¿Qué hace?", "El gato duerme.", [Answer("duerme", 8)]),
    QAExample("q3", "¿Dónde?", "En la casa grande, junto al río.", [Answer("la casa grande", 3), Answer("casa", 6)]),
]


def _doc(answers):
    return {"data": [{"paragraphs": [{"context": "El gato duerme.",
                                      "qas": [{"id": "x", "question": "q", "answers": answers}]}]}]}


class TestSquadIO:
    def test_write_reload_equality(self, tmp_path):
        path = tmp_path / "s.json"
        write_squad_json(FIXTURE, path)
        examples, report = load_squad_json(path)
        assert examples == FIXTURE
        assert report.loaded == 3 and report.skipped == 0

    def test_groups_shared_context(self, tmp_path):
        path = tmp_path / "s.json"
        write_squad_json(FIXTURE, path)
        paragraphs = json.loads(path.read_text())["data"][0]["paragraphs"]
        assert [len(p["qas"]) for p in paragraphs] == [2, 1]

    def test_skips_mismatched_start(self):
        examples, report = parse_squad(_doc([{"text": "gato", "answer_start": 4}]))
        assert examples == [] and report.skipped == 1

    def test_skips_no_answers(self):
        _, report = parse_squad(_doc([]))
        assert report.skipped == 1

    def test_missing_field(self):
        with pytest.raises(SchemaError, match="context"):
            parse_squad({"data": [{"paragraphs": [{"qas": []}]}]})

    def test_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"data": [\n  oops]}')
        with pytest.raises(SquadParseError, match="line 2"):
            load_squad_json(path)


class TestTokenize:
    def test_offsets(self):
        assert tokenize_with_offsets("El gato.") == [("El", 0, 2), ("gato", 3, 7), (".", 7, 8)]

    def test_inverted_marks(self):
        assert [t for t, _, _ in tokenize_with_offsets("¿Qué?")] == ["¿", "Qué", "?"]

    def test_offsets_slice_text(self):
        text = "  Hola,  mundo (dos)  "
        for tok, s, e in tokenize_with_offsets(text):
            assert text[s:e] == tok

    def test_empty(self):
        assert tokenize_with_offsets("   ") == []


class TestVocab:
    def test_reserved_and_order(self):
        vocab = build_vocab(FIXTURE, 100)
        assert [vocab[t] for t in ("<pad>", "<unk>", "<sep>", "<cls>")] == [PAD_ID, UNK_ID, SEP_ID, CLS_ID]
        # ".", "?" and "¿" tie at three occurrences; "." sorts first
        assert vocab["."] == 4

    def test_cap_and_unknown(self):
        vocab = build_vocab(FIXTURE, 6)
        assert len(vocab) == 6
        assert vocab.encode(["zzz"]) == [UNK_ID]

    def test_json_round_trip(self, tmp_path):
        vocab = build_vocab(FIXTURE, 50)
        vocab.save(tmp_path / "v.json")
        assert Vocab.load(tmp_path / "v.json").token_to_id == vocab.token_to_id


class TestEncode:
    def test_layout_and_labels(self):
        ex = FIXTURE[0]
        vocab = build_vocab(FIXTURE, 100)
        enc = encode_example(ex, vocab, 32)
        q = [t for t, _, _ in tokenize_with_offsets(ex.question)]
        assert enc.token_ids[0] == CLS_ID and enc.token_ids[len(q) + 1] == SEP_ID
        assert enc.token_ids[-1] == SEP_ID
        assert enc.context_start == len(q) + 2
        s, e = enc.offsets[enc.gold_start - enc.context_start]
        assert ex.context[s:e] == "gato"
        assert enc.gold_start == enc.gold_end

    def test_multi_token_answer(self):
        enc = encode_example(FIXTURE[2], build_vocab(FIXTURE, 100), 64)
        offs = enc.position_offsets()
        assert FIXTURE[2].context[offs[enc.gold_start][0]:offs[enc.gold_end][1]] == "la casa grande"

    def test_truncation(self):
        vocab = build_vocab(FIXTURE, 100)
        enc = encode_example(FIXTURE[1], vocab, 8, with_labels=False)
        assert enc.length == 8
        with pytest.raises(UnencodableExampleError):
            encode_example(FIXTURE[1], vocab, 8)

    def test_dataset_counts_skips(self):
        vocab = build_vocab(FIXTURE, 100)
        encoded, skipped = encode_dataset(FIXTURE, vocab, 8)
        assert len(encoded) + skipped == 3 and skipped >= 1

    def test_collate(self):
        vocab = build_vocab(FIXTURE, 100)
        encoded, _ = encode_dataset(FIXTURE, vocab, 64)
        batch = collate(encoded)
        n = max(e.length for e in encoded)
        assert batch.token_ids.shape == batch.attention_mask.shape == (3, n)
        short = int(np.argmin([e.length for e in encoded]))
        assert np.all(batch.token_ids[short, encoded[short].length:] == PAD_ID)
        assert not batch.attention_mask[short, encoded[short].length:].any()
        assert np.array_equal(batch.span_mask[0], np.pad(encoded[0].span_mask(), (0, n - encoded[0].length)))
        assert batch.gold_start.tolist() == [e.gold_start for e in encoded]


class TestSynthetic:
    def test_hand_example(self):
        ex = synthetic_example([(3, 7), (1, 2)], 1, "a")
        assert ex.context == "k3 v7 k1 v2" and ex.question == "k1"
        assert ex.answers == [Answer("v2", 9)]

    def test_deterministic(self):
        assert gen_synthetic(20, 10, 3, 5) == gen_synthetic(20, 10, 3, 5)
        assert gen_synthetic(20, 10, 3, 5) != gen_synthetic(20, 10, 3, 6)

    def test_distinct_keys_and_consistency(self):
        for ex in gen_synthetic(200, 6, 4, 1):
            keys = ex.context.split()[::2]
            assert len(set(keys)) == 4
            assert ex.is_consistent()

    def test_brute_force_solves(self):
        examples = gen_synthetic(300, 20, 4, 2)
        assert all(brute_force_answer(ex) == ex.answers[0].text for ex in examples)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            gen_synthetic(5, 2, 3, 0)

    def test_reload_without_skips(self, tmp_path):
        path = tmp_path / "syn.json"
        examples = gen_synthetic(100, 20, 4, 3)
        write_squad_json(examples, path)
        loaded, report = load_squad_json(path)
        assert report.skipped == 0 and len(loaded) == 100
