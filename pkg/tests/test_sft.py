"""Record construction, marker parsing, tokenizer, and vocabulary contracts."""

import numpy as np
import pytest

from nerlab.errors import ContractError, DataFormatError, MarkerParseError
from nerlab.sft import (
    DEFAULT_TEMPLATE,
    ENT_CLOSE,
    ENT_OPEN,
    IM_END,
    IM_START,
    OUTPUT_STEM,
    SPECIAL_TOKENS,
    EntityTypeDef,
    NerExample,
    bio_entity_spans,
    build_records,
    build_vocab,
    detokenize,
    layout_record,
    parse_output,
    read_records,
    record_from_dict,
    record_to_dict,
    render_instruction,
    repair_bio,
    split_long_sentences,
    tokenize,
    write_records,
)
from nerlab.synth import synth_corpus

PERSON = EntityTypeDef(
    name="Person",
    description="the entity that represents the identity or role of a specific person",
)

SENTENCE = (
    "True , but I imagine it would be a lot lower and as I pointed out to "
    "Andrew Little would be cheaper than [ eliminating fees ."
)


def person_example():
    tokens = SENTENCE.split()
    tags = ["O"] * len(tokens)
    i = tokens.index("Andrew")
    tags[i] = "B-Person"
    tags[i + 1] = "I-Person"
    return NerExample(tokens=tokens, tags=tags, source_id="doc#0")


class TestBuildRecords:
    def test_single_person_record(self):
        records = build_records(person_example(), [PERSON])
        assert len(records) == 1
        rec = records[0]
        assert rec.output == (
            "<im_start> I can extract entities for you, the extracted entities are "
            "<<< Andrew Little >>> <im_end>"
        )
        assert rec.input == SENTENCE
        i = SENTENCE.split().index("Andrew")
        assert rec.gold_spans == [(i, i + 2)]

    def test_zero_entity_record_still_framed(self):
        ex = NerExample(tokens="no people here".split(), tags=["O"] * 3, source_id="x")
        rec = build_records(ex, [PERSON])[0]
        assert rec.output.startswith(IM_START) and rec.output.endswith(IM_END)
        assert ENT_OPEN not in rec.output and ENT_CLOSE not in rec.output
        assert rec.gold_spans == []

    def test_zero_entity_record_can_be_excluded(self):
        ex = NerExample(tokens="no people here".split(), tags=["O"] * 3, source_id="x")
        assert build_records(ex, [PERSON], include_empty=False) == []

    def test_two_entities_in_input_order(self):
        ex = NerExample(
            tokens="buy Flip MinoHD or Flip MinoHD now".split(),
            tags=["O", "B-product", "I-product", "O", "B-product", "I-product", "O"],
            source_id="x",
        )
        rec = build_records(ex, [EntityTypeDef("product", "a product")])[0]
        assert rec.output.count(ENT_OPEN) == 2
        assert parse_output(rec.output) == ["Flip MinoHD", "Flip MinoHD"]

    def test_one_record_per_type(self):
        ex = person_example()
        types = [PERSON, EntityTypeDef("Location", "a place")]
        records = build_records(ex, types)
        assert [r.entity_type.name for r in records] == ["Person", "Location"]

    def test_empty_sentence_skipped_with_counter(self):
        stats = {}
        assert build_records(NerExample([], [], "e"), [PERSON], stats=stats) == []
        assert stats["skipped_empty"] == 1

    def test_template_placeholders_required(self):
        with pytest.raises(ContractError):
            build_records(person_example(), [PERSON], template="no placeholders")


class TestParseOutput:
    def test_single_entity(self):
        text = f"{IM_START} stuff {ENT_OPEN} Andrew Little {ENT_CLOSE} {IM_END}"
        assert parse_output(text) == ["Andrew Little"]

    def test_no_entities(self):
        assert parse_output(f"{IM_START} nothing {IM_END}") == []

    def test_ordering(self):
        assert parse_output("<<< a >>> <<< b >>>") == ["a", "b"]

    def test_unclosed_marker(self):
        with pytest.raises(MarkerParseError) as err:
            parse_output("x <<< y")
        assert err.value.position == 2

    def test_nested_marker(self):
        with pytest.raises(MarkerParseError):
            parse_output("<<< a <<< b >>> >>>")

    def test_stray_close(self):
        with pytest.raises(MarkerParseError):
            parse_output("a >>> b")

    def test_strict_requires_end_marker(self):
        with pytest.raises(MarkerParseError):
            parse_output("<<< a >>>", strict=True)
        assert parse_output(f"<<< a >>> {IM_END}", strict=True) == ["a"]


class TestRoundTrip:
    def test_parse_recovers_gold_surfaces_in_order(self):
        corpus, defs = synth_corpus(40, seed=3)
        for ex in corpus:
            for rec in build_records(ex, defs):
                parsed = parse_output(rec.output)
                expected = [
                    " ".join(ex.tokens[s:e]) for s, e in rec.gold_spans
                ]
                assert parsed == expected
                input_tokens = rec.input.split()
                for ent in parsed:
                    words = ent.split()
                    assert any(
                        input_tokens[i : i + len(words)] == words
                        for i in range(len(input_tokens) - len(words) + 1)
                    )

    def test_record_count_is_tagset_size(self):
        corpus, defs = synth_corpus(10, seed=4)
        for ex in corpus:
            assert len(build_records(ex, defs)) == len(defs)


class TestBioHandling:
    def test_repair_orphan_inside_tag(self):
        fixed, n = repair_bio(["O", "I-X", "I-X", "O"])
        assert fixed == ["O", "B-X", "I-X", "O"] and n == 1

    def test_repair_type_switch(self):
        fixed, n = repair_bio(["B-X", "I-Y"])
        assert fixed == ["B-X", "B-Y"] and n == 1

    def test_span_extraction(self):
        spans = bio_entity_spans(["B-A", "I-A", "O", "B-B", "B-A"])
        assert spans == [(0, 2, "A"), (3, 4, "B"), (4, 5, "A")]


class TestTokenizer:
    @pytest.fixture()
    def vocab(self):
        corpus, defs = synth_corpus(30, seed=5)
        texts = [OUTPUT_STEM] + [render_instruction(DEFAULT_TEMPLATE, d) for d in defs]
        return build_vocab(corpus, texts), corpus

    def test_round_trip(self, vocab):
        v, corpus = vocab
        text = " ".join(corpus[0].tokens)
        assert detokenize(tokenize(text, v), v) == text

    def test_specials_are_single_tokens(self, vocab):
        v, _ = vocab
        for tok in SPECIAL_TOKENS:
            ids = tokenize(tok, v)
            assert len(ids) == 1 and v.id_to_token[ids[0]] == tok

    def test_unknown_word_maps_to_unk(self, vocab):
        v, _ = vocab
        assert tokenize("zyzzyva", v) == [v.unk_id]

    def test_deterministic_rebuild(self, vocab):
        _, corpus = vocab
        a = build_vocab(corpus, ["alpha beta"])
        b = build_vocab(corpus, ["alpha beta"])
        assert a.id_to_token == b.id_to_token

    def test_vocab_size_matches_independent_scan(self):
        corpus, defs = synth_corpus(200, seed=6)
        texts = [OUTPUT_STEM] + [render_instruction(DEFAULT_TEMPLATE, d) for d in defs]
        v = build_vocab(corpus, texts)
        distinct = set()
        for ex in corpus:
            distinct.update(ex.tokens)
        for t in texts:
            distinct.update(t.split())
        assert len(v) == len(distinct - set(SPECIAL_TOKENS)) + len(SPECIAL_TOKENS)

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataFormatError):
            build_vocab([], [])

    def test_special_collision_dropped(self):
        ex = NerExample(tokens=["<im_end>", "word"], tags=["O", "O"], source_id="x")
        v = build_vocab([ex], [])
        assert v.id_to_token.count("<im_end>") == 1
        assert tokenize("word", v) != [v.unk_id]


class TestLayout:
    def test_segment_boundaries(self):
        rec = build_records(person_example(), [PERSON])[0]
        corpus = [person_example()]
        v = build_vocab(corpus, [rec.instruction, rec.output])
        layout = layout_record(rec, v)
        n_instr = len(rec.instruction.split())
        n_input = len(rec.input.split())
        assert layout.input_start == n_instr
        assert layout.output_start == n_instr + n_input
        assert layout.tokens[layout.output_start] == v.im_start_id
        assert layout.tokens[-1] == v.im_end_id


class TestSplitLongSentences:
    def test_short_sentence_untouched(self):
        ex = person_example()
        assert split_long_sentences(ex, 100) == [ex]

    def test_split_preserves_entities(self):
        ex = person_example()
        pieces = split_long_sentences(ex, 10)
        assert sum(len(p.tokens) for p in pieces) == len(ex.tokens)
        assert all(len(p.tokens) <= 10 for p in pieces)
        spans = [
            " ".join(p.tokens[s:e])
            for p in pieces
            for s, e, name in bio_entity_spans(p.tags)
        ]
        assert spans == ["Andrew Little"]


class TestSerialization:
    def test_jsonl_round_trip(self, tmp_path):
        records = build_records(person_example(), [PERSON])
        path = tmp_path / "records.jsonl"
        write_records(records, path)
        loaded = read_records(path, {"Person": PERSON.description})
        assert len(loaded) == 1
        assert loaded[0].output == records[0].output
        assert loaded[0].gold_spans == records[0].gold_spans
        assert loaded[0].entity_type == PERSON

    def test_dict_round_trip(self):
        rec = build_records(person_example(), [PERSON])[0]
        again = record_from_dict(record_to_dict(rec))
        assert again.instruction == rec.instruction
        assert again.gold_spans == rec.gold_spans
