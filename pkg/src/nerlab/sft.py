"""Instruction/input/output record construction for entity extraction.

A BIO-tagged sentence becomes one record per entity type: the instruction
names and describes the type, the input is the raw sentence, and the output
wraps every gold entity of that type in ``<<< ... >>>`` markers inside an
``<im_start> ... <im_end>`` frame. ``parse_output`` inverts the convention.

The tokenizer is deliberately word-level: tokens are whitespace-separated
strings, entity boundaries stay token-aligned, and the six special tokens
are never produced by corpus text.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

from .errors import ContractError, DataFormatError, MarkerParseError

IM_START = "<im_start>"
IM_END = "<im_end>"
ENT_OPEN = "<<<"
ENT_CLOSE = ">>>"
UNK = "<unk>"
PAD = "<pad>"

SPECIAL_TOKENS = (PAD, UNK, IM_START, IM_END, ENT_OPEN, ENT_CLOSE)

OUTPUT_STEM = "I can extract entities for you, the extracted entities are"

DEFAULT_TEMPLATE = (
    "Please extract the {type} entities in the sentence given below. "
    "The entity type {type} refers to {description}."
)


@dataclass
class NerExample:
    tokens: list[str]
    tags: list[str]
    source_id: str


@dataclass(frozen=True)
class EntityTypeDef:
    name: str
    description: str


@dataclass
class SftRecord:
    instruction: str
    input: str
    output: str
    entity_type: EntityTypeDef
    gold_spans: list[tuple[int, int]]  # token spans into input, end exclusive


def repair_bio(tags: list[str]) -> tuple[list[str], int]:
    """Rewrite I-X tags that continue nothing into B-X; returns repair count."""
    fixed: list[str] = []
    repairs = 0
    prev_type = None
    for tag in tags:
        if tag.startswith("I-"):
            name = tag[2:]
            if prev_type != name:
                fixed.append("B-" + name)
                repairs += 1
                prev_type = name
                continue
        fixed.append(tag)
        prev_type = tag[2:] if tag.startswith(("B-", "I-")) else None
    return fixed, repairs


def bio_entity_spans(tags: list[str]) -> list[tuple[int, int, str]]:
    """(start, end, type) spans from well-formed BIO tags; end is exclusive."""
    spans: list[tuple[int, int, str]] = []
    start = None
    current = None
    for i, tag in enumerate(tags):
        if tag.startswith("B-"):
            if start is not None:
                spans.append((start, i, current))
            start, current = i, tag[2:]
        elif tag.startswith("I-") and current == tag[2:]:
            continue
        else:
            if start is not None:
                spans.append((start, i, current))
            start, current = None, None
    if start is not None:
        spans.append((start, len(tags), current))
    return spans


def render_instruction(template: str, type_def: EntityTypeDef) -> str:
    if "{type}" not in template or "{description}" not in template:
        raise ContractError("instruction template must contain {type} and {description}")
    return template.replace("{type}", type_def.name).replace(
        "{description}", type_def.description
    )


def build_records(
    example: NerExample,
    types: list[EntityTypeDef],
    template: str = DEFAULT_TEMPLATE,
    include_empty: bool = True,
    stats: dict | None = None,
) -> list[SftRecord]:
    """One record per entity type; entities marked in input order.

    Zero-entity types still yield a record (the model must learn to emit an
    empty marker set) unless include_empty is False. Empty sentences are
    skipped and counted in stats["skipped_empty"].
    """
    if stats is None:
        stats = {}
    if not example.tokens:
        stats["skipped_empty"] = stats.get("skipped_empty", 0) + 1
        return []
    if len(example.tokens) != len(example.tags):
        raise DataFormatError(
            f"{example.source_id}: {len(example.tokens)} tokens vs {len(example.tags)} tags"
        )
    spans = bio_entity_spans(example.tags)
    records = []
    for type_def in types:
        ent_spans = sorted((s, e) for s, e, name in spans if name == type_def.name)
        if not ent_spans and not include_empty:
            continue
        pieces = [IM_START, OUTPUT_STEM]
        for s, e in ent_spans:
            pieces.append(ENT_OPEN)
            pieces.append(" ".join(example.tokens[s:e]))
            pieces.append(ENT_CLOSE)
        pieces.append(IM_END)
        records.append(
            SftRecord(
                instruction=render_instruction(template, type_def),
                input=" ".join(example.tokens),
                output=" ".join(pieces),
                entity_type=type_def,
                gold_spans=ent_spans,
            )
        )
    return records


def parse_output(text: str, strict: bool = False) -> list[str]:
    """Entity strings between balanced ``<<<``/``>>>`` pairs, in order."""
    events = []
    pos = text.find(ENT_OPEN)
    while pos != -1:
        events.append((pos, "open"))
        pos = text.find(ENT_OPEN, pos + len(ENT_OPEN))
    pos = text.find(ENT_CLOSE)
    while pos != -1:
        events.append((pos, "close"))
        pos = text.find(ENT_CLOSE, pos + len(ENT_CLOSE))
    events.sort()

    entities = []
    open_at = None
    for pos, kind in events:
        if kind == "open":
            if open_at is not None:
                raise MarkerParseError("nested entity marker", pos)
            open_at = pos
        else:
            if open_at is None:
                raise MarkerParseError("closing marker without opener", pos)
            entities.append(text[open_at + len(ENT_OPEN) : pos].strip())
            open_at = None
    if open_at is not None:
        raise MarkerParseError("unclosed entity marker", open_at)
    if strict and IM_END not in text:
        raise MarkerParseError("missing end-of-output marker in strict mode", len(text))
    return entities


def split_long_sentences(example: NerExample, max_tokens: int) -> list[NerExample]:
    """Split an over-long sentence into chunks without cutting entities."""
    if max_tokens < 1:
        raise ContractError("max_tokens must be >= 1")
    if len(example.tokens) <= max_tokens:
        return [example]
    spans = bio_entity_spans(example.tags)
    pieces = []
    start = 0
    part = 0
    n = len(example.tokens)
    while start < n:
        cut = min(start + max_tokens, n)
        while cut > start and any(s < cut < e for s, e, _ in spans):
            cut -= 1
        if cut == start:  # an entity longer than max_tokens; cut through it
            cut = min(start + max_tokens, n)
        pieces.append(
            NerExample(
                tokens=example.tokens[start:cut],
                tags=example.tags[start:cut],
                source_id=f"{example.source_id}#{part}",
            )
        )
        start = cut
        part += 1
    for piece in pieces:
        piece.tags, _ = repair_bio(piece.tags)
    return pieces


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass
class Vocab:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def im_start_id(self) -> int:
        return self.token_to_id[IM_START]

    @property
    def im_end_id(self) -> int:
        return self.token_to_id[IM_END]

    @property
    def ent_open_id(self) -> int:
        return self.token_to_id[ENT_OPEN]

    @property
    def ent_close_id(self) -> int:
        return self.token_to_id[ENT_CLOSE]


def build_vocab(corpus: list[NerExample], extra_texts=()) -> Vocab:
    """Frequency-then-lexicographic vocabulary over corpus plus extra texts.

    Specials occupy fixed low ids and corpus tokens colliding with them are
    dropped (they would otherwise forge markers).
    """
    if not corpus and not extra_texts:
        raise DataFormatError("cannot build a vocabulary from an empty corpus")
    freq: Counter[str] = Counter()
    for example in corpus:
        freq.update(example.tokens)
    for text in extra_texts:
        freq.update(text.split())
    for special in SPECIAL_TOKENS:
        freq.pop(special, None)
    ordered = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    id_to_token = list(SPECIAL_TOKENS) + [tok for tok, _ in ordered]
    return Vocab(id_to_token=id_to_token)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    unk = vocab.unk_id
    return [vocab.token_to_id.get(tok, unk) for tok in text.split()]


def detokenize(ids: list[int], vocab: Vocab) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids)


# ---------------------------------------------------------------------------
# token layout of a full training sequence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenLayout:
    """Token ids of instruction + input + output with segment boundaries."""

    tokens: tuple[int, ...]
    instr_start: int
    input_start: int
    output_start: int

    @property
    def input_end(self) -> int:
        return self.output_start

    @property
    def output_end(self) -> int:
        return len(self.tokens)


def layout_record(record: SftRecord, vocab: Vocab) -> TokenLayout:
    instr = tokenize(record.instruction, vocab)
    inp = tokenize(record.input, vocab)
    out = tokenize(record.output, vocab)
    return TokenLayout(
        tokens=tuple(instr + inp + out),
        instr_start=0,
        input_start=len(instr),
        output_start=len(instr) + len(inp),
    )


# ---------------------------------------------------------------------------
# JSON-lines serialization
# ---------------------------------------------------------------------------


def record_to_dict(record: SftRecord) -> dict:
    return {
        "instruction": record.instruction,
        "input": record.input,
        "output": record.output,
        "entity_type": record.entity_type.name,
        "gold_spans": [list(span) for span in record.gold_spans],
    }


def record_from_dict(obj: dict, descriptions: dict[str, str] | None = None) -> SftRecord:
    name = obj["entity_type"]
    desc = (descriptions or {}).get(name, "")
    return SftRecord(
        instruction=obj["instruction"],
        input=obj["input"],
        output=obj["output"],
        entity_type=EntityTypeDef(name=name, description=desc),
        gold_spans=[tuple(span) for span in obj["gold_spans"]],
    )


def write_records(records: list[SftRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record), sort_keys=True) + "\n")


def read_records(path, descriptions: dict[str, str] | None = None) -> list[SftRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(record_from_dict(json.loads(line), descriptions))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataFormatError(f"{path}:{line_no}: bad record line: {exc}") from exc
    return records
