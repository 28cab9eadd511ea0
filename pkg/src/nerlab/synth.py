"""Deterministic synthetic NER corpora for experiments and tests.

Each entity type owns a small closed lexicon disjoint from the filler
vocabulary, so a miniature model can actually learn the extraction task.
Two disjoint type families support cross-domain protocols.
"""

from __future__ import annotations

import numpy as np

from .sft import EntityTypeDef, NerExample

TYPE_LEXICONS = {
    "color": ("crimson", "azure", "violet", "amber", "teal", "indigo"),
    "animal": ("heron", "otter", "lynx", "badger", "falcon", "marmot"),
    "metal": ("copper", "cobalt", "nickel", "tungsten", "zinc", "iron"),
    "fruit": ("quince", "papaya", "lychee", "guava", "plum", "fig"),
    "tool": ("chisel", "mallet", "wrench", "pliers", "trowel", "rasp"),
}

ALT_TYPE_LEXICONS = {
    "vehicle": ("sled", "barge", "tram", "kayak", "scooter", "wagon"),
    "plant": ("fern", "moss", "cedar", "willow", "clover", "reed"),
    "fabric": ("linen", "denim", "velvet", "tweed", "satin", "wool"),
    "gem": ("opal", "garnet", "topaz", "jade", "beryl", "onyx"),
    "instrument": ("flute", "cello", "banjo", "drum", "oboe", "viola"),
}

FILLERS = (
    "the", "a", "near", "beside", "under", "old", "small", "bright", "quiet",
    "heavy", "we", "saw", "found", "kept", "sold", "by", "river", "market",
    "wall", "garden", "road", "house", "door", "table", "box",
)


def type_defs_for(lexicons: dict) -> list[EntityTypeDef]:
    return [
        EntityTypeDef(name=name, description=f"a {name} term such as {lex[0]} or {lex[1]}")
        for name, lex in sorted(lexicons.items())
    ]


def synth_corpus_dense(
    n_sentences: int = 200,
    seed: int = 0,
    lexicons: dict | None = None,
    id_prefix: str = "dense",
) -> tuple[list[NerExample], list[EntityTypeDef]]:
    """Sentences carrying exactly one single-token entity of every type.

    The saturated layout keeps every instruction non-vacuous, which a tiny
    adapter-only model needs to get any extraction signal at all; sparser
    corpora come from synth_corpus.
    """
    lexicons = lexicons or TYPE_LEXICONS
    names = sorted(lexicons)
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n_sentences):
        tokens = [str(rng.choice(FILLERS))]
        tags = ["O"]
        for type_name in rng.permutation(names):
            tokens.append(str(rng.choice(lexicons[type_name])))
            tags.append(f"B-{type_name}")
            if rng.random() < 0.5:
                tokens.append(str(rng.choice(FILLERS)))
                tags.append("O")
        examples.append(
            NerExample(tokens=tokens, tags=tags, source_id=f"{id_prefix}-{i:04d}")
        )
    return examples, type_defs_for(lexicons)


def synth_corpus(
    n_sentences: int = 200,
    seed: int = 0,
    lexicons: dict | None = None,
    two_token_fraction: float = 0.2,
    id_prefix: str = "synth",
) -> tuple[list[NerExample], list[EntityTypeDef]]:
    """Generate sentences of filler runs with 0-2 typed entities inserted."""
    lexicons = lexicons or TYPE_LEXICONS
    names = sorted(lexicons)
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n_sentences):
        n_entities = int(rng.choice([0, 1, 2], p=[0.15, 0.55, 0.30]))
        picked = rng.choice(names, size=n_entities, replace=False) if n_entities else []
        tokens: list[str] = []
        tags: list[str] = []

        def fillers(lo: int, hi: int) -> None:
            for _ in range(int(rng.integers(lo, hi + 1))):
                tokens.append(str(rng.choice(FILLERS)))
                tags.append("O")

        fillers(1, 3)
        for type_name in picked:
            lex = lexicons[type_name]
            if rng.random() < two_token_fraction:
                words = rng.choice(lex, size=2, replace=False)
            else:
                words = [rng.choice(lex)]
            tokens.append(str(words[0]))
            tags.append(f"B-{type_name}")
            for w in words[1:]:
                tokens.append(str(w))
                tags.append(f"I-{type_name}")
            fillers(1, 3)
        examples.append(
            NerExample(tokens=tokens, tags=tags, source_id=f"{id_prefix}-{i:04d}")
        )
    return examples, type_defs_for(lexicons)
