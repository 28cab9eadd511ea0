"""Episode sampling, CoNLL ingestion, micro-F1 scoring, and the
within-domain / cross-domain evaluation protocols.

An episode fixes N entity types, greedily collects support sentences until
every type has at least K instances, prunes redundant sentences, and leaves
the remaining in-tagset sentences as the query pool. Scoring is surface
form based: an extracted string counts as a true positive when it matches a
not-yet-matched gold entity of the same type in the same sentence, after
whitespace normalization (multiset semantics).
"""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .decode import DecodeConfig, generate
from .errors import ConfigurationError, ContractError, DataFormatError, LengthError, SamplingError
from .lora import LoraSpec
from .model import ModelConfig
from .sft import (
    DEFAULT_TEMPLATE,
    OUTPUT_STEM,
    EntityTypeDef,
    NerExample,
    SftRecord,
    Vocab,
    bio_entity_spans,
    build_records,
    build_vocab,
    detokenize,
    parse_output,
    render_instruction,
    repair_bio,
    tokenize,
)
from .train import TrainConfig, train_in_memory


# ---------------------------------------------------------------------------
# CoNLL ingestion
# ---------------------------------------------------------------------------


def ingest_conll(path) -> tuple[list[NerExample], list[str], dict]:
    """Sentences plus the sorted tagset from a token-per-line BIO file.

    Lines are ``token<TAB>tag`` or ``token<SPACE>tag``; blank lines separate
    sentences. Malformed lines and BIO repairs are counted in stats.
    """
    stats = {"malformed_lines": 0, "bio_repairs": 0}
    examples: list[NerExample] = []
    tokens: list[str] = []
    tags: list[str] = []

    def flush(index: int) -> None:
        nonlocal tokens, tags
        if tokens:
            fixed, repairs = repair_bio(tags)
            stats["bio_repairs"] += repairs
            examples.append(
                NerExample(tokens=tokens, tags=fixed, source_id=f"{path}#{index}")
            )
            tokens, tags = [], []

    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                flush(len(examples))
                continue
            parts = line.split("\t") if "\t" in line else line.split(" ")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                stats["malformed_lines"] += 1
                continue
            tokens.append(parts[0])
            tags.append(parts[1])
    flush(len(examples))
    if not examples:
        raise DataFormatError(f"{path}: no sentences found")
    tagset = sorted({name for ex in examples for _, _, name in bio_entity_spans(ex.tags)})
    return examples, tagset, stats


def write_conll(examples: list[NerExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            for token, tag in zip(ex.tokens, ex.tags):
                fh.write(f"{token}\t{tag}\n")
            fh.write("\n")


# ---------------------------------------------------------------------------
# episode sampling
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    tagset: list[EntityTypeDef]
    support: list[NerExample]
    query: list[NerExample]
    seed: int


def _types_of(example: NerExample) -> Counter:
    return Counter(name for _, _, name in bio_entity_spans(example.tags))


def default_type_defs(names, descriptions: dict[str, str] | None = None):
    descriptions = descriptions or {}
    return [
        EntityTypeDef(name=n, description=descriptions.get(n, f"any entity of type {n}"))
        for n in names
    ]


def sample_episode(
    corpus: list[NerExample],
    n_types: int,
    k_shot: int,
    seed: int,
    descriptions: dict[str, str] | None = None,
) -> Episode:
    """Greedy N-way K-shot sampling: N types, minimal support, rest as queries.

    Deterministic per seed. Raises SamplingError naming the deficient type
    when the corpus cannot supply K support instances of something.
    """
    per_sentence = [_types_of(ex) for ex in corpus]
    sentence_counts: Counter = Counter()
    for types in per_sentence:
        sentence_counts.update(types.keys())
    eligible = sorted(t for t, c in sentence_counts.items() if c >= k_shot)
    if len(eligible) < n_types:
        lacking = sorted(set(sentence_counts) - set(eligible)) or ["(no types at all)"]
        raise SamplingError(
            f"need {n_types} types with >= {k_shot} sentences; only {len(eligible)} "
            f"eligible (deficient: {', '.join(lacking)})"
        )
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(eligible, size=n_types, replace=False).tolist())
    chosen_set = set(chosen)

    counts = {t: 0 for t in chosen}
    support_idx: list[int] = []
    remaining = [i for i, types in enumerate(per_sentence) if chosen_set & set(types)]
    while any(c < k_shot for c in counts.values()):
        neediest = min((t for t in chosen if counts[t] < k_shot), key=lambda t: (counts[t], t))
        candidates = [i for i in remaining if neediest in per_sentence[i]]
        if not candidates:
            raise SamplingError(
                f"cannot reach {k_shot} support instances for type {neediest!r}"
            )
        pick = candidates[int(rng.integers(len(candidates)))]
        support_idx.append(pick)
        remaining.remove(pick)
        for t in chosen:
            counts[t] += per_sentence[pick].get(t, 0)

    # drop sentences the greedy pass made redundant
    for i in list(support_idx):
        reduced = {t: counts[t] - per_sentence[i].get(t, 0) for t in chosen}
        if all(c >= k_shot for c in reduced.values()):
            support_idx.remove(i)
            counts = reduced

    support_ids = {corpus[i].source_id for i in support_idx}
    query = [
        ex
        for i, ex in enumerate(corpus)
        if ex.source_id not in support_ids and set(per_sentence[i]) <= chosen_set
    ]
    episode = Episode(
        tagset=default_type_defs(chosen, descriptions),
        support=[corpus[i] for i in support_idx],
        query=query,
        seed=seed,
    )
    for t in chosen:
        assert counts[t] >= k_shot
    assert support_ids.isdisjoint({ex.source_id for ex in episode.query})
    return episode


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    micro_precision: float
    micro_recall: float
    micro_f1: float
    per_type: dict[str, dict[str, int]]
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "micro_f1": self.micro_f1,
            "per_type": self.per_type,
            "n_queries": self.n_queries,
        }


def _normalize(text: str) -> str:
    return " ".join(text.split())


def micro_f1(predictions: dict, gold: dict) -> EvalReport:
    """Micro P/R/F1 over (sentence, type) keyed lists of entity strings.

    Matching is exact surface form after whitespace normalization, multiset
    per key: duplicated gold entities need duplicated predictions.
    """
    if set(predictions) != set(gold):
        raise ContractError("predictions and gold must cover the same (sentence, type) keys")
    per_type: dict[str, dict[str, int]] = {}
    tp = fp = fn = 0
    for key in gold:
        _, type_name = key
        bucket = per_type.setdefault(type_name, {"tp": 0, "fp": 0, "fn": 0})
        pred_counts = Counter(_normalize(e) for e in predictions[key])
        gold_counts = Counter(_normalize(e) for e in gold[key])
        overlap = sum((pred_counts & gold_counts).values())
        bucket["tp"] += overlap
        bucket["fp"] += sum(pred_counts.values()) - overlap
        bucket["fn"] += sum(gold_counts.values()) - overlap
        tp += overlap
        fp += sum(pred_counts.values()) - overlap
        fn += sum(gold_counts.values()) - overlap
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalReport(
        micro_precision=precision,
        micro_recall=recall,
        micro_f1=f1,
        per_type=per_type,
        n_queries=len({sid for sid, _ in gold}),
    )


# ---------------------------------------------------------------------------
# protocol execution
# ---------------------------------------------------------------------------


@dataclass
class ProtocolSpec:
    mode: str  # INTRA or INTER
    n_types: int
    k_shot: int
    seeds: list[int]
    n_episodes: int = 1
    max_queries: int | None = None
    source: str | None = None  # corpus paths; optional when corpora passed directly
    target: str | None = None

    def __post_init__(self):
        if self.mode not in ("INTRA", "INTER"):
            raise ConfigurationError(f"mode {self.mode!r} must be INTRA or INTER")
        if self.n_types < 1 or self.k_shot < 1 or self.n_episodes < 1:
            raise ConfigurationError("N, K, and n_episodes must all be >= 1")
        if not self.seeds:
            raise ConfigurationError("protocol needs at least one seed")
        if self.mode == "INTER" and self.target is None and self.source is not None:
            raise ConfigurationError("INTER mode needs a target corpus")


def parse_entities_lenient(text: str) -> list[str]:
    """parse_output that salvages the balanced prefix of malformed text."""
    try:
        return parse_output(text)
    except DataFormatError:
        best: list[str] = []
        for cut in range(len(text), -1, -1):
            try:
                best = parse_output(text[:cut])
                break
            except DataFormatError:
                continue
        return best


def evaluate_extractor(
    model,
    vocab: Vocab,
    queries: list[NerExample],
    type_defs: list[EntityTypeDef],
    decode_cfg: DecodeConfig,
    template: str = DEFAULT_TEMPLATE,
    stats: dict | None = None,
) -> EvalReport:
    """Generate, parse, and score every query sentence against every type."""
    if stats is None:
        stats = {}
    predictions: dict = {}
    gold: dict = {}
    for ex in queries:
        spans = bio_entity_spans(ex.tags)
        input_tokens = tokenize(" ".join(ex.tokens), vocab)
        for type_def in type_defs:
            key = (ex.source_id, type_def.name)
            gold[key] = [
                " ".join(ex.tokens[s:e]) for s, e, name in spans if name == type_def.name
            ]
            prompt = tokenize(render_instruction(template, type_def), vocab) + input_tokens
            try:
                result = generate(
                    model,
                    prompt,
                    decode_cfg,
                    input_tokens=input_tokens,
                    open_id=vocab.ent_open_id,
                    close_id=vocab.ent_close_id,
                )
            except LengthError:
                stats["skipped_overlong"] = stats.get("skipped_overlong", 0) + 1
                predictions[key] = []
                continue
            stats["forced_closures"] = stats.get("forced_closures", 0) + result.forced_closures
            predictions[key] = parse_entities_lenient(detokenize(result.tokens, vocab))
    return micro_f1(predictions, gold)


def _derived_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1)[0])


def run_protocol(
    spec: ProtocolSpec,
    source_corpus: list[NerExample],
    model_cfg_base: ModelConfig,
    lora_spec: LoraSpec,
    train_cfg: TrainConfig,
    decode_opts: dict | None = None,
    target_corpus: list[NerExample] | None = None,
    target_defs: list[EntityTypeDef] | None = None,
    descriptions: dict[str, str] | None = None,
    template: str = DEFAULT_TEMPLATE,
    jobs: int = 1,
) -> tuple[list[EvalReport], dict]:
    """Sample, train, decode, and score once per protocol seed.

    INTRA evaluates each seed's episode queries; INTER trains on source
    episodes and evaluates target test sentences directly, requiring the two
    tagsets to be disjoint.
    """
    decode_opts = dict(decode_opts or {})
    if spec.mode == "INTER":
        if target_corpus is None or target_defs is None:
            raise ConfigurationError("INTER mode needs a target corpus and its type defs")
        source_types = {
            name for ex in source_corpus for _, _, name in bio_entity_spans(ex.tags)
        }
        overlap = source_types & {d.name for d in target_defs}
        if overlap:
            raise DataFormatError(
                f"INTER tagsets overlap: {sorted(overlap)}; source and target must be disjoint"
            )

    vocab_examples = list(source_corpus) + list(target_corpus or [])
    all_names = sorted({n for ex in vocab_examples for _, _, n in bio_entity_spans(ex.tags)})
    extra_texts = [OUTPUT_STEM] + [
        render_instruction(template, d)
        for d in default_type_defs(all_names, descriptions) + list(target_defs or [])
    ]
    vocab = build_vocab(vocab_examples, extra_texts)
    model_cfg = replace(model_cfg_base, vocab_size=len(vocab))

    def run_seed(seed: int) -> EvalReport:
        episodes = [
            sample_episode(
                source_corpus, spec.n_types, spec.k_shot, _derived_seed(seed, e), descriptions
            )
            for e in range(spec.n_episodes)
        ]
        records: list[SftRecord] = []
        for episode in episodes:
            for ex in episode.support:
                records.extend(build_records(ex, episode.tagset, template))
        seeded = replace(
            train_cfg,
            seed=seed,
            contrastive=train_cfg.contrastive,
            noise=replace(train_cfg.noise, seed=seed),
        )
        state, _ = train_in_memory(model_cfg, lora_spec, seeded, records, vocab)
        if spec.mode == "INTRA":
            queries = episodes[0].query
            eval_defs = episodes[0].tagset
        else:
            queries = list(target_corpus)
            eval_defs = list(target_defs)
        if spec.max_queries is not None:
            queries = queries[: spec.max_queries]
        decode_cfg = DecodeConfig(
            stop_token=vocab.im_end_id, **{**decode_opts, "seed": seed}
        )
        return evaluate_extractor(
            state.adapted, vocab, queries, eval_defs, decode_cfg, template
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run_seed, spec.seeds))
    else:
        reports = [run_seed(s) for s in spec.seeds]

    f1s = [r.micro_f1 for r in reports]
    precisions = [r.micro_precision for r in reports]
    recalls = [r.micro_recall for r in reports]
    summary = {
        "mode": spec.mode,
        "n_types": spec.n_types,
        "k_shot": spec.k_shot,
        "seeds": list(spec.seeds),
        "per_seed": [
            {
                "seed": s,
                "f1": r.micro_f1,
                "precision": r.micro_precision,
                "recall": r.micro_recall,
            }
            for s, r in zip(spec.seeds, reports)
        ],
        "f1_mean": float(np.mean(f1s)),
        "f1_std": float(np.std(f1s)),
        "precision_mean": float(np.mean(precisions)),
        "recall_mean": float(np.mean(recalls)),
    }
    return reports, summary


def summary_table(summary: dict) -> str:
    """Aligned text rendering of a protocol summary."""
    lines = [
        f"mode={summary['mode']}  N={summary['n_types']}  K={summary['k_shot']}",
        f"{'seed':>6}  {'f1':>8}  {'precision':>9}  {'recall':>8}",
    ]
    for row in summary["per_seed"]:
        lines.append(
            f"{row['seed']:>6}  {row['f1']:>8.4f}  {row['precision']:>9.4f}  {row['recall']:>8.4f}"
        )
    lines.append(
        f"mean f1 = {summary['f1_mean']:.4f} +/- {summary['f1_std']:.4f} "
        f"over {len(summary['seeds'])} seeds"
    )
    return "\n".join(lines)


def summary_csv(summary: dict) -> str:
    rows = ["seed,f1,precision,recall"]
    for row in summary["per_seed"]:
        rows.append(f"{row['seed']},{row['f1']},{row['precision']},{row['recall']}")
    return "\n".join(rows) + "\n"


def report_json(reports: list[EvalReport], summary: dict) -> str:
    payload = {"reports": [r.to_dict() for r in reports], "summary": summary}
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"
