"""Command-line entry point.

Subcommands: build-sft, train, eval, generate, gradcheck, ablate. Every
command takes --seed where randomness is involved and is deterministic
given its flags. Exit codes: 0 success, 1 internal error, 2 I/O error,
3 data error, 4 config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .decode import DecodeConfig, generate
from .episodes import (
    ProtocolSpec,
    default_type_defs,
    evaluate_extractor,
    ingest_conll,
    parse_entities_lenient,
    report_json,
    run_protocol,
    summary_csv,
    summary_table,
)
from .errors import (
    ConfigurationError,
    DataFormatError,
    LengthError,
    NerlabError,
    SamplingError,
)
from .gradcheck import CHECKS, inject_sign_flip, run_gradcheck
from .lora import LoraSpec
from .model import ModelConfig
from .sft import (
    DEFAULT_TEMPLATE,
    build_records,
    build_vocab,
    detokenize,
    read_records,
    split_long_sentences,
    tokenize,
    write_records,
)
from .synth import synth_corpus_dense
from .train import TrainConfig, load_state, run as train_run, train_cfg_from_dict

# Reference micro-F1 from the published full-scale runs these toy sweeps
# mirror; printed beside toy numbers for directional comparison only.
MODULE_SWEEP_REFERENCE = (
    ("LoRA", 0.375),
    ("LoRA+CL", 0.377),
    ("LoRA+CL+Noise", 0.384),
)

TARGET_SWEEP_REFERENCE = (
    (("q",), 0.281),
    (("k",), 0.283),
    (("v",), 0.350),
    (("q", "k"), 0.329),
    (("q", "v"), 0.370),
    (("q", "k", "v"), 0.367),
    (("q", "k", "v", "o"), 0.360),
    (("q", "k", "v", "o", "in"), 0.368),
    (("q", "k", "v", "in"), 0.375),
    (("q", "k", "v", "in", "out"), 0.372),
    (("q", "k", "v", "in", "out", "wte"), 0.373),
    (("q", "k", "v", "o", "in", "out", "wte"), 0.352),
)


class Parser(argparse.ArgumentParser):
    """argparse that exits 4 (config error) on bad flags instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(4, f"{self.prog}: error: {message}\n")


def _read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_bundle(config_path, overrides: dict):
    """(model dict, LoraSpec, TrainConfig, decode dict) from a config file."""
    cfg = _read_json(config_path) if config_path else {}
    model = dict(cfg.get("model", {}))
    lora = cfg.get("lora", {})
    lora_spec = LoraSpec(
        rank=lora.get("rank", 8),
        scale=lora.get("scale", 1.0),
        init_std=lora.get("init_std", 0.02),
        targets=tuple(lora.get("targets", ("q", "k", "v", "in"))),
    )
    train_dict = dict(cfg.get("train", {}))
    for key, value in overrides.items():
        if value is not None:
            train_dict[key] = value
    train_cfg = train_cfg_from_dict(train_dict)
    decode = dict(cfg.get("decode", {}))
    return model, lora_spec, train_cfg, decode, cfg


def _decode_cfg(stop_token: int, decode: dict, seed: int | None = None) -> DecodeConfig:
    opts = {"temperature": 0.01, "top_k": 10, "top_p": 0.9, "max_new_tokens": 32}
    opts.update(decode)
    if seed is not None:
        opts["seed"] = seed
    return DecodeConfig(stop_token=stop_token, **opts)


def _vocab_from_records(records):
    texts = []
    for r in records:
        texts.extend((r.instruction, r.input, r.output))
    return build_vocab([], extra_texts=texts)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_build_sft(args) -> int:
    examples, tagset, stats = ingest_conll(args.corpus)
    if args.templates:
        with open(args.templates, "r", encoding="utf-8") as fh:
            template = fh.read().strip()
    else:
        template = DEFAULT_TEMPLATE
    descriptions = _read_json(args.types) if args.types else {}
    defs = default_type_defs(tagset, descriptions)
    if args.max_input_tokens:
        split = []
        for ex in examples:
            split.extend(split_long_sentences(ex, args.max_input_tokens))
        examples = split
    records = []
    build_stats: dict = {}
    for ex in examples:
        records.extend(
            build_records(ex, defs, template, include_empty=args.include_empty, stats=build_stats)
        )
    write_records(records, args.out)
    counts = {}
    for r in records:
        counts[r.entity_type.name] = counts.get(r.entity_type.name, 0) + 1
    print(f"wrote {len(records)} records to {args.out}")
    for name in sorted(counts):
        print(f"  {name}: {counts[name]}")
    if stats["malformed_lines"] or stats["bio_repairs"] or build_stats:
        print(f"  (stats: {stats}, {build_stats})")
    return 0


def cmd_train(args) -> int:
    overrides = {
        "lambda": args.lam,
        "lr": args.lr,
        "steps": args.steps,
        "batch_size": args.batch_size,
        "seed": args.seed,
    }
    model_dict, lora_spec, train_cfg, _, _ = _load_bundle(args.config, overrides)
    records = read_records(args.data)
    if not records:
        raise DataFormatError(f"{args.data}: no records")
    vocab = _vocab_from_records(records)
    model_dict.setdefault("vocab_size", len(vocab))
    model_cfg = ModelConfig(**model_dict)
    final_dir, metrics = train_run(
        model_cfg, lora_spec, train_cfg, records, vocab, args.out_dir,
        resume_from=args.resume,
    )
    if metrics and not np.isfinite(metrics[-1]["loss"]):
        print("training ended with non-finite loss", file=sys.stderr)
        return 1
    print(f"final checkpoint: {final_dir}")
    if metrics:
        first, last = metrics[0], metrics[-1]
        print(
            f"ce {first['ce']:.4f} -> {last['ce']:.4f} over steps "
            f"{first['step']}..{last['step']} (lambda={train_cfg.lam})"
        )
    else:
        print("nothing to do: checkpoint already at the requested step count")
    return 0


def _protocol_from_json(path) -> tuple[ProtocolSpec, dict]:
    obj = _read_json(path)
    spec = ProtocolSpec(
        mode=obj["mode"],
        n_types=obj["N"],
        k_shot=obj["K"],
        seeds=list(obj["seeds"]),
        n_episodes=obj.get("n_episodes", 1),
        max_queries=obj.get("max_queries"),
        source=obj.get("source"),
        target=obj.get("target"),
    )
    return spec, obj


def cmd_eval(args) -> int:
    spec, raw = _protocol_from_json(args.protocol)
    if args.seed is not None:
        spec = ProtocolSpec(
            mode=spec.mode, n_types=spec.n_types, k_shot=spec.k_shot,
            seeds=[args.seed], n_episodes=spec.n_episodes,
            max_queries=spec.max_queries, source=spec.source, target=spec.target,
        )
    if spec.source is None:
        raise ConfigurationError("protocol file must name a source corpus")
    source_corpus, _, _ = ingest_conll(spec.source)
    descriptions = _read_json(args.types) if args.types else raw.get("descriptions", {})
    target_corpus = target_defs = None
    if spec.mode == "INTER":
        target_corpus, target_tags, _ = ingest_conll(spec.target)
        target_defs = default_type_defs(target_tags, descriptions)

    if args.checkpoint:
        reports, summary = _eval_checkpoint(
            args.checkpoint, spec, source_corpus, target_corpus, target_defs, descriptions
        )
    else:
        if not args.train_config:
            raise ConfigurationError("eval needs --checkpoint or --train-config")
        model_dict, lora_spec, train_cfg, decode, _ = _load_bundle(args.train_config, {})
        model_dict.setdefault("vocab_size", 1)  # replaced by run_protocol per vocab
        model_cfg = ModelConfig(**model_dict)
        reports, summary = run_protocol(
            spec,
            source_corpus,
            model_cfg,
            lora_spec,
            train_cfg,
            decode_opts=decode,
            target_corpus=target_corpus,
            target_defs=target_defs,
            descriptions=descriptions,
            jobs=args.jobs,
        )
    payload = report_json(reports, summary)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload)
        print(f"report written to {args.out}")
    else:
        print(payload, end="")
    print(summary_table(summary))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(summary_csv(summary))
    return 0


def _eval_checkpoint(directory, spec, source_corpus, target_corpus, target_defs, descriptions):
    from .episodes import micro_f1, sample_episode, _derived_seed  # local import

    state, _ = load_state(directory)
    vocab = state.vocab
    reports = []
    for seed in spec.seeds:
        if spec.mode == "INTRA":
            episode = sample_episode(
                source_corpus, spec.n_types, spec.k_shot, _derived_seed(seed, 0), descriptions
            )
            queries, defs = episode.query, episode.tagset
        else:
            queries, defs = list(target_corpus), list(target_defs)
        if spec.max_queries is not None:
            queries = queries[: spec.max_queries]
        decode_cfg = _decode_cfg(vocab.im_end_id, {}, seed=seed)
        reports.append(evaluate_extractor(state.adapted, vocab, queries, defs, decode_cfg))
    f1s = [r.micro_f1 for r in reports]
    summary = {
        "mode": spec.mode,
        "n_types": spec.n_types,
        "k_shot": spec.k_shot,
        "seeds": list(spec.seeds),
        "per_seed": [
            {"seed": s, "f1": r.micro_f1, "precision": r.micro_precision, "recall": r.micro_recall}
            for s, r in zip(spec.seeds, reports)
        ],
        "f1_mean": float(np.mean(f1s)),
        "f1_std": float(np.std(f1s)),
        "precision_mean": float(np.mean([r.micro_precision for r in reports])),
        "recall_mean": float(np.mean([r.micro_recall for r in reports])),
    }
    return reports, summary


def cmd_generate(args) -> int:
    state, _ = load_state(args.checkpoint)
    vocab = state.vocab
    decode = {
        "temperature": args.temperature,
        "top_k": args.top_k,
        "top_p": args.top_p,
        "max_new_tokens": args.max_new,
        "constrained": not args.unconstrained,
    }
    cfg = _decode_cfg(vocab.im_end_id, decode, seed=args.seed)
    jobs = []
    if args.records:
        for i, record in enumerate(read_records(args.records)):
            prompt = tokenize(record.instruction, vocab) + tokenize(record.input, vocab)
            jobs.append((f"r{i}", prompt, tokenize(record.input, vocab)))
    elif args.prompt_file:
        with open(args.prompt_file, "r", encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                line = line.strip()
                if not line:
                    continue
                ids = tokenize(line, vocab)
                jobs.append((f"p{i}", ids, ids))
    else:
        raise ConfigurationError("generate needs --records or --prompt-file")

    out_fh = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for record_id, prompt, input_tokens in jobs:
            result = generate(
                state.adapted, prompt, cfg,
                input_tokens=input_tokens,
                open_id=vocab.ent_open_id,
                close_id=vocab.ent_close_id,
            )
            text = detokenize(result.tokens, vocab)
            out_fh.write(
                json.dumps(
                    {
                        "record_id": record_id,
                        "generated_text": text,
                        "entities": parse_entities_lenient(text),
                        "steps": result.steps,
                        "forced_closures": result.forced_closures,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    finally:
        if args.out:
            out_fh.close()
    return 0


def cmd_gradcheck(args) -> int:
    ops = sorted(CHECKS) if args.ops == "all" else [s.strip() for s in args.ops.split(",")]
    seed_range = range(args.seed, args.seed + args.seeds)
    if args.inject_sign_flip:
        with inject_sign_flip(args.inject_sign_flip):
            results = run_gradcheck(ops, seed_range)
    else:
        results = run_gradcheck(ops, seed_range)
    failed = False
    for op in ops:
        err = results[op]
        ok = err < args.tol
        failed = failed or not ok
        print(f"{op:<24} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"gradcheck {'FAILED' if failed else 'passed'} ({args.seeds} seeds, tol {args.tol})")
    return 1 if failed else 0


def _ablate_settings(cfg: dict) -> dict:
    settings = {
        "sentences": 60,
        "n_types": 5,
        "k_shot": 2,
        "max_queries": 8,
        "corpus_seed": 0,
    }
    settings.update(cfg.get("ablate", {}))
    return settings


def _ablate_model(model_dict: dict) -> dict:
    small = {"n_layers": 2, "d_model": 32, "n_heads": 2, "n_kv_groups": 1, "max_seq": 160}
    small.update(model_dict)
    return small


def cmd_ablate(args) -> int:
    model_dict, lora_spec, train_cfg, decode, raw_cfg = _load_bundle(args.config, {})
    settings = _ablate_settings(raw_cfg)
    corpus, defs = synth_corpus_dense(settings["sentences"], seed=settings["corpus_seed"])
    descriptions = {d.name: d.description for d in defs}
    model_cfg = ModelConfig(vocab_size=1, **_ablate_model(model_dict))
    seeds = list(range(args.seed, args.seed + args.seeds))
    spec = ProtocolSpec(
        mode="INTRA",
        n_types=settings["n_types"],
        k_shot=settings["k_shot"],
        seeds=seeds,
        max_queries=settings["max_queries"],
    )

    def sweep(lora: LoraSpec, train: TrainConfig) -> tuple[float, float]:
        _, summary = run_protocol(
            spec, corpus, model_cfg, lora, train,
            decode_opts=decode, descriptions=descriptions, jobs=args.jobs,
        )
        return summary["f1_mean"], summary["f1_std"]

    rows = []
    if args.axis == "modules":
        variants = (
            ("LoRA", replace(train_cfg, lam=0.0, noise=replace(train_cfg.noise, enabled=False))),
            ("LoRA+CL", replace(
                train_cfg,
                lam=train_cfg.lam or 0.001,
                noise=replace(train_cfg.noise, enabled=False),
            )),
            ("LoRA+CL+Noise", replace(
                train_cfg,
                lam=train_cfg.lam or 0.001,
                noise=replace(train_cfg.noise, enabled=True),
            )),
        )
        for (label, variant), (_, ref) in zip(variants, MODULE_SWEEP_REFERENCE):
            mean, std = sweep(lora_spec, variant)
            rows.append((label, mean, std, ref))
    elif args.axis == "lora-targets":
        for targets, ref in TARGET_SWEEP_REFERENCE:
            mean, std = sweep(replace(lora_spec, targets=targets), train_cfg)
            rows.append(("+".join(targets), mean, std, ref))
    else:
        raise ConfigurationError(f"unknown ablation axis {args.axis!r}")

    print(f"{'configuration':<28} {'toy_f1':>8} {'toy_std':>8} {'reference_f1':>13}")
    for label, mean, std, ref in rows:
        print(f"{label:<28} {mean:>8.4f} {std:>8.4f} {ref:>13.3f}")
        if not np.isfinite(mean):
            return 1
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> Parser:
    parser = Parser(prog="nerlab", description=__doc__)
    parser.add_argument(
        "--version",
        action="version",
        version=f"nerlab {__version__} (checkpoint formats supported: 1)",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("build-sft", help="CoNLL corpus -> instruction records (JSON lines)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--templates", help="template file with {type} and {description}")
    p.add_argument("--types", help="JSON file mapping type name -> description")
    p.add_argument("--out", required=True)
    p.add_argument("--include-empty", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--max-input-tokens", type=int, default=0)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; output is deterministic")
    p.set_defaults(func=cmd_build_sft)

    p = sub.add_parser("train", help="fine-tune adapters on SFT records")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run an N-way K-shot evaluation protocol")
    p.add_argument("--protocol", required=True)
    p.add_argument("--train-config")
    p.add_argument("--checkpoint")
    p.add_argument("--types", help="JSON file mapping type name -> description")
    p.add_argument("--out", help="report JSON path (stdout when omitted)")
    p.add_argument("--csv", help="also write per-seed CSV here")
    p.add_argument("--seed", type=int, help="run the protocol with this single seed")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="constrained generation from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--records", help="SFT JSONL whose instruction+input become prompts")
    p.add_argument("--prompt-file", help="plain text prompts, one per line")
    p.add_argument("--out")
    p.add_argument("--temperature", type=float, default=0.01)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--top-p", type=float, default=0.9)
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--unconstrained", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--ops", default="all")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="first seed of the swept range")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inject-sign-flip", help="negate one op's gradient (oracle sanity)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="module and LoRA-target sweeps at toy scale")
    p.add_argument("--axis", choices=("modules", "lora-targets"), required=True)
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=2)
    p.add_argument("--seed", type=int, default=0, help="first protocol seed")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 4
    try:
        return args.func(args) or 0
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    except (DataFormatError, SamplingError, LengthError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except NerlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
