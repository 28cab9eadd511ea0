"""Fine-tuning loop: token loss on the output segment plus the weighted
contrastive loss, optimized with Adam over adapter tensors only.

The token loss conditions on instruction and input: only output positions
contribute targets. Batch order and noise draws are derived statelessly
from (seed, epoch) and (seed, step, record, entity), so a run is a pure
function of (config, dataset order, seed) and resuming from a checkpoint
reproduces the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import kernels
from .contrastive import (
    ContrastiveConfig,
    NoiseConfig,
    PairSet,
    build_pair_set,
    combined_loss,
    infonce_loss,
    locate_spans,
)
from .errors import ConfigurationError, ContractError, LengthError
from .lora import AdaptedModel, LoraSpec, attach
from .model import ModelConfig, contrastive_tap_layer, forward, init_params
from .sft import SftRecord, Vocab, layout_record
from .tensor import Tape, Tensor, add, backward, scale, slice_rows, softmax_cross_entropy


@dataclass
class TrainConfig:
    steps: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    lam: float = 0.001  # weight of the contrastive loss ("lambda" in configs)
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr {self.lr} must be positive")
        if self.steps < 1:
            raise ConfigurationError(f"steps {self.steps} must be >= 1")
        if self.lam < 0:
            raise ConfigurationError(f"lambda {self.lam} must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size {self.batch_size} must be >= 1")


@dataclass
class TrainState:
    adapted: AdaptedModel
    vocab: Vocab
    cfg: TrainConfig
    tap_layer: int
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, t in self.adapted.trainable().items():
            self.opt_m.setdefault(name, np.zeros_like(t.data))
            self.opt_v.setdefault(name, np.zeros_like(t.data))


def sft_token_loss(adapted: AdaptedModel, record: SftRecord, vocab: Vocab) -> Tensor:
    """Cross-entropy of output-segment tokens given everything before them."""
    loss, _, _ = _record_forward(adapted, record, vocab)
    return loss


def _record_forward(adapted: AdaptedModel, record: SftRecord, vocab: Vocab):
    layout = layout_record(record, vocab)
    n = len(layout.tokens)
    if n > adapted.params.cfg.max_seq:
        raise LengthError(
            f"record {record.entity_type.name!r} tokenizes to {n} tokens "
            f"> max_seq {adapted.params.cfg.max_seq}"
        )
    out = forward(adapted.params, list(layout.tokens), adapters=adapted)
    b, e = layout.output_start, layout.output_end
    if b < 1 or e <= b:
        raise ContractError("record has no output segment to train on")
    pred_rows = slice_rows(out.logits, b - 1, e - 1)
    targets = list(layout.tokens[b:e])
    return softmax_cross_entropy(pred_rows, targets), out, layout


def train_step(state: TrainState, batch: list[SftRecord]) -> dict:
    """One optimizer step over a batch; returns the step metrics."""
    if not batch:
        raise ContractError("train_step on an empty batch")
    cfg = state.cfg
    with Tape() as tape:
        ce_total = None
        pairs = PairSet()
        for j, record in enumerate(batch):
            ce, out, layout = _record_forward(state.adapted, record, state.vocab)
            if not np.isfinite(float(ce.data)):
                raise ContractError(
                    f"non-finite token loss at step {state.step} on record "
                    f"{record.entity_type.name!r} input {record.input[:60]!r}"
                )
            ce_total = ce if ce_total is None else add(ce_total, ce)
            if cfg.lam > 0:
                locator = locate_spans(
                    record, layout, state.vocab, cfg.contrastive.neighbor_window
                )
                pairs.extend(
                    build_pair_set(
                        out.hidden_states[state.tap_layer],
                        locator,
                        noise=cfg.noise,
                        call_key=(cfg.seed, state.step, j),
                    )
                )
        ce_mean = scale(ce_total, 1.0 / len(batch))
        if cfg.lam > 0 and pairs.positives:
            cl = infonce_loss(pairs, cfg.contrastive)
            loss = combined_loss(ce_mean, cl, cfg.lam)
            cl_value = float(cl.data)
        else:
            loss = ce_mean
            cl_value = 0.0
        if not np.isfinite(float(loss.data)):
            raise ContractError(f"non-finite combined loss at step {state.step}")
        backward(tape, loss)

    trainable = state.adapted.trainable()
    sq = 0.0
    grads = {}
    for name, t in trainable.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        grads[name] = g
        sq += float((g * g).sum())
    grad_norm = float(np.sqrt(sq))
    clip_scale = 1.0 if grad_norm <= cfg.grad_clip else cfg.grad_clip / (grad_norm + 1e-12)

    t_index = state.step + 1
    for name, t in trainable.items():
        g = grads[name] * clip_scale
        kernels.adam_step(
            t.data, g, state.opt_m[name], state.opt_v[name],
            cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, t_index,
        )
        t.grad = None
    state.step += 1
    return {
        "step": state.step,
        "loss": float(loss.data),
        "ce": float(ce_mean.data),
        "cl": cl_value,
        "grad_norm": grad_norm,
        "lr": cfg.lr,
    }


def _batch_indices(n_records: int, batch_size: int, step: int, seed: int) -> list[int]:
    """Deterministic batch of record indices for a given step."""
    per_epoch = max(1, (n_records + batch_size - 1) // batch_size)
    epoch, slot = divmod(step, per_epoch)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,)))
    perm = rng.permutation(n_records)
    lo = slot * batch_size
    return [int(i) for i in perm[lo : lo + batch_size]]


def make_state(
    model_cfg: ModelConfig,
    lora_spec: LoraSpec,
    train_cfg: TrainConfig,
    vocab: Vocab,
) -> TrainState:
    params = init_params(model_cfg)
    adapted = attach(params, lora_spec, seed=train_cfg.seed)
    tap = train_cfg.contrastive.tap_layer
    if tap < 0:
        tap = contrastive_tap_layer(model_cfg)
    if not 0 <= tap <= model_cfg.n_layers:
        raise ConfigurationError(f"tap_layer {tap} outside [0, {model_cfg.n_layers}]")
    return TrainState(adapted=adapted, vocab=vocab, cfg=train_cfg, tap_layer=tap)


def train_in_memory(
    model_cfg: ModelConfig,
    lora_spec: LoraSpec,
    train_cfg: TrainConfig,
    records: list[SftRecord],
    vocab: Vocab,
    on_step=None,
) -> tuple[TrainState, list[dict]]:
    """The whole loop without any file I/O; used by evaluation and tests."""
    if not records:
        raise ContractError("cannot train on zero records")
    state = make_state(model_cfg, lora_spec, train_cfg, vocab)
    metrics = []
    for _ in range(train_cfg.steps):
        idx = _batch_indices(len(records), train_cfg.batch_size, state.step, train_cfg.seed)
        m = train_step(state, [records[i] for i in idx])
        metrics.append(m)
        if on_step is not None:
            on_step(m)
    return state, metrics


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = {name: t.data for name, t in state.adapted.params.tensors.items()}
    for name, t in state.adapted.trainable().items():
        tensors[name] = t.data
        tensors[f"adam.m.{name}"] = state.opt_m[name]
        tensors[f"adam.v.{name}"] = state.opt_v[name]
    return tensors


def save_state(state: TrainState, model_cfg: ModelConfig, directory) -> None:
    meta = {
        "step": state.step,
        "tap_layer": state.tap_layer,
        "model_cfg": asdict(model_cfg),
        "lora_spec": {
            "rank": state.adapted.spec.rank,
            "scale": state.adapted.spec.scale,
            "init_std": state.adapted.spec.init_std,
            "targets": list(state.adapted.spec.targets),
        },
        "train_cfg": _train_cfg_to_dict(state.cfg),
        "vocab": state.vocab.id_to_token,
        "rng": {"seed": state.cfg.seed},  # batch/noise streams are derived, not stateful
    }
    ckpt.save_checkpoint(directory, state_tensors(state), meta)


def _train_cfg_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lambda"] = d.pop("lam")
    return d


def train_cfg_from_dict(obj: dict) -> TrainConfig:
    obj = dict(obj)
    if "lambda" in obj:
        obj["lam"] = obj.pop("lambda")
    contrastive = obj.pop("contrastive", {})
    noise = obj.pop("noise", {})
    known = {f for f in TrainConfig.__dataclass_fields__ if f not in ("contrastive", "noise")}
    unknown = set(obj) - known
    if unknown:
        raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(
        contrastive=ContrastiveConfig(**contrastive), noise=NoiseConfig(**noise), **obj
    )


def load_state(directory) -> tuple[TrainState, ModelConfig]:
    tensors, meta = ckpt.load_checkpoint(directory)
    model_cfg = ModelConfig(**meta["model_cfg"])
    lora_spec = LoraSpec(
        rank=meta["lora_spec"]["rank"],
        scale=meta["lora_spec"]["scale"],
        init_std=meta["lora_spec"]["init_std"],
        targets=tuple(meta["lora_spec"]["targets"]),
    )
    train_cfg = train_cfg_from_dict(meta["train_cfg"])
    vocab = Vocab(id_to_token=list(meta["vocab"]))
    state = make_state(model_cfg, lora_spec, train_cfg, vocab)
    state.step = meta["step"]
    state.tap_layer = meta["tap_layer"]
    for name, t in state.adapted.params.tensors.items():
        t.data[...] = tensors[name]
    for name, t in state.adapted.trainable().items():
        t.data[...] = tensors[name]
        state.opt_m[name][...] = tensors[f"adam.m.{name}"]
        state.opt_v[name][...] = tensors[f"adam.v.{name}"]
    return state, model_cfg


def run(
    model_cfg: ModelConfig,
    lora_spec: LoraSpec,
    train_cfg: TrainConfig,
    records: list[SftRecord],
    vocab: Vocab,
    out_dir,
    resume_from=None,
) -> tuple[str, list[dict]]:
    """File-backed training: metrics JSON-lines plus periodic checkpoints.

    Returns (final checkpoint path, metrics). With resume_from, continues an
    earlier run and reproduces exactly the trajectory of an uninterrupted one.
    """
    if not records:
        raise ContractError("cannot train on zero records")
    os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        state, model_cfg = load_state(resume_from)
        state.cfg = train_cfg
    else:
        state = make_state(model_cfg, lora_spec, train_cfg, vocab)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    metrics = []
    mode = "a" if resume_from is not None else "w"
    with open(metrics_path, mode, encoding="utf-8") as fh:
        while state.step < train_cfg.steps:
            idx = _batch_indices(
                len(records), train_cfg.batch_size, state.step, train_cfg.seed
            )
            m = train_step(state, [records[i] for i in idx])
            metrics.append(m)
            fh.write(json.dumps(m, sort_keys=True) + "\n")
            if (
                train_cfg.checkpoint_every
                and state.step % train_cfg.checkpoint_every == 0
                and state.step < train_cfg.steps
            ):
                save_state(state, model_cfg, os.path.join(out_dir, f"step_{state.step:06d}"))
    final_dir = os.path.join(out_dir, "final")
    save_state(state, model_cfg, final_dir)
    return final_dir, metrics
