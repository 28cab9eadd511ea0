"""Miniature decoder-only transformer with RMSNorm, SwiGLU, RoPE, and GQA.

Blocks follow the pre-norm residual pattern: x + attn(norm(x)) then
x + mlp(norm(x)). The residual stream is captured after every block so a
configurable layer can feed the contrastive loss; index 0 is the embedding
output. The forward pass is pure: same params and tokens give identical
outputs, and nothing is mutated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, LengthError
from .tensor import (
    Tensor,
    add,
    causal_softmax,
    concat_cols,
    gather_rows,
    matmul,
    mul,
    rms_norm,
    rope_rotate,
    scale,
    silu,
    slice_cols,
    transpose,
)

INIT_STD = 0.02
TAP_FRACTION = 0.8125  # 26/32: the depth fraction that worked best at full scale


def default_d_ff(d_model: int) -> int:
    """SwiGLU width: floor(8/3 * d_model) rounded up to a multiple of 8."""
    base = (8 * d_model) // 3
    return ((base + 7) // 8) * 8


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_kv_groups: int = 2
    d_ff: int = 0  # 0 means "use default_d_ff(d_model)"
    max_seq: int = 256
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", default_d_ff(self.d_model))
        problems = []
        if self.vocab_size < 1:
            problems.append(f"vocab_size {self.vocab_size} < 1")
        if self.n_layers < 1:
            problems.append(f"n_layers {self.n_layers} < 1")
        if self.d_model % self.n_heads != 0:
            problems.append(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.n_kv_groups != 0:
            problems.append(
                f"n_heads {self.n_heads} not divisible by n_kv_groups {self.n_kv_groups}"
            )
        elif (self.d_model // self.n_heads) % 2 != 0:
            problems.append(f"head dim {self.d_model // self.n_heads} must be even for RoPE")
        if self.max_seq < 1:
            problems.append(f"max_seq {self.max_seq} < 1")
        if self.norm_eps <= 0:
            problems.append(f"norm_eps {self.norm_eps} must be positive")
        if problems:
            raise ConfigurationError("invalid model config: " + "; ".join(problems))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_groups * self.head_dim


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form total parameter count for a config."""
    d, f, v, kv = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.kv_dim
    per_layer = 2 * d + 2 * d * d + 2 * d * kv + 2 * d * f + f * d
    return v * d + d * v + d + cfg.n_layers * per_layer


def _layer_names(i: int) -> list[str]:
    return [
        f"layers.{i}.attn_norm",
        f"layers.{i}.q",
        f"layers.{i}.k",
        f"layers.{i}.v",
        f"layers.{i}.o",
        f"layers.{i}.mlp_norm",
        f"layers.{i}.gate",
        f"layers.{i}.up",
        f"layers.{i}.down",
    ]


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {name[len(prefix):]: self.tensors[name] for name in _layer_names(i)}


@dataclass
class ForwardOutput:
    logits: Tensor
    hidden_states: list[Tensor]  # index 0 = embeddings, index L = last block


def init_params(cfg: ModelConfig) -> ModelParams:
    """Gaussian init (std 0.02) for weights, ones for norm gains; seeded."""
    rng = np.random.default_rng(cfg.seed)
    d, f, v, kv = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.kv_dim
    shapes: dict[str, tuple[int, ...]] = {"wte": (v, d), "head": (d, v)}
    for i in range(cfg.n_layers):
        shapes[f"layers.{i}.q"] = (d, d)
        shapes[f"layers.{i}.k"] = (d, kv)
        shapes[f"layers.{i}.v"] = (d, kv)
        shapes[f"layers.{i}.o"] = (d, d)
        shapes[f"layers.{i}.gate"] = (d, f)
        shapes[f"layers.{i}.up"] = (d, f)
        shapes[f"layers.{i}.down"] = (f, d)
    params = ModelParams(cfg=cfg)
    for name in sorted(shapes):
        params.tensors[name] = Tensor(
            rng.normal(0.0, INIT_STD, size=shapes[name]), requires_grad=True
        )
    params.tensors["final_norm"] = Tensor(np.ones(d), requires_grad=True)
    for i in range(cfg.n_layers):
        params.tensors[f"layers.{i}.attn_norm"] = Tensor(np.ones(d), requires_grad=True)
        params.tensors[f"layers.{i}.mlp_norm"] = Tensor(np.ones(d), requires_grad=True)
    total = sum(t.data.size for t in params.tensors.values())
    assert total == parameter_count(cfg), f"param count {total} != formula {parameter_count(cfg)}"
    return params


def contrastive_tap_layer(cfg: ModelConfig) -> int:
    """Default residual-stream layer feeding the contrastive loss."""
    raw = int(math.floor(TAP_FRACTION * cfg.n_layers + 0.5))
    return min(max(raw, 1), cfg.n_layers)


def _project(x: Tensor, w: Tensor, adapters, layer, site: str) -> Tensor:
    if adapters is not None:
        return adapters.project(x, w, layer, site)
    return matmul(x, w)


def gqa_attention(
    x: Tensor,
    weights: dict[str, Tensor],
    cfg: ModelConfig,
    positions: list[int],
    adapters=None,
    layer: int = 0,
) -> Tensor:
    """Causal grouped-query attention over an already-normalized input.

    Query head h uses the K/V of group h // (n_heads / n_kv_groups); RoPE is
    applied to Q and K before scores, which are scaled by 1/sqrt(head_dim).
    Token i attends to positions j <= i only.
    """
    seq = x.shape[0]
    if seq > cfg.max_seq:
        raise LengthError(f"sequence length {seq} exceeds max_seq {cfg.max_seq}")
    hd = cfg.head_dim
    q_all = _project(x, weights["q"], adapters, layer, "q")
    k_all = _project(x, weights["k"], adapters, layer, "k")
    v_all = _project(x, weights["v"], adapters, layer, "v")

    k_rot, v_parts = [], []
    for g in range(cfg.n_kv_groups):
        k_g = rope_rotate(slice_cols(k_all, g * hd, (g + 1) * hd), positions, cfg.rope_base)
        k_rot.append(transpose(k_g))
        v_parts.append(slice_cols(v_all, g * hd, (g + 1) * hd))

    heads_per_group = cfg.n_heads // cfg.n_kv_groups
    outs = []
    for h in range(cfg.n_heads):
        g = h // heads_per_group
        q_h = rope_rotate(slice_cols(q_all, h * hd, (h + 1) * hd), positions, cfg.rope_base)
        probs = causal_softmax(scale(matmul(q_h, k_rot[g]), 1.0 / math.sqrt(hd)))
        outs.append(matmul(probs, v_parts[g]))
    return _project(concat_cols(outs), weights["o"], adapters, layer, "o")


def forward(params: ModelParams, tokens: list[int], adapters=None) -> ForwardOutput:
    """Next-token logits plus the per-layer residual stream."""
    cfg = params.cfg
    if len(tokens) == 0:
        raise LengthError("forward on empty token list")
    if len(tokens) > cfg.max_seq:
        raise LengthError(f"sequence length {len(tokens)} exceeds max_seq {cfg.max_seq}")
    for t in tokens:
        if not 0 <= t < cfg.vocab_size:
            raise IndexError(f"token id {t} out of vocab range [0, {cfg.vocab_size})")
    positions = list(range(len(tokens)))

    if adapters is not None:
        x = adapters.embed(params.tensors["wte"], tokens)
    else:
        x = gather_rows(params.tensors["wte"], tokens)

    hidden = [x]
    for i in range(cfg.n_layers):
        weights = params.layer(i)
        attn_in = rms_norm(x, weights["attn_norm"], cfg.norm_eps)
        x = add(x, gqa_attention(attn_in, weights, cfg, positions, adapters, layer=i))
        mlp_in = rms_norm(x, weights["mlp_norm"], cfg.norm_eps)
        gated = mul(
            silu(_project(mlp_in, weights["gate"], adapters, i, "gate")),
            _project(mlp_in, weights["up"], adapters, i, "up"),
        )
        x = add(x, _project(gated, weights["down"], adapters, i, "down"))
        hidden.append(x)

    final = rms_norm(x, params.tensors["final_norm"], cfg.norm_eps)
    logits = matmul(final, params.tensors["head"])
    return ForwardOutput(logits=logits, hidden_states=hidden)
