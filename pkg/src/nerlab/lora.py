"""Low-rank adapters over frozen base weights.

Each adapted matrix W (d_in x d_out) gets a pair A (d_in x r, Gaussian init)
and B (r x d_out, zero init), so the effective weight is W + scale * A @ B
and the adapted forward equals the base forward exactly until B moves.
The product is never materialized on the forward path; gradients reach only
A and B because base tensors are flagged frozen at attach time.

Target families: q, k, v, o (attention), in (both SwiGLU input matrices),
out (the MLP down-projection), wte (the token embedding, model-global).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .model import ModelConfig, ModelParams, forward
from .tensor import Tensor, add, gather_rows, matmul, scale as t_scale

VALID_TARGETS = ("q", "k", "v", "o", "in", "out", "wte")

# family -> per-layer weight sites it adapts ("in" is two matrices)
_FAMILY_SITES = {
    "q": ("q",),
    "k": ("k",),
    "v": ("v",),
    "o": ("o",),
    "in": ("gate", "up"),
    "out": ("down",),
}

GLOBAL_LAYER = "global"


@dataclass
class LoraSpec:
    rank: int = 8
    scale: float = 1.0
    init_std: float = 0.02
    targets: tuple[str, ...] = ("q", "k", "v", "in")

    def __post_init__(self):
        self.targets = tuple(self.targets)
        unknown = [t for t in self.targets if t not in VALID_TARGETS]
        if unknown:
            raise ConfigurationError(f"unknown LoRA targets {unknown}; valid: {VALID_TARGETS}")
        if not self.targets:
            raise ConfigurationError("LoRA spec needs at least one target family")
        if self.rank < 1:
            raise ConfigurationError(f"LoRA rank {self.rank} must be >= 1")


@dataclass
class LoraPair:
    a: Tensor  # (d_in, r), trainable, Gaussian init
    b: Tensor  # (r, d_out), trainable, zero init
    base: Tensor  # frozen reference weight (d_in, d_out)


def adapted_matmul(x: Tensor, pair: LoraPair, scale: float) -> Tensor:
    """x @ W + scale * (x @ A) @ B without forming W + AB."""
    return add(matmul(x, pair.base), t_scale(matmul(matmul(x, pair.a), pair.b), scale))


def merge(pair: LoraPair, scale: float = 1.0) -> Tensor:
    """Dense merged weight W + scale * A @ B (detached)."""
    return Tensor(pair.base.data + scale * (pair.a.data @ pair.b.data))


class AdaptedModel:
    """A model plus its attached adapter pairs; base weights stay frozen."""

    def __init__(self, params: ModelParams, spec: LoraSpec, pairs: dict):
        self.params = params
        self.spec = spec
        self.pairs = pairs  # (layer_key, site) -> LoraPair

    def project(self, x: Tensor, w: Tensor, layer, site: str) -> Tensor:
        pair = self.pairs.get((layer, site))
        if pair is None:
            return matmul(x, w)
        return adapted_matmul(x, pair, self.spec.scale)

    def embed(self, table: Tensor, ids) -> Tensor:
        pair = self.pairs.get((GLOBAL_LAYER, "wte"))
        if pair is None:
            return gather_rows(table, ids)
        delta = matmul(gather_rows(pair.a, ids), pair.b)
        return add(gather_rows(table, ids), t_scale(delta, self.spec.scale))

    def forward(self, tokens: list[int]):
        return forward(self.params, tokens, adapters=self)

    def trainable(self) -> dict[str, Tensor]:
        """Stable name -> tensor map of all adapter parameters."""
        out: dict[str, Tensor] = {}
        for (layer, site), pair in sorted(self.pairs.items(), key=lambda kv: str(kv[0])):
            out[f"lora.{layer}.{site}.A"] = pair.a
            out[f"lora.{layer}.{site}.B"] = pair.b
        return out


def _pair_shapes(cfg: ModelConfig, site: str) -> tuple[int, int]:
    d, f, kv, v = cfg.d_model, cfg.d_ff, cfg.kv_dim, cfg.vocab_size
    return {
        "q": (d, d),
        "k": (d, kv),
        "v": (d, kv),
        "o": (d, d),
        "gate": (d, f),
        "up": (d, f),
        "down": (f, d),
        "wte": (v, d),
    }[site]


def attach(params: ModelParams, spec: LoraSpec, seed: int = 0) -> AdaptedModel:
    """Create zero-delta adapters for every targeted matrix and freeze the base.

    A is drawn N(0, init_std^2) per pair from a seeded generator; B starts at
    zero so the adapted model reproduces the base model exactly.
    """
    cfg = params.cfg
    for family in spec.targets:
        sites = _FAMILY_SITES.get(family, ("wte",))
        for site in sites:
            d_in, d_out = _pair_shapes(cfg, site)
            if spec.rank >= min(d_in, d_out):
                raise ConfigurationError(
                    f"rank {spec.rank} not below min dim {min(d_in, d_out)} "
                    f"of target {family!r} ({d_in}x{d_out})"
                )
    rng = np.random.default_rng(seed)
    pairs: dict = {}
    for family in sorted(spec.targets):
        if family == "wte":
            d_in, d_out = _pair_shapes(cfg, "wte")
            pairs[(GLOBAL_LAYER, "wte")] = LoraPair(
                a=Tensor(rng.normal(0.0, spec.init_std, (d_in, spec.rank)), requires_grad=True),
                b=Tensor(np.zeros((spec.rank, d_out)), requires_grad=True),
                base=params.tensors["wte"],
            )
            continue
        for layer in range(cfg.n_layers):
            for site in _FAMILY_SITES[family]:
                d_in, d_out = _pair_shapes(cfg, site)
                pairs[(layer, site)] = LoraPair(
                    a=Tensor(
                        rng.normal(0.0, spec.init_std, (d_in, spec.rank)), requires_grad=True
                    ),
                    b=Tensor(np.zeros((spec.rank, d_out)), requires_grad=True),
                    base=params.tensors[f"layers.{layer}.{site}"],
                )
    for tensor in params.tensors.values():
        tensor.requires_grad = False
    return AdaptedModel(params, spec, pairs)


def lora_parameter_count(cfg: ModelConfig, spec: LoraSpec) -> int:
    """Closed-form trainable count: sum of rank * (d_in + d_out) over pairs."""
    total = 0
    for family in spec.targets:
        if family == "wte":
            d_in, d_out = _pair_shapes(cfg, "wte")
            total += spec.rank * (d_in + d_out)
            continue
        for site in _FAMILY_SITES[family]:
            d_in, d_out = _pair_shapes(cfg, site)
            total += cfg.n_layers * spec.rank * (d_in + d_out)
    return total


@dataclass
class ParameterReport:
    trainable: int
    frozen: int
    per_pair: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.trainable / self.frozen if self.frozen else float("inf")


def trainable_parameter_report(adapted: AdaptedModel) -> ParameterReport:
    per_pair = {
        name: t.data.size for name, t in adapted.trainable().items()
    }
    trainable = sum(per_pair.values())
    frozen = sum(t.data.size for t in adapted.params.tensors.values())
    return ParameterReport(trainable=trainable, frozen=frozen, per_pair=per_pair)
