"""Span-level contrastive pairs and the temperature-scaled contrastive loss.

Positives pair the pooled embedding of the entity-type mention in the
instruction with the pooled embedding of a gold entity in the input;
negatives swap the entity for same-length windows immediately flanking it.
Positives may be perturbed with small random noise before the loss.

Two denominator modes exist for the loss. The default includes the positive
term (softmax form, bounded and stable). The verbatim mode sums negatives
only, which can go below zero; it is kept behind a flag because some
formulations print it that way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, DataFormatError
from .sft import SftRecord, TokenLayout, Vocab, tokenize
from .tensor import (
    Tensor,
    add,
    cosine_similarity,
    logsumexp,
    mean_rows,
    scale,
    slice_rows,
    stack_scalars,
    sub,
)


@dataclass
class ContrastiveConfig:
    tau: float = 0.07
    tap_layer: int = -1  # -1: use the model's default tap
    neighbor_window: int = 2
    verbatim_denominator: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"tau {self.tau} must be positive")
        if self.neighbor_window < 1:
            raise ConfigurationError(f"neighbor_window {self.neighbor_window} must be >= 1")


@dataclass
class NoiseConfig:
    sigma: float = 0.01
    enabled: bool = True
    seed: int = 0
    dist: str = "gaussian"  # or "uniform" with matched variance

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError(f"sigma {self.sigma} must be >= 0")
        if self.dist not in ("gaussian", "uniform"):
            raise ConfigurationError(f"noise dist {self.dist!r} must be gaussian or uniform")


@dataclass
class SpanLocator:
    instr_type_span: tuple[int, int]
    entity_spans: list[tuple[int, int]]
    neighbor_spans: list[list[tuple[int, int]]]  # per entity


@dataclass
class PairSet:
    positives: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    negatives: list[list[tuple[Tensor, Tensor]]] = field(default_factory=list)

    def extend(self, other: "PairSet") -> None:
        self.positives.extend(other.positives)
        self.negatives.extend(other.negatives)


def _find_subsequence(haystack, needle, start, stop) -> int:
    n = len(needle)
    for i in range(start, stop - n + 1):
        if list(haystack[i : i + n]) == list(needle):
            return i
    return -1


def locate_spans(
    record: SftRecord,
    layout: TokenLayout,
    vocab: Vocab,
    neighbor_window: int = 2,
) -> SpanLocator:
    """Token spans of the type mention, gold entities, and flanking windows.

    Neighbor windows have the same token length as their entity, sit at
    offsets 1..neighbor_window window-lengths to each side, stay inside the
    input segment, and are dropped when they touch any gold entity.
    """
    type_ids = tokenize(record.entity_type.name, vocab)
    at = _find_subsequence(layout.tokens, type_ids, layout.instr_start, layout.input_start)
    if at < 0:
        raise DataFormatError(
            f"type name {record.entity_type.name!r} not found in instruction tokens"
        )
    instr_span = (at, at + len(type_ids))

    lo, hi = layout.input_start, layout.input_end
    entity_spans = []
    for s, e in record.gold_spans:
        span = (lo + s, lo + e)
        if not (lo <= span[0] < span[1] <= hi):
            raise DataFormatError(f"gold span {(s, e)} falls outside the input segment")
        entity_spans.append(span)

    neighbor_spans = []
    for s, e in entity_spans:
        length = e - s
        windows = []
        for k in range(1, neighbor_window + 1):
            left = (s - k * length, s - (k - 1) * length)
            right = (e + (k - 1) * length, e + k * length)
            for w in (left, right):
                if w[0] < lo or w[1] > hi:
                    continue
                if any(w[0] < ge and gs < w[1] for gs, ge in entity_spans):
                    continue
                windows.append(w)
        windows.sort()
        neighbor_spans.append(windows)
    return SpanLocator(
        instr_type_span=instr_span, entity_spans=entity_spans, neighbor_spans=neighbor_spans
    )


def pool_span(hidden: Tensor, span: tuple[int, int]) -> Tensor:
    """Mean of the hidden rows in [start, end); differentiable."""
    s, e = span
    if not (0 <= s < e <= hidden.shape[0]):
        raise ContractError(f"span {span} empty or outside hidden of {hidden.shape[0]} rows")
    return mean_rows(slice_rows(hidden, s, e))


def add_noise(z: Tensor, cfg: NoiseConfig, call_key: tuple[int, ...] = (0,)) -> Tensor:
    """z plus a random perturbation; deterministic per (seed, call_key).

    The perturbation is a constant with respect to the parameters, so the
    gradient passes through to z unchanged. sigma=0 returns z itself.
    """
    if not cfg.enabled or cfg.sigma == 0.0:
        return z
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=call_key))
    if cfg.dist == "gaussian":
        delta = rng.normal(0.0, cfg.sigma, size=z.shape)
    else:
        half = cfg.sigma * np.sqrt(3.0)
        delta = rng.uniform(-half, half, size=z.shape)
    return add(z, Tensor(delta))


def build_pair_set(
    hidden: Tensor,
    locator: SpanLocator,
    noise: NoiseConfig | None = None,
    call_key: tuple[int, ...] = (0,),
    stats: dict | None = None,
) -> PairSet:
    """Pool spans of one record's tapped hidden state into a PairSet.

    Entities with no usable neighbor window are skipped (counted in
    stats["skipped_no_negative"]): every positive must carry a negative.
    """
    if stats is None:
        stats = {}
    z_type = pool_span(hidden, locator.instr_type_span)
    pairs = PairSet()
    for i, span in enumerate(locator.entity_spans):
        windows = locator.neighbor_spans[i]
        if not windows:
            stats["skipped_no_negative"] = stats.get("skipped_no_negative", 0) + 1
            continue
        z_ent = pool_span(hidden, span)
        if noise is not None:
            z_ent = add_noise(z_ent, noise, call_key=call_key + (i,))
        pairs.positives.append((z_type, z_ent))
        pairs.negatives.append([(z_type, pool_span(hidden, w)) for w in windows])
    return pairs


def infonce_loss(pairs: PairSet, cfg: ContrastiveConfig) -> Tensor:
    """Sum over positives of -log of the positive's share of similarity mass.

    Similarities are cosines divided by tau. Default mode puts the positive
    in the denominator; verbatim mode sums only the negatives and needs at
    least one negative per positive.
    """
    if not pairs.positives:
        raise ContractError("infonce_loss needs at least one positive pair")
    if len(pairs.positives) != len(pairs.negatives):
        raise ContractError("PairSet positives and negatives are misaligned")
    total = None
    inv_tau = 1.0 / cfg.tau
    for (z_t, z_e), negs in zip(pairs.positives, pairs.negatives):
        s_pos = scale(cosine_similarity(z_t, z_e), inv_tau)
        s_negs = [scale(cosine_similarity(zt, zn), inv_tau) for zt, zn in negs]
        if cfg.verbatim_denominator:
            if not s_negs:
                raise ContractError("verbatim denominator undefined without negatives")
            denom = logsumexp(stack_scalars(s_negs))
        else:
            denom = logsumexp(stack_scalars([s_pos] + s_negs))
        term = sub(denom, s_pos)
        total = term if total is None else add(total, term)
    return total


def combined_loss(ce: Tensor, cl: Tensor, lam: float) -> Tensor:
    """Token loss plus lam times the contrastive loss."""
    for name, t in (("ce", ce), ("cl", cl)):
        if not np.all(np.isfinite(t.data)):
            raise ContractError(f"combined_loss: {name} is not finite")
    return add(ce, scale(cl, lam))
