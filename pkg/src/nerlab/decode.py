"""Constrained autoregressive generation.

Sampling is near-greedy: logits are divided by a low temperature, filtered
to the top-k most probable tokens, then to the smallest prefix reaching the
top-p mass, renormalized, and sampled. Between ``<<<`` and ``>>>`` the next
token must extend some contiguous subspan of the prompt's input segment, so
every extracted entity is guaranteed to be copyable from the input. A stop
token ends generation; a max-new-tokens bound guarantees halting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, LengthError
from .model import ModelParams, forward


@dataclass
class DecodeConfig:
    stop_token: int
    temperature: float = 0.01
    top_k: int = 10
    top_p: float = 0.9
    max_new_tokens: int = 64
    constrained: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature {self.temperature} must be positive")
        if not 0 < self.top_p <= 1:
            raise ConfigurationError(f"top_p {self.top_p} must be in (0, 1]")
        if self.top_k < 1:
            raise ConfigurationError(f"top_k {self.top_k} must be >= 1")
        if self.max_new_tokens < 0:
            raise ConfigurationError("max_new_tokens must be >= 0")


@dataclass
class ConstraintState:
    """Tracks whether generation is inside an entity and which input
    subspans remain consistent with the tokens emitted since ``<<<``."""

    input_tokens: tuple[int, ...]
    open_id: int
    close_id: int
    inside: bool = False
    cursors: list[tuple[int, int]] = field(default_factory=list)  # (start, matched)
    entity_len: int = 0

    def legal_tokens(self) -> set[int]:
        """Token ids permitted next while inside an entity."""
        legal = {
            self.input_tokens[p + n]
            for p, n in self.cursors
            if p + n < len(self.input_tokens)
        }
        if self.entity_len >= 1:
            legal.add(self.close_id)
        return legal

    def advance(self, token: int) -> None:
        if not self.inside:
            if token == self.open_id:
                self.inside = True
                self.cursors = [(p, 0) for p in range(len(self.input_tokens))]
                self.entity_len = 0
            return
        if token == self.close_id:
            self.inside = False
            self.cursors = []
            self.entity_len = 0
            return
        self.cursors = [
            (p, n + 1)
            for p, n in self.cursors
            if p + n < len(self.input_tokens) and self.input_tokens[p + n] == token
        ]
        self.entity_len += 1


def constrained_filter(
    logits: np.ndarray, state: ConstraintState
) -> tuple[np.ndarray, bool]:
    """Mask logits down to the legal continuations; identity in free mode.

    Returns (masked logits, forced) where forced means no token was legal
    (empty input after ``<<<``) and the closing marker was reinstated.
    """
    if not state.inside:
        return logits, False
    legal = state.legal_tokens()
    forced = False
    if not legal:
        legal = {state.close_id}
        forced = True
    masked = np.full_like(logits, -np.inf)
    idx = np.fromiter(legal, dtype=np.int64)
    masked[idx] = logits[idx]
    return masked, forced


def sample(logits: np.ndarray, cfg: DecodeConfig, rng: np.random.Generator) -> int:
    """Temperature softmax, top-k, then smallest top-p prefix, then draw."""
    z = logits / cfg.temperature
    finite = np.isfinite(z)
    if not finite.any():
        raise ContractError("sample: all logits are masked")
    z = z - z[finite].max()
    probs = np.where(finite, np.exp(z), 0.0)
    probs = probs / probs.sum()

    order = np.argsort(-probs, kind="stable")
    kept = order[: cfg.top_k]
    kept = kept[probs[kept] > 0]
    if kept.size == 0:
        raise ContractError("sample: no probability mass after top-k")
    cum = np.cumsum(probs[kept])
    target = min(cfg.top_p, float(cum[-1]))  # top-k may have removed mass below top_p
    cut = int(np.searchsorted(cum, target))
    kept = kept[: min(cut + 1, kept.size)]
    weights = probs[kept]
    weights = weights / weights.sum()
    return int(rng.choice(kept, p=weights))


@dataclass
class GenerationResult:
    tokens: list[int]
    steps: int
    forced_closures: int
    hit_stop: bool


def _model_forward(model, tokens: list[int]):
    if isinstance(model, ModelParams):
        return forward(model, tokens)
    return model.forward(tokens)


def generate(
    model,
    prompt: list[int],
    cfg: DecodeConfig,
    input_tokens: list[int],
    open_id: int,
    close_id: int,
) -> GenerationResult:
    """Sample up to max_new_tokens after the prompt; stop token excluded.

    ``input_tokens`` is the prompt's input segment, the only legal source of
    entity content while the constraint is active.
    """
    max_seq = (model.cfg if isinstance(model, ModelParams) else model.params.cfg).max_seq
    if len(prompt) + cfg.max_new_tokens > max_seq:
        raise LengthError(
            f"prompt {len(prompt)} + max_new {cfg.max_new_tokens} exceeds max_seq {max_seq}"
        )
    if not prompt:
        raise LengthError("generate needs a nonempty prompt")
    rng = np.random.default_rng(cfg.seed)
    state = ConstraintState(
        input_tokens=tuple(input_tokens), open_id=open_id, close_id=close_id
    )
    seq = list(prompt)
    out: list[int] = []
    forced_closures = 0
    hit_stop = False
    steps = 0
    for _ in range(cfg.max_new_tokens):
        logits = _model_forward(model, seq).logits.data[-1]
        if cfg.constrained:
            logits, forced = constrained_filter(logits, state)
            if forced:
                forced_closures += 1
        token = sample(logits, cfg, rng)
        steps += 1
        if token == cfg.stop_token:
            hit_stop = True
            break
        out.append(token)
        state.advance(token)
        seq.append(token)
    return GenerationResult(
        tokens=out, steps=steps, forced_closures=forced_closures, hit_stop=hit_stop
    )
