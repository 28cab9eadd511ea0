"""Finite-difference verification of every differentiable op.

Central differences with step h compare against tape gradients; the relative
error denominator is max(|analytic|, |numeric|, 1e-8). The registry at the
bottom gives each op a self-contained randomized check, which the CLI
``gradcheck`` subcommand sweeps over seeds.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, OracleError
from .tensor import Tape, Tensor, backward

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def _eval_scalar(f, xs: Sequence[Tensor]) -> float:
    out = f(*xs)
    if out.data.size != 1:
        raise ContractError(f"finite_diff_check: f returned shape {out.shape}, not a scalar")
    val = float(out.data.reshape(()))
    if not np.isfinite(val):
        raise OracleError("finite_diff_check: f is not finite at the evaluation point")
    return val


def check_gradients(f, xs: Sequence[Tensor], h: float = DEFAULT_H) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be scalar-valued. All tensors in ``xs`` are checked; each is
    temporarily marked requires_grad.
    """
    if h <= 0:
        raise ContractError("finite_diff_check: h must be positive")
    saved_flags = [x.requires_grad for x in xs]
    saved_grads = [x.grad for x in xs]
    try:
        for x in xs:
            x.requires_grad = True
            x.grad = None
        with Tape() as tape:
            out = f(*xs)
        _eval_scalar(lambda *_: out, xs)
        backward(tape, out)
        analytic = [
            x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in xs
        ]
        for x in xs:
            x.requires_grad = False

        worst = 0.0
        for x, ana in zip(xs, analytic):
            flat = x.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = _eval_scalar(f, xs)
                flat[i] = orig - h
                fm = _eval_scalar(f, xs)
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = float(ana.reshape(-1)[i])
                denom = max(abs(a), abs(num), 1e-8)
                worst = max(worst, abs(a - num) / denom)
        return worst
    finally:
        for x, flag, grad in zip(xs, saved_flags, saved_grads):
            x.requires_grad = flag
            x.grad = grad


def finite_diff_check(f, x: Tensor, h: float = DEFAULT_H) -> float:
    """Single-tensor convenience wrapper around check_gradients."""
    return check_gradients(f, [x], h=h)


def check_gradients_sparse(
    f, xs: Sequence[Tensor], entries: Sequence[tuple[int, int]], h: float = DEFAULT_H
) -> float:
    """Like check_gradients but differences only selected (tensor, flat) entries.

    Keeps the full-model check affordable: analytic gradients come from one
    backward pass, numeric ones only for the sampled parameter entries.
    """
    saved_flags = [x.requires_grad for x in xs]
    saved_grads = [x.grad for x in xs]
    try:
        for x in xs:
            x.requires_grad = True
            x.grad = None
        with Tape() as tape:
            out = f(*xs)
        _eval_scalar(lambda *_: out, xs)
        backward(tape, out)
        analytic = [
            x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in xs
        ]
        for x in xs:
            x.requires_grad = False

        worst = 0.0
        for ti, flat_i in entries:
            flat = xs[ti].data.reshape(-1)
            orig = flat[flat_i]
            flat[flat_i] = orig + h
            fp = _eval_scalar(f, xs)
            flat[flat_i] = orig - h
            fm = _eval_scalar(f, xs)
            flat[flat_i] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(analytic[ti].reshape(-1)[flat_i])
            denom = max(abs(a), abs(num), 1e-8)
            worst = max(worst, abs(a - num) / denom)
        return worst
    finally:
        for x, flag, grad in zip(xs, saved_flags, saved_grads):
            x.requires_grad = flag
            x.grad = grad


@contextmanager
def inject_sign_flip(op_name: str):
    """Negate the gradient rule of one op; mutation sanity for the oracle."""
    orig_record = T._record

    def patched(op, inputs, out_data, push_grads):
        if op == op_name:
            def flipped(d, _orig=push_grads):
                return tuple(None if g is None else -g for g in _orig(d))

            return orig_record(op, inputs, out_data, flipped)
        return orig_record(op, inputs, out_data, push_grads)

    T._record = patched
    try:
        yield
    finally:
        T._record = orig_record


# ---------------------------------------------------------------------------
# per-op randomized checks
# ---------------------------------------------------------------------------


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(out, Tensor(w)))


def _check_add(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return check_gradients(lambda x, y: _weighted_sum(T.add(x, y), w), [a, b])


def _check_sub(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return check_gradients(lambda x, y: _weighted_sum(T.sub(x, y), w), [a, b])


def _check_mul(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return check_gradients(lambda x, y: _weighted_sum(T.mul(x, y), w), [a, b])


def _check_scale(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(2, 5)))
    w = rng.normal(size=(2, 5))
    c = float(rng.normal())
    return check_gradients(lambda x: _weighted_sum(T.scale(x, c), w), [a])


def _check_matmul(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(5, 3)))
    w = rng.normal(size=(4, 3))
    return check_gradients(lambda x, y: _weighted_sum(T.matmul(x, y), w), [a, b])


def _check_transpose(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 5)))
    w = rng.normal(size=(5, 3))
    return check_gradients(lambda x: _weighted_sum(T.transpose(x), w), [a])


def _check_reshape(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(2, 6))
    return check_gradients(lambda x: _weighted_sum(T.reshape(x, (2, 6)), w), [a])


def _check_slice_rows(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(5, 3)))
    w = rng.normal(size=(2, 3))
    return check_gradients(lambda x: _weighted_sum(T.slice_rows(x, 1, 3), w), [a])


def _check_slice_cols(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 6)))
    w = rng.normal(size=(3, 2))
    return check_gradients(lambda x: _weighted_sum(T.slice_cols(x, 2, 4), w), [a])


def _check_concat_cols(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 6))
    return check_gradients(lambda x, y: _weighted_sum(T.concat_cols([x, y]), w), [a, b])


def _check_gather_rows(seed: int) -> float:
    rng = np.random.default_rng(seed)
    table = Tensor(rng.normal(size=(7, 4)))
    ids = rng.integers(0, 7, size=6)
    w = rng.normal(size=(6, 4))
    return check_gradients(lambda t: _weighted_sum(T.gather_rows(t, ids), w), [table])


def _check_mean_rows(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(4, 5)))
    w = rng.normal(size=(5,))
    return check_gradients(
        lambda x: T.sum_all(T.mul(T.mean_rows(x), Tensor(w))), [a]
    )


def _check_sum_all(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 3)))
    return check_gradients(lambda x: T.sum_all(x), [a])


def _check_logsumexp(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(7,)))
    return check_gradients(lambda x: T.logsumexp(x), [a])


def _check_stack_scalars(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(5,)))

    def f(x):
        parts = [T.sum_all(T.slice_rows(T.reshape(x, (5, 1)), i, i + 1)) for i in range(5)]
        return T.logsumexp(T.stack_scalars(parts))

    return check_gradients(f, [a])


def _check_silu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return check_gradients(lambda x: _weighted_sum(T.silu(x), w), [a])


def _check_rms_norm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 8)))
    gain = Tensor(rng.normal(size=(8,)) + 1.0)
    w = rng.normal(size=(2, 8))
    return check_gradients(lambda a, g: _weighted_sum(T.rms_norm(a, g, 1e-5), w), [x, gain])


def _check_swiglu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)))
    wg = Tensor(rng.normal(size=(4, 5)))
    wu = Tensor(rng.normal(size=(4, 5)))
    w = rng.normal(size=(3, 5))
    return check_gradients(
        lambda a, g, u: _weighted_sum(T.swiglu(a, g, u), w), [x, wg, wu]
    )


def _check_rope_rotate(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(4, 2, 6)))
    w = rng.normal(size=(4, 2, 6))
    positions = list(range(4))
    return check_gradients(
        lambda a: _weighted_sum(T.rope_rotate(a, positions, 100.0), w), [x]
    )


def _check_causal_softmax(seed: int) -> float:
    rng = np.random.default_rng(seed)
    s = Tensor(rng.normal(size=(5, 5)))
    w = rng.normal(size=(5, 5))
    return check_gradients(lambda a: _weighted_sum(T.causal_softmax(a), w), [s])


def _check_softmax_cross_entropy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(4, 7)))
    targets = rng.integers(0, 7, size=4)
    return check_gradients(lambda l: T.softmax_cross_entropy(l, targets), [logits])


def _check_cosine_similarity(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(9,)))
    b = Tensor(rng.normal(size=(9,)))
    return check_gradients(lambda x, y: T.cosine_similarity(x, y), [a, b])


def _check_lora_adapted(seed: int) -> float:
    from .lora import LoraPair, adapted_matmul

    rng = np.random.default_rng(seed)
    base = Tensor(rng.normal(size=(6, 5)))
    pair = LoraPair(
        a=Tensor(rng.normal(size=(6, 2))),
        b=Tensor(rng.normal(size=(2, 5))),
        base=base,
    )
    x = Tensor(rng.normal(size=(3, 6)))
    w = rng.normal(size=(3, 5))

    def f(a, b):
        pair.a, pair.b = a, b
        return _weighted_sum(adapted_matmul(x, pair, scale=0.7), w)

    return check_gradients(f, [pair.a, pair.b])


def _check_model(seed: int) -> float:
    from .model import ModelConfig, forward, init_params

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, n_kv_groups=1, vocab_size=13, seed=seed)
    params = init_params(cfg)
    tokens = rng.integers(0, cfg.vocab_size, size=5).tolist()
    targets = rng.integers(0, cfg.vocab_size, size=5)
    names = sorted(params.tensors)
    xs = [params.tensors[n] for n in names]

    def f(*_):
        out = forward(params, tokens)
        return T.softmax_cross_entropy(out.logits, targets)

    # Sample 20 parameter entries whose gradient sits above the central-
    # difference noise floor (~eps*|f|/2h ~ 1e-11 absolute, so 1e-6 keeps
    # the relative comparison meaningful); below it FD measures only
    # cancellation noise, not the derivative.
    with Tape() as tape:
        out = f()
    backward(tape, out)
    grads = np.concatenate([
        (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1) for x in xs
    ])
    for x in xs:
        x.grad = None
    candidates = np.flatnonzero(np.abs(grads) >= 1e-6)
    picks = rng.choice(candidates, size=min(20, candidates.size), replace=False)
    sizes = [x.data.size for x in xs]
    entries = []
    for p in sorted(picks.tolist()):
        ti = 0
        while p >= sizes[ti]:
            p -= sizes[ti]
            ti += 1
        entries.append((ti, p))
    return check_gradients_sparse(f, xs, entries)


CHECKS: dict[str, Callable[[int], float]] = {
    "add": _check_add,
    "sub": _check_sub,
    "mul": _check_mul,
    "scale": _check_scale,
    "matmul": _check_matmul,
    "transpose": _check_transpose,
    "reshape": _check_reshape,
    "slice_rows": _check_slice_rows,
    "slice_cols": _check_slice_cols,
    "concat_cols": _check_concat_cols,
    "gather_rows": _check_gather_rows,
    "mean_rows": _check_mean_rows,
    "sum_all": _check_sum_all,
    "logsumexp": _check_logsumexp,
    "stack_scalars": _check_stack_scalars,
    "silu": _check_silu,
    "rms_norm": _check_rms_norm,
    "swiglu": _check_swiglu,
    "rope_rotate": _check_rope_rotate,
    "causal_softmax": _check_causal_softmax,
    "softmax_cross_entropy": _check_softmax_cross_entropy,
    "cosine_similarity": _check_cosine_similarity,
    "lora_adapted": _check_lora_adapted,
    "model": _check_model,
}


def run_gradcheck(ops: Sequence[str], seeds, tol: float = DEFAULT_TOL):
    """Run the named checks over seeds (a count or an explicit iterable);
    returns {op: max relative error}."""
    unknown = [op for op in ops if op not in CHECKS]
    if unknown:
        raise ContractError(f"unknown gradcheck ops: {unknown}; known: {sorted(CHECKS)}")
    seed_list = range(seeds) if isinstance(seeds, int) else list(seeds)
    results: dict[str, float] = {}
    for op in ops:
        worst = 0.0
        for seed in seed_list:
            worst = max(worst, CHECKS[op](seed))
        results[op] = worst
    return results
