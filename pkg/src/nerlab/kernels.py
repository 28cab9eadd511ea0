"""Hot numeric kernels with two interchangeable implementations.

Every kernel exists twice: a vectorized pure-numpy version and a numba
``@njit`` version written as explicit loops. The active backend is chosen
once at import from the ``NERLAB_KERNELS`` environment variable:

    NERLAB_KERNELS=numba   force numba (error if not importable)
    NERLAB_KERNELS=numpy   force the pure-numpy fallback
    unset / "auto"         numba when importable, numpy otherwise

``use_backend()`` rebinds at runtime (used by tests and the benchmark in
``benchmarks/bench_kernels.py``). Matrix products are not here: BLAS via
``np.matmul`` beats anything we would hand-roll.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigurationError

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _np_causal_softmax_fwd(scores):
    n = scores.shape[0]
    mask = np.tril(np.ones((n, n), dtype=bool))
    z = np.where(mask, scores, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_causal_softmax_bwd(probs, dprobs):
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def _np_rms_norm_fwd(x, gain, eps):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=1) + eps)
    return x * inv[:, None] * gain[None, :], inv


def _np_rms_norm_bwd(x, gain, inv, dy):
    d = x.shape[1]
    dgain = (dy * x * inv[:, None]).sum(axis=0)
    inner = (dy * gain[None, :] * x).sum(axis=1)
    dx = gain[None, :] * dy * inv[:, None] - x * (inv**3 * inner / d)[:, None]
    return dx, dgain


def _np_rope_apply(x, cos, sin):
    # x: (seq, heads, head_dim); cos/sin: (seq, head_dim // 2)
    x0 = x[:, :, 0::2]
    x1 = x[:, :, 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[:, :, 0::2] = x0 * c - x1 * s
    out[:, :, 1::2] = x0 * s + x1 * c
    return out


def _np_silu_fwd(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig


def _np_silu_bwd(x, dy):
    sig = 1.0 / (1.0 + np.exp(-x))
    return dy * sig * (1.0 + x * (1.0 - sig))


def _np_softmax_xent_fwd(logits, targets):
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    probs = e / denom
    logp = z[np.arange(n), targets] - np.log(denom[:, 0])
    return -logp.mean(), probs


def _np_adam_step(p, g, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mh = m / (1.0 - beta1**t)
    vh = v / (1.0 - beta2**t)
    p -= lr * mh / (np.sqrt(vh) + eps)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nb_causal_softmax_fwd(scores):
    n = scores.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        hi = scores[i, 0]
        for j in range(1, i + 1):
            if scores[i, j] > hi:
                hi = scores[i, j]
        total = 0.0
        for j in range(i + 1):
            e = np.exp(scores[i, j] - hi)
            out[i, j] = e
            total += e
        for j in range(i + 1):
            out[i, j] /= total
    return out


@njit(cache=True)
def _nb_causal_softmax_bwd(probs, dprobs):
    n = probs.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        inner = 0.0
        for j in range(i + 1):
            inner += dprobs[i, j] * probs[i, j]
        for j in range(i + 1):
            out[i, j] = probs[i, j] * (dprobs[i, j] - inner)
    return out


@njit(cache=True)
def _nb_rms_norm_fwd(x, gain, eps):
    n, d = x.shape
    y = np.empty((n, d))
    inv = np.empty(n)
    for i in range(n):
        ms = 0.0
        for j in range(d):
            ms += x[i, j] * x[i, j]
        r = 1.0 / np.sqrt(ms / d + eps)
        inv[i] = r
        for j in range(d):
            y[i, j] = x[i, j] * r * gain[j]
    return y, inv


@njit(cache=True)
def _nb_rms_norm_bwd(x, gain, inv, dy):
    n, d = x.shape
    dx = np.empty((n, d))
    dgain = np.zeros(d)
    for i in range(n):
        inner = 0.0
        for j in range(d):
            inner += dy[i, j] * gain[j] * x[i, j]
            dgain[j] += dy[i, j] * x[i, j] * inv[i]
        coeff = inv[i] ** 3 * inner / d
        for j in range(d):
            dx[i, j] = gain[j] * dy[i, j] * inv[i] - x[i, j] * coeff
    return dx, dgain


@njit(cache=True)
def _nb_rope_apply(x, cos, sin):
    seq, heads, hd = x.shape
    out = np.empty((seq, heads, hd))
    half = hd // 2
    for s in range(seq):
        for h in range(heads):
            for i in range(half):
                a = x[s, h, 2 * i]
                b = x[s, h, 2 * i + 1]
                c = cos[s, i]
                t = sin[s, i]
                out[s, h, 2 * i] = a * c - b * t
                out[s, h, 2 * i + 1] = a * t + b * c
    return out


@njit(cache=True)
def _nb_silu_fwd(x):
    flat = x.ravel()
    out = np.empty(flat.shape[0])
    for i in range(flat.shape[0]):
        sig = 1.0 / (1.0 + np.exp(-flat[i]))
        out[i] = flat[i] * sig
    return out.reshape(x.shape)


@njit(cache=True)
def _nb_silu_bwd(x, dy):
    fx = x.ravel()
    fd = dy.ravel()
    out = np.empty(fx.shape[0])
    for i in range(fx.shape[0]):
        sig = 1.0 / (1.0 + np.exp(-fx[i]))
        out[i] = fd[i] * sig * (1.0 + fx[i] * (1.0 - sig))
    return out.reshape(x.shape)


@njit(cache=True)
def _nb_softmax_xent_fwd(logits, targets):
    n, vocab = logits.shape
    probs = np.empty((n, vocab))
    loss = 0.0
    for i in range(n):
        hi = logits[i, 0]
        for j in range(1, vocab):
            if logits[i, j] > hi:
                hi = logits[i, j]
        total = 0.0
        for j in range(vocab):
            e = np.exp(logits[i, j] - hi)
            probs[i, j] = e
            total += e
        for j in range(vocab):
            probs[i, j] /= total
        loss -= logits[i, targets[i]] - hi - np.log(total)
    return loss / n, probs


@njit(cache=True)
def _nb_adam_step(p, g, m, v, lr, beta1, beta2, eps, t):
    fp = p.ravel()
    fg = g.ravel()
    fm = m.ravel()
    fv = v.ravel()
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i in range(fp.shape[0]):
        fm[i] = beta1 * fm[i] + (1.0 - beta1) * fg[i]
        fv[i] = beta2 * fv[i] + (1.0 - beta2) * fg[i] * fg[i]
        fp[i] -= lr * (fm[i] / c1) / (np.sqrt(fv[i] / c2) + eps)


_NUMPY_IMPL = {
    "causal_softmax_fwd": _np_causal_softmax_fwd,
    "causal_softmax_bwd": _np_causal_softmax_bwd,
    "rms_norm_fwd": _np_rms_norm_fwd,
    "rms_norm_bwd": _np_rms_norm_bwd,
    "rope_apply": _np_rope_apply,
    "silu_fwd": _np_silu_fwd,
    "silu_bwd": _np_silu_bwd,
    "softmax_xent_fwd": _np_softmax_xent_fwd,
    "adam_step": _np_adam_step,
}

_NUMBA_IMPL = {
    "causal_softmax_fwd": _nb_causal_softmax_fwd,
    "causal_softmax_bwd": _nb_causal_softmax_bwd,
    "rms_norm_fwd": _nb_rms_norm_fwd,
    "rms_norm_bwd": _nb_rms_norm_bwd,
    "rope_apply": _nb_rope_apply,
    "silu_fwd": _nb_silu_fwd,
    "silu_bwd": _nb_silu_bwd,
    "softmax_xent_fwd": _nb_softmax_xent_fwd,
    "adam_step": _nb_adam_step,
}

_active = {}
_active_name = ""


def use_backend(name: str) -> None:
    """Select the kernel backend: "numba", "numpy", or "auto"."""
    global _active, _active_name
    if name == "auto":
        name = "numba" if HAS_NUMBA else "numpy"
    if name == "numba":
        if not HAS_NUMBA:
            raise ConfigurationError("NERLAB_KERNELS=numba but numba is not importable")
        _active = _NUMBA_IMPL
    elif name == "numpy":
        _active = _NUMPY_IMPL
    else:
        raise ConfigurationError(f"unknown kernel backend {name!r} (expected numba|numpy|auto)")
    _active_name = name


def active_backend() -> str:
    return _active_name


def implementations(name: str):
    """Return (numpy_fn, numba_fn) for a kernel, for A/B tests and benchmarks."""
    return _NUMPY_IMPL[name], _NUMBA_IMPL[name]


use_backend(os.environ.get("NERLAB_KERNELS", "auto"))


def causal_softmax_fwd(scores):
    return _active["causal_softmax_fwd"](scores)


def causal_softmax_bwd(probs, dprobs):
    return _active["causal_softmax_bwd"](probs, dprobs)


def rms_norm_fwd(x, gain, eps):
    return _active["rms_norm_fwd"](x, gain, eps)


def rms_norm_bwd(x, gain, inv, dy):
    return _active["rms_norm_bwd"](x, gain, inv, dy)


def rope_apply(x, cos, sin):
    return _active["rope_apply"](x, cos, sin)


def silu_fwd(x):
    return _active["silu_fwd"](x)


def silu_bwd(x, dy):
    return _active["silu_bwd"](x, dy)


def softmax_xent_fwd(logits, targets):
    return _active["softmax_xent_fwd"](logits, targets)


def adam_step(p, g, m, v, lr, beta1, beta2, eps, t):
    _active["adam_step"](p, g, m, v, lr, beta1, beta2, eps, t)
