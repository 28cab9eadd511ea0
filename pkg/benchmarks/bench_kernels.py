"""Timing comparison of the numpy and numba kernel implementations.

Run:  python benchmarks/bench_kernels.py [--reps 200]

Each kernel is timed on training-realistic shapes after a warmup call (the
warmup also absorbs JIT compilation). The active training backend is chosen
by NERLAB_KERNELS; this script times both regardless.
"""

import argparse
import time

import numpy as np

from nerlab import kernels


def time_fn(fn, args, reps):
    fn(*args)  # warmup / JIT
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=200)
    args = parser.parse_args()

    if not kernels.HAS_NUMBA:
        print("numba not importable; nothing to compare")
        return

    rng = np.random.default_rng(0)
    seq, d, ff, vocab = 64, 64, 176, 512
    x = rng.normal(size=(seq, d))
    gain = np.ones(d)
    dy = rng.normal(size=(seq, d))
    scores = rng.normal(size=(seq, seq))
    probs = kernels.implementations("causal_softmax_fwd")[0](scores)
    x3 = np.ascontiguousarray(rng.normal(size=(seq, 4, 16)))
    cos = np.cos(rng.normal(size=(seq, 8)))
    sin = np.sin(rng.normal(size=(seq, 8)))
    logits = rng.normal(size=(seq, vocab))
    targets = rng.integers(0, vocab, size=seq)
    big = rng.normal(size=(d, ff))
    grad = rng.normal(size=(d, ff))
    m = np.zeros((d, ff))
    v = np.zeros((d, ff))
    _, inv = kernels.implementations("rms_norm_fwd")[0](x, gain, 1e-5)

    cases = [
        ("causal_softmax_fwd", (scores,)),
        ("causal_softmax_bwd", (probs, rng.normal(size=(seq, seq)))),
        ("rms_norm_fwd", (x, gain, 1e-5)),
        ("rms_norm_bwd", (x, gain, inv, dy)),
        ("rope_apply", (x3, cos, sin)),
        ("silu_fwd", (np.ascontiguousarray(rng.normal(size=(seq, ff))),)),
        ("silu_bwd", (
            np.ascontiguousarray(rng.normal(size=(seq, ff))),
            np.ascontiguousarray(rng.normal(size=(seq, ff))),
        )),
        ("softmax_xent_fwd", (logits, targets)),
        ("adam_step", (big, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 5)),
    ]

    print(f"{'kernel':<22} {'numpy (us)':>12} {'numba (us)':>12} {'speedup':>8}")
    for name, fn_args in cases:
        np_fn, nb_fn = kernels.implementations(name)
        t_np = time_fn(np_fn, fn_args, args.reps) * 1e6
        t_nb = time_fn(nb_fn, fn_args, args.reps) * 1e6
        print(f"{name:<22} {t_np:>12.1f} {t_nb:>12.1f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
