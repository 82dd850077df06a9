"""Numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--steps N]

The VAE epoch kernel is the hot path (batch-1 AdaGrad steps over every chunk of
every base model). Both paths run in the same process: the numpy path is
selected per call with ``force_numpy`` and, for the optimizers, by calling the
numpy update directly.
"""
import argparse
import time

import numpy as np

from merlin._accel import HAS_NUMBA
from merlin.kernels import VaeLayout, vae_train_epoch
from merlin.optim import _adagrad_nb, _adagrad_np, _adam_nb


def _best(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_vae(steps: int):
    rng = np.random.default_rng(0)
    lay = VaeLayout(chunk=300, cond=8, hidden=50, latent=2, tasks=5)
    X = rng.normal(size=(steps, 300))
    C = rng.normal(size=(steps, 8))
    rows = rng.permutation(steps)
    prow = np.zeros(steps, dtype=np.int64)
    eps = rng.normal(size=(steps, 2))
    theta0 = rng.normal(0, 0.05, lay.size)
    out = {}
    for name, force in (("numba", False), ("numpy", True)):
        if name == "numba" and not HAS_NUMBA:
            continue
        vae_train_epoch(theta0.copy(), np.zeros(lay.size), lay, X, C, rows[:2], prow[:2], eps[:2], 1e-3,
                        force_numpy=force)   # compile / warm up
        t = _best(lambda: vae_train_epoch(theta0.copy(), np.zeros(lay.size), lay, X, C, rows, prow, eps,
                                          1e-3, force_numpy=force))
        out[name] = t / steps * 1e6
    return out


def bench_optim(size: int, steps: int):
    rng = np.random.default_rng(1)
    g = rng.normal(size=size)
    out = {}
    if HAS_NUMBA:
        p, a, m, v = rng.normal(size=size), np.zeros(size), np.zeros(size), np.zeros(size)
        _adagrad_nb(p, g, a, 1e-3, 1e-10, 0.0)
        _adam_nb(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1e-3, 0.1, 0.001)
        out["adagrad numba"] = _best(lambda: [_adagrad_nb(p, g, a, 1e-3, 1e-10, 0.0) for _ in range(steps)])
        out["adam numba"] = _best(lambda: [_adam_nb(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1e-3, 0.1, 0.001)
                                           for _ in range(steps)])
    p, a = rng.normal(size=size), np.zeros(size)
    out["adagrad numpy"] = _best(lambda: [_adagrad_np(p, g, a, 1e-3, 1e-10, 0.0) for _ in range(steps)])
    return {k: v / steps * 1e6 for k, v in out.items()}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=3000)
    args = ap.parse_args()
    print(f"numba available: {HAS_NUMBA}")
    vae = bench_vae(args.steps)
    print(f"VAE batch-1 AdaGrad step (C=300, H=50, L=2), {args.steps} steps")
    for k, v in vae.items():
        print(f"  {k:6s} {v:8.1f} us/step")
    if len(vae) == 2:
        print(f"  speedup {vae['numpy'] / vae['numba']:.1f}x")
    print("optimizer step on a 31k-entry vector")
    for k, v in bench_optim(31_000, 500).items():
        print(f"  {k:14s} {v:8.1f} us/step")


if __name__ == "__main__":
    main()
