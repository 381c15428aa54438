"""Benchmark the numba similarity kernels against the numpy fallback.

The max-mean pair grid is the hot loop of training (three levels, forward
and backward, every step). Run:

    python benchmarks/bench_kernels.py [--batch 64] [--repeats 5]

The numba path walks pairs without materializing the B*B*L_t*L_v cosine
tensor; the numpy path pays that memory for vectorization. Both are timed
after a warmup call (which also absorbs JIT compilation) and cross-checked
against each other.
"""

import argparse
import time

import numpy as np

from grm import kernels


def normalized(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def bench(fn, repeats):
    fn()  # warmup: JIT compile / page in
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--img-tokens", type=int, default=49)
    ap.add_argument("--txt-tokens", type=int, default=24)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    B, Lv, Lt, d = args.batch, args.img_tokens, args.txt_tokens, args.dim
    vn = normalized(rng, (B, Lv, d))
    tn = normalized(rng, (B, Lt, d))
    vmask = np.ones((B, Lv), dtype=bool)
    tmask = rng.random((B, Lt)) < 0.8
    tmask[:, 0] = True
    g = rng.standard_normal((B, B))

    print(f"pair grid: B={B}, L_v={Lv}, L_t={Lt}, d={d} "
          f"({B * B * Lv * Lt * d / 1e6:.0f}M multiply-adds per forward)")

    results = {}
    for backend in ("numpy", "numba"):
        fwd = lambda: kernels.maxmean_forward(tn, tmask, vn, vmask, backend=backend)
        sim, t2i, i2t = fwd()
        bwd = lambda: kernels.maxmean_backward(g, tn, tmask, vn, vmask, t2i, i2t, backend=backend)
        results[backend] = (bench(fwd, args.repeats), bench(bwd, args.repeats), sim)
        print(f"  {backend:6s} forward {results[backend][0] * 1e3:8.2f} ms   "
              f"backward {results[backend][1] * 1e3:8.2f} ms")

    diff = np.abs(results["numpy"][2] - results["numba"][2]).max()
    speedup_f = results["numpy"][0] / results["numba"][0]
    speedup_b = results["numpy"][1] / results["numba"][1]
    print(f"  agreement: max |numpy - numba| = {diff:.2e}")
    print(f"  numba speedup: forward x{speedup_f:.2f}, backward x{speedup_b:.2f}")


if __name__ == "__main__":
    main()
