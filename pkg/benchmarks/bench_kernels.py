"""Compare packed_forward on the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--m 1024] [--n 1024] [--tokens 64] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from saltbin import _kernels_py, kernels, packfmt
from saltbin.quant import quantize_layer
from saltbin.saliency import build_mask


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--m", type=int, default=1024)
    ap.add_argument("--n", type=int, default=1024)
    ap.add_argument("--tokens", type=int, default=64)
    ap.add_argument("--ratio", type=float, default=0.2)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    W = rng.normal(size=(args.m, args.n))
    q = quantize_layer(W, build_mask(rng.random(args.m), args.ratio))
    p = packfmt.parse(packfmt.pack(q))
    X = rng.normal(size=(args.tokens, args.m))

    backends = {"numpy": _kernels_py}
    if kernels.compiled is not None:
        backends["cython"] = kernels.compiled
    else:
        print("compiled extension not built; timing numpy fallback only")

    from saltbin.quant import dequantize
    dense = dequantize(packfmt.from_packed(p))
    t = min(timeit.repeat(lambda: X @ dense, number=1, repeat=args.repeat))
    print(f"{'dense matmul':>14}: {t * 1e3:9.2f} ms")
    ref = None
    for name, impl in backends.items():
        kernels._impl = impl
        out = packfmt.packed_forward(X, p)
        ref = out if ref is None else ref
        t = min(timeit.repeat(lambda: packfmt.packed_forward(X, p), number=1, repeat=args.repeat))
        err = np.abs(out - ref).max()
        print(f"{name:>14}: {t * 1e3:9.2f} ms  (max diff vs numpy {err:.1e})")


if __name__ == "__main__":
    main()
