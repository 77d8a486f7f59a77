"""Compare compiled and NumPy kernel backends: ``python -m hqvae.benchmark``."""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from . import kernels


def cases(batch=32, channels=16, size=16, dtype=np.float32, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, channels, size, size)).astype(dtype)
    cols = kernels.im2col(x, 3, 3, 1, 1, impl=kernels.get_impl("python"))
    t = np.tanh(x)
    return {
        "im2col 3x3": lambda impl: kernels.im2col(x, 3, 3, 1, 1, impl=impl),
        "col2im 3x3": lambda impl: kernels.col2im(cols, channels, size, size, 3, 3, 1, 1, impl=impl),
        "im2col 4x4/2": lambda impl: kernels.im2col(x, 4, 4, 2, 1, impl=impl),
        "gelu fwd": lambda impl: kernels.gelu_forward(x, impl=impl),
        "gelu bwd": lambda impl: kernels.gelu_backward(x, t, x, impl=impl),
    }


def run(repeat=5, number=10, **shape):
    """Best-of-``repeat`` milliseconds per call for each kernel and backend."""
    impls = {"python": kernels.get_impl("python")}
    try:
        impls["cython"] = kernels.get_impl("cython")
    except ImportError:
        pass
    results = {}
    for name, fn in cases(**shape).items():
        for backend, impl in impls.items():
            best = min(timeit.repeat(lambda: fn(impl), repeat=repeat, number=number))
            results[(name, backend)] = 1e3 * best / number
    return results


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=10)
    a = p.parse_args(argv)
    res = run(a.repeat, a.number, batch=a.batch, channels=a.channels, size=a.size)
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':<14}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for name in dict.fromkeys(k for k, _ in res):
        py = res[(name, "python")]
        cy = res.get((name, "cython"))
        cy_s = f"{cy:11.3f}{py / cy:8.1f}x" if cy else f"{'n/a':>11}"
        print(f"{name:<14}{py:11.3f}{cy_s}")


if __name__ == "__main__":
    main()
