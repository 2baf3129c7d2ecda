"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each row times one kernel on both backends (best of ``repeat`` runs) and
checks the outputs agree bit for bit. The last row times a full conv2d
forward and backward pass through the tensor core under each backend.
"""

import argparse
import importlib
import os
import time

import numpy as np

from fusenet_uq import _pykernels

try:
    from fusenet_uq import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _parts(out):
    return out if isinstance(out, tuple) else (out,)


def kernel_cases(rng):
    x = rng.standard_normal((32, 16, 32, 32)).astype(np.float32)
    cols = rng.standard_normal((32, 16 * 9, 32 * 32)).astype(np.float32)
    pooled, idx = _pykernels.maxpool_forward(x, 2)
    grad = rng.standard_normal(pooled.shape).astype(np.float32)
    return {
        "im2col 32x16x32x32 k3": lambda m: m.im2col(x, 3, 3),
        "col2im 32x16x32x32 k3": lambda m: m.col2im(cols, x.shape, 3, 3),
        "maxpool fwd 32x16x32x32": lambda m: m.maxpool_forward(x, 2),
        "maxpool bwd 32x16x32x32": lambda m: m.maxpool_backward(grad, idx, 2),
    }


def conv_step(repeat):
    """Time conv2d + maxpool forward/backward with whichever backend is active."""
    from fusenet_uq import kernels, tensor

    importlib.reload(kernels)
    importlib.reload(tensor)
    rng = np.random.default_rng(1)
    x = tensor.Tensor(rng.standard_normal((32, 16, 32, 32)), requires_grad=True)
    w = tensor.Tensor(rng.standard_normal((32, 16, 3, 3)) * 0.1, requires_grad=True)

    def step():
        with tensor.GradTape() as tape:
            loss = tensor.maxpool2d(tensor.relu(tensor.conv2d(x, w))).sum()
        tape.backward(loss)

    return kernels.BACKEND, best_of(step, repeat)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  agree")
    for name, fn in kernel_cases(rng).items():
        ref, got = fn(_pykernels), fn(_ckernels)
        same = all(np.array_equal(a, b) for a, b in zip(_parts(ref), _parts(got)))
        tp = best_of(lambda: fn(_pykernels), args.repeat)
        tc = best_of(lambda: fn(_ckernels), args.repeat)
        print(f"{name:<28}{1e3 * tp:>12.2f}{1e3 * tc:>12.2f}{tp / tc:>9.1f}x  {same}")

    timings = {}
    for pure in ("1", ""):
        os.environ["FUSENET_UQ_PURE"] = pure
        backend, t = conv_step(max(3, args.repeat // 4))
        timings[backend] = t
    os.environ.pop("FUSENET_UQ_PURE")
    tp, tc = timings["python"], timings["cython"]
    print(f"{'conv2d+pool fwd/bwd':<28}{1e3 * tp:>12.2f}{1e3 * tc:>12.2f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
