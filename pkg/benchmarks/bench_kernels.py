"""Compare the numba kernels against the pure-numpy fallbacks.

Run twice to see both paths:

    python3 benchmarks/bench_kernels.py            # numba (default)
    NV_NO_NUMBA=1 python3 benchmarks/bench_kernels.py

Each kernel is warmed once (JIT compile), then timed over repeated calls on
training-shaped arrays. Throughput is elements per second of the primary
output buffer.
"""

import time

import numpy as np

from neuralvar import kernels

N = 256 * 1024  # a large-ish layer's worth of activations / weights
REPEATS = 200


def timed(fn, *args):
    fn(*args)  # warm-up / compile
    t0 = time.perf_counter()
    for _ in range(REPEATS):
        fn(*args)
    return (time.perf_counter() - t0) / REPEATS


def report(name, secs, elems):
    print(f"{name:<22} {secs * 1e6:10.1f} us   {elems / secs / 1e6:9.1f} M elem/s")


def main():
    rng = np.random.default_rng(0)
    path = "numba" if kernels.USE_NUMBA else "numpy"
    print(f"kernel path: {path}  (NV_NO_NUMBA toggles)\n")

    f = np.float32
    x = rng.normal(size=N).astype(f)
    gout = rng.normal(size=N).astype(f)
    report("relu_fwd", timed(kernels.relu_fwd, x), N)
    report("relu_bwd", timed(kernels.relu_bwd, x, gout), N)

    logits = rng.normal(size=(4096, 10)).astype(f)
    labels = rng.integers(0, 10, size=4096)
    report("softmax_xent_fwd", timed(kernels.softmax_xent_fwd, logits, labels),
           logits.size)
    _, probs = kernels.softmax_xent_fwd(logits, labels)
    report("softmax_xent_bwd",
           timed(kernels.softmax_xent_bwd, probs, labels, f(1.0)), logits.size)

    param = rng.normal(size=N).astype(f)
    grad = rng.normal(size=N).astype(f)
    vel = np.zeros(N, dtype=f)
    report("sgd_apply",
           timed(kernels.sgd_apply, param, grad, vel, f(0.1), f(0.9), f(1e-4)), N)

    m = np.zeros(N, dtype=f)
    v = np.zeros(N, dtype=f)
    report("adam_apply",
           timed(kernels.adam_apply, param, grad, m, v, f(1e-3), f(0.9), f(0.999),
                 f(0.1), f(0.001), f(0.5), f(0.5), f(1e-8), f(1e-4)), N)

    out = np.empty(N, dtype=f)
    state = np.array([11, 22, 33, 44], dtype=np.uint64)
    report("gaussian_fill", timed(kernels.gaussian_fill, out, state, 0.05), N)

    stored = param.copy()
    clean = param.copy()
    eps = np.zeros(N, dtype=f)
    report("nvrm_sgd_apply",
           timed(kernels.nvrm_sgd_apply, stored, clean, eps, grad, vel, state,
                 f(0.1), f(0.9), f(0.0), 0.05), N)
    report("nvrm_adam_apply",
           timed(kernels.nvrm_adam_apply, stored, clean, eps, grad, m, v, state,
                 f(1e-3), f(0.9), f(0.999), f(0.1), f(0.001), f(0.5), f(0.5),
                 f(1e-8), f(1e-4), 0.05), N)

    theta = rng.normal(size=N).astype(np.float64)
    a = np.abs(rng.normal(size=N))
    b = rng.normal(size=N)
    c = rng.normal(size=N)
    report("ewc_penalty", timed(kernels.ewc_penalty, theta, a, b, c), N)


if __name__ == "__main__":
    main()
