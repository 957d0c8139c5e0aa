"""Time the compiled kernels against their pure-numpy fallbacks.

Run `python3 benchmarks/bench_kernels.py`. Shapes match what one
training step actually sees at the default width; the printed table is
the measurement behind the per-kernel auto choice in ldae.kernels.
Each row also reports the worst output disagreement between the two
backends, which should sit at float64 rounding.
"""

import time

import numpy as np

import ldae.kernels as K

if K._native is None:
    raise SystemExit("ldae._native is not built; nothing to compare")

REPEATS = 30


def best_ms(fn, *args) -> float:
    fn(*args)  # warm up
    best = float("inf")
    for _ in range(REPEATS):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return 1e3 * best


def flatten(out):
    parts = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.asarray(p).reshape(-1) for p in parts])


def main() -> None:
    rng = np.random.default_rng(0)
    mat = np.ascontiguousarray(rng.normal(size=(4096, 64)))
    mat_b = np.ascontiguousarray(rng.normal(size=(4096, 64)))
    inv = np.ascontiguousarray(rng.uniform(0.5, 2.0, size=4096))
    att = np.ascontiguousarray(rng.normal(size=(16384, 64)))
    att_p = K.softmax_fwd(att)
    vec = np.ascontiguousarray(rng.normal(size=1 << 20))
    vec_b = np.ascontiguousarray(rng.normal(size=1 << 20))
    _, tanh_cache = K.gelu_fwd(vec)

    cases = [
        ("layernorm_fwd", "(4096, 64)", (mat, K.LN_EPS)),
        ("layernorm_bwd", "(4096, 64)", (mat_b, mat, inv)),
        ("softmax_fwd", "(16384, 64)", (att,)),
        ("softmax_bwd", "(16384, 64)", (mat.repeat(4, 0), att_p)),
        ("gelu_fwd", "(1048576,)", (vec,)),
        ("gelu_bwd", "(1048576,)", (vec_b, vec, tanh_cache)),
    ]

    print(f"auto mode resolves to: {K.kernel_backends()}")
    print(f"{'kernel':<14} {'shape':<12} {'native ms':>10} {'python ms':>10} "
          f"{'speedup':>8} {'max diff':>10}")
    for name, shape, args in cases:
        native = getattr(K._native, name)
        python = getattr(K, f"_py_{name}")
        t_native = best_ms(native, *args)
        t_python = best_ms(python, *args)
        diff = float(np.max(np.abs(flatten(native(*args)) - flatten(python(*args)))))
        print(f"{name:<14} {shape:<12} {t_native:>10.3f} {t_python:>10.3f} "
              f"{t_python / t_native:>7.1f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
