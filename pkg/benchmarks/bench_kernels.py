"""Wall-clock comparison of the compiled kernels against the numpy fallback.

Usage:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --dtype float64 --repeats 50

Both backends are imported directly, so this runs regardless of which one the
package selected at import time.
"""

import argparse
import time

import numpy as np

from vartex._kernels import fallback

try:
    from vartex._kernels import _core as compiled
except ImportError:
    compiled = None


def _best_of(fn, repeats: int) -> float:
    fn()   # warm-up, excluded
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases(dtype, rng):
    """(name, shape label, make) triples; make(kernels) returns the timed call.

    Buffers the kernels mutate are copied per backend so both see identical
    starting state.
    """
    x_sm = rng.standard_normal((2048, 512)).astype(dtype)
    y_sm = fallback.softmax_fwd(x_sm)
    gy_sm = rng.standard_normal(x_sm.shape).astype(dtype)

    x_ln = rng.standard_normal((8192, 256)).astype(dtype)
    gain = rng.standard_normal(256).astype(dtype)
    bias = rng.standard_normal(256).astype(dtype)
    _, xhat, rstd = fallback.layernorm_fwd(x_ln, gain, bias, 1e-6)
    gy_ln = rng.standard_normal(x_ln.shape).astype(dtype)

    x_gelu = rng.standard_normal(4_000_000).astype(dtype)
    gy_gelu = rng.standard_normal(x_gelu.shape).astype(dtype)

    p_adam = rng.standard_normal(4_000_000).astype(dtype)
    g_adam = rng.standard_normal(p_adam.shape).astype(dtype)

    def adamw(kernels):
        p, m, v = p_adam.copy(), np.zeros_like(p_adam), np.zeros_like(p_adam)
        return lambda: kernels.adamw_update(p, g_adam, m, v,
                                            1e-3, 0.9, 0.999, 1e-8, 0.01, 5)

    return [
        ("softmax fwd", "2048x512", lambda k: lambda: k.softmax_fwd(x_sm)),
        ("softmax bwd", "2048x512", lambda k: lambda: k.softmax_bwd(y_sm, gy_sm)),
        ("layernorm fwd", "8192x256",
         lambda k: lambda: k.layernorm_fwd(x_ln, gain, bias, 1e-6)),
        ("layernorm bwd", "8192x256",
         lambda k: lambda: k.layernorm_bwd(xhat, rstd, gain, gy_ln)),
        ("gelu fwd", "4M", lambda k: lambda: k.gelu_fwd(x_gelu)),
        ("gelu bwd", "4M", lambda k: lambda: k.gelu_bwd(x_gelu, gy_gelu)),
        ("adamw update", "4M", adamw),
    ]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.Generator(np.random.PCG64(args.seed))
    cases = build_cases(np.dtype(args.dtype), rng)

    if compiled is None:
        print("compiled extension not available; timing the numpy fallback only")
    print(f"dtype {args.dtype}, best of {args.repeats} runs")
    header = f"{'kernel':<16}{'shape':<12}{'numpy':>12}{'compiled':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, shape, make in cases:
        t_py = _best_of(make(fallback), args.repeats)
        row = f"{name:<16}{shape:<12}{t_py * 1e3:>10.3f}ms"
        if compiled is not None:
            t_c = _best_of(make(compiled), args.repeats)
            row += f"{t_c * 1e3:>10.3f}ms{t_py / t_c:>9.2f}x"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
