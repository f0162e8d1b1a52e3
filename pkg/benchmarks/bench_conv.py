"""Time the compiled conv kernels against the numpy fallback (and the fast GEMM path).

    python3 benchmarks/bench_conv.py [--repeat 3] [--json out.json]

Every timed call is also checked for bit-identical output across backends.
"""
import argparse
import json
import sys
import time

import numpy as np

from featloss_sr.tensor import backend, ops
from featloss_sr.tensor.ops import _pad

SHAPES = [
    # (batch, c_in, c_out, size, stride)
    (4, 16, 16, 32, 1),
    (4, 32, 32, 32, 1),
    (8, 1, 16, 32, 1),
    (2, 32, 64, 16, 2),
]


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def bench_shape(n, cin, cout, size, stride, dtype, repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, cin, size, size)).astype(dtype)
    w = rng.standard_normal((cout, cin, 3, 3)).astype(dtype)
    b = rng.standard_normal(cout).astype(dtype)
    xp = _pad(x, 1)
    oh = (size + 2 - 3) // stride + 1
    g = rng.standard_normal((n, cout, oh, oh)).astype(dtype)
    rows = []
    for op in ("forward", "backward_input", "backward_kernel"):
        results = {}
        for name in ("cython", "python"):
            if name == "cython" and not backend.has_extension():
                continue
            k = backend.kernels(name)
            if op == "forward":
                def call():
                    out = np.empty((n, cout, oh, oh), dtype)
                    k.conv_forward(xp, w, b, out, stride)
                    return out
            elif op == "backward_input":
                def call():
                    gx = np.zeros_like(xp)
                    k.conv_backward_input(g, w, gx, stride)
                    return gx
            else:
                def call():
                    gw = np.empty_like(w)
                    k.conv_backward_kernel(g, xp, gw, stride)
                    return gw
            results[name] = best_of(call, repeat)
        if dtype == np.float32:
            with backend.compute_mode("fast"):
                if op == "forward":
                    results["gemm"] = best_of(lambda: ops.conv2d(x, w, b, stride, 1), repeat)
                elif op == "backward_input":
                    results["gemm"] = best_of(lambda: ops.conv2d_backward(g, x, w, stride, 1, need_kernel=False)[0], repeat)
                else:
                    results["gemm"] = best_of(lambda: ops.conv2d_backward(g, x, w, stride, 1, need_input=False)[1], repeat)
        identical = None
        if "cython" in results:
            identical = bool(np.array_equal(results["cython"][1], results["python"][1]))
        rows.append({
            "shape": f"{n}x{cin}->{cout} {size}px s{stride}", "dtype": np.dtype(dtype).name, "op": op,
            **{f"{k}_s": v[0] for k, v in results.items()},
            "speedup": results["python"][0] / results["cython"][0] if "cython" in results else None,
            "bit_identical": identical,
        })
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--json")
    args = p.parse_args(argv)
    print(f"extension available: {backend.has_extension()}")
    rows = []
    for dtype in (np.float64, np.float32):
        for shape in SHAPES:
            rows.extend(bench_shape(*shape, dtype, args.repeat))
    header = f"{'shape':26s} {'dtype':8s} {'op':16s} {'cython':>9s} {'python':>9s} {'gemm':>9s} {'speedup':>8s} same"
    print(header)
    for r in rows:
        def cell(k):
            return f"{r[k]:9.4f}" if r.get(k) is not None else f"{'-':>9s}"
        sp = f"{r['speedup']:8.2f}" if r["speedup"] else f"{'-':>8s}"
        print(f"{r['shape']:26s} {r['dtype']:8s} {r['op']:16s} {cell('cython_s')} {cell('python_s')} "
              f"{cell('gemm_s')} {sp} {r['bit_identical']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r["bit_identical"] in (True, None) for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
