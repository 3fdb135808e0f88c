"""Benchmark the JIT kernels against the pure-numpy fallback.

Runs every kernel on identical inputs under both backends, checks the
outputs agree, and reports wall-clock per call plus the speedup. The JIT
side is warmed up once before timing so compilation is not measured.

    python3 benchmarks/bench_kernels.py [--repeats N] [--hidden H ...]
"""

import argparse
import time

import numpy as np

from nreg.kernels import backend_numba, backend_numpy


def timeit(fn, args, repeats):
    fn(*args)  # warm-up (JIT compile on the numba side)
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats


def check_close(a, b):
    if isinstance(a, tuple):
        return all(check_close(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-5, atol=1e-6)


def _copy(args):
    return tuple(a.copy() if isinstance(a, np.ndarray) else a for a in args)


def _call(fn, args):
    # in-place kernels return None; compare the mutated buffers instead
    scratch = _copy(args)
    out = fn(*scratch)
    return scratch if out is None else out


def bench_case(rows, label, make_args, fn_name, repeats, exact=False):
    args = make_args()
    fn_np = getattr(backend_numpy, fn_name)
    out_np = _call(fn_np, args)
    t_np = timeit(fn_np, _copy(args), repeats)
    row = {"label": label, "numpy_ms": t_np * 1e3, "numba_ms": None,
           "speedup": None, "agree": "-"}
    if backend_numba is not None:
        fn_nb = getattr(backend_numba, fn_name)
        out_nb = _call(fn_nb, args)
        agree = (out_np == out_nb if exact else check_close(out_np, out_nb))
        t_nb = timeit(fn_nb, _copy(args), repeats)
        row.update(numba_ms=t_nb * 1e3, speedup=t_np / t_nb,
                   agree="yes" if agree else "NO")
    rows.append(row)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=2000)
    parser.add_argument("--hidden", type=int, nargs="+", default=[64, 512])
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    rng = np.random.default_rng(args.seed)
    rows = []

    for hdim in args.hidden:
        def gates_args(h=hdim):
            return (rng.normal(size=4 * h).astype(np.float32),
                    rng.normal(size=h).astype(np.float32))
        bench_case(rows, "lstm_gates_forward H=%d" % hdim, gates_args,
                   "lstm_gates_forward", args.repeats)

        def gates_back_args(h=hdim):
            z, c_prev = gates_args(h)
            _, _, i, f, o, g, tc = backend_numpy.lstm_gates_forward(z, c_prev)
            dh = rng.normal(size=h).astype(np.float32)
            dc = rng.normal(size=h).astype(np.float32)
            return (dh, dc, i, f, o, g, c_prev, tc)
        bench_case(rows, "lstm_gates_backward H=%d" % hdim, gates_back_args,
                   "lstm_gates_backward", args.repeats)

        def adadelta_args(h=hdim):
            size = 4 * h * h
            return (rng.normal(size=size).astype(np.float32),
                    rng.normal(size=size).astype(np.float32) * 0.01,
                    np.abs(rng.normal(size=size)).astype(np.float32),
                    np.abs(rng.normal(size=size)).astype(np.float32),
                    0.95, 1e-6)
        bench_case(rows, "adadelta_update n=%d" % (4 * hdim * hdim),
                   adadelta_args, "adadelta_update",
                   max(1, args.repeats // 10))

    for n, m in ((10, 12), (40, 50)):
        def lev_args(n=n, m=m):
            return (rng.integers(0, 30, n).astype(np.int32),
                    rng.integers(0, 30, m).astype(np.int32))
        bench_case(rows, "levenshtein %dx%d" % (n, m), lev_args,
                   "levenshtein", args.repeats, exact=True)

    for n, m in ((20, 25), (60, 80)):
        def lcs_args(n=n, m=m):
            return (rng.integers(0, 50, n).astype(np.int32),
                    rng.integers(0, 50, m).astype(np.int32))
        bench_case(rows, "lcs_table %dx%d" % (n, m), lcs_args,
                   "lcs_table", args.repeats)

    name_w = max(len(r["label"]) for r in rows)
    print("%-*s  %10s  %10s  %8s  %s"
          % (name_w, "kernel", "numpy ms", "numba ms", "speedup", "agree"))
    for r in rows:
        if r["numba_ms"] is None:
            print("%-*s  %10.4f  %10s  %8s  %s"
                  % (name_w, r["label"], r["numpy_ms"], "-", "-", r["agree"]))
        else:
            print("%-*s  %10.4f  %10.4f  %7.1fx  %s"
                  % (name_w, r["label"], r["numpy_ms"], r["numba_ms"],
                     r["speedup"], r["agree"]))
    if backend_numba is None:
        print("\nnumba backend unavailable (NREG_NUMBA=0 or numba not "
              "installed); timed the numpy fallback only.")
    if any(r["agree"] == "NO" for r in rows):
        raise SystemExit("backend outputs disagree")


if __name__ == "__main__":
    main()
