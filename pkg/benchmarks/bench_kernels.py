"""Compare the compiled and numpy recurrent kernels.

Times one forward+backward pass of each recurrent layer at the sizes the
models use, and one full training step of each model, on every available
backend. Run with ``python benchmarks/bench_kernels.py [--repeat N]``.
"""
import argparse
import timeit

import numpy as np

from ponwatch.models import build_model
from ponwatch.nn_core import GRU, LSTM, backend

CASES = [
    # name, layer class, input dim, hidden, seq len, batch
    ("gru 1->64, T=280", GRU, 1, 64, 280, 64),
    ("gru 64->32, T=280", GRU, 64, 32, 280, 64),
    ("lstm 1->16, T=30", LSTM, 1, 16, 30, 64),
]


def layer_step(cls, d, h, t, b):
    rng = np.random.default_rng(0)
    layer = cls(d, h, rng=rng)
    xs = rng.normal(size=(t, b, d))
    dy = rng.normal(size=(t, b, h))

    def step():
        layer.forward(xs)
        return layer.backward(dy)

    return step


def model_step(kind, b=64):
    rng = np.random.default_rng(0)
    m = build_model(kind, seed=0)
    X = rng.uniform(size=(b, m.seq_len))
    if kind == "branch":
        tgt = {"y": rng.integers(0, 9, b)}
    else:
        tgt = {"y": rng.integers(0, 3 if kind == "generic_a" else 7, b), "positions": rng.uniform(size=(b, 2)),
               "levels": rng.uniform(size=(b, 2)), "mask": np.ones((b, 2), dtype=bool)}
    w = (1.0,) * len(m.task_names)

    def step():
        m.zero_grad()
        return m.loss_and_backward(X, tgt, w)

    return step


def best_of(fn, repeat):
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    names = backend.available()
    cases = [(n, layer_step(c, d, h, t, b)) for n, c, d, h, t, b in CASES]
    cases += [(f"train step {k}, batch 64", model_step(k)) for k in ("branch", "generic_a", "generic_b")]
    prev = backend.name()
    print(f"{'case':<28}" + "".join(f"{n + ' ms':>14}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, fn in cases:
        times = {}
        for n in names:
            backend.use(n)
            times[n] = best_of(fn, args.repeat) * 1e3
        row = f"{label:<28}" + "".join(f"{times[n]:>14.2f}" for n in names)
        if "cython" in times and "python" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)
    backend.use(prev)
    if len(names) == 1:
        print("compiled kernels not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
