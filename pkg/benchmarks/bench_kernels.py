"""Benchmark the compiled kernels against the numpy fallback.

Times each kernel on training-sized inputs, then a full bilevel
training run under each backend. Run from the repo root:

    python3 benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import time

import numpy as np

from lbi import _kernels as K
from lbi import models as M
from lbi import ignoring as ig


def timeit(fn, repeats):
    fn()  # warmup
    best = float("inf")
    for _ in range(3):
        start = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - start) / repeats)
    return best


def kernel_cases(rng):
    b, d_in, d_out, e, v, c = 64, 16, 32, 16, 60, 26
    x = rng.standard_normal((b, d_in))
    w = rng.standard_normal((d_out, d_in))
    bias = rng.standard_normal(d_out)
    dy = rng.standard_normal((b, d_out))
    logits = np.ascontiguousarray(rng.standard_normal((b, c)))
    labels = rng.integers(0, c, size=b)
    wpe = np.full(b, 1.0 / b)
    table = rng.standard_normal((v, e))
    lengths = rng.integers(4, 8, size=b)
    offsets = np.zeros(b + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(lengths)
    tokens = rng.integers(0, v, size=int(offsets[-1]))
    dpool = np.ascontiguousarray(rng.standard_normal((b, e)))
    z = np.ascontiguousarray(rng.standard_normal(b))
    y01 = np.ascontiguousarray(rng.integers(0, 2, size=b).astype(np.float64))
    p = rng.standard_normal(2000)
    g = rng.standard_normal(2000)
    m = np.zeros(2000)
    vv = np.zeros(2000)

    _, probs = K.softmax_xent_fwd(logits, labels)
    probs = np.ascontiguousarray(probs)
    return {
        "linear_fwd (64x16 -> 32)": lambda: K.linear_fwd(x, w, bias),
        "linear_bwd": lambda: K.linear_bwd(x, w, dy),
        "tanh_fwd (64x32)": lambda: K.tanh_fwd(dy),
        "softmax_xent_fwd (64x26)": lambda: K.softmax_xent_fwd(logits, labels),
        "softmax_xent_bwd": lambda: K.softmax_xent_bwd(probs, labels, wpe),
        "bce_logits_fwd (64)": lambda: K.bce_logits_fwd(z, y01),
        "embed_meanpool_fwd (64 segs)": lambda: K.embed_meanpool_fwd(table, tokens, offsets),
        "embed_meanpool_bwd": lambda: K.embed_meanpool_bwd(dpool, tokens, offsets, v),
        "adam_step (2000 params)": lambda: K.adam_step(
            p, g, m, vv, 1, 0.01, 0.9, 0.999, 1e-8, 0.0
        ),
    }


def end_to_end():
    """Bilevel training of the two-tower model, the real hot path."""
    from lbi import data as D

    ds = D.generate_synthetic(600, d_img=16, n_concepts=8, seed=0)
    train, val, _ = D.stratified_split(ds.examples, D.SplitSpec(seed=0))
    dims = M.ModelDims(
        d_img=16, vocab_size=ds.vocab.size, embed_dim=16, hidden_dim=32,
        n_answers=ds.n_answers,
    )
    model = M.TwoTowerModel.create(dims, seed=0)
    task = ig.VqaTask(
        model,
        M.make_vqa_batch(train, dims.vocab_size, dims.n_answers),
        M.make_vqa_batch(val, dims.vocab_size, dims.n_answers),
    )
    cfg = ig.LbiConfig(
        epochs=5, train_batch_size=64, val_batch_size=128, lr_a=0.1, seed=0
    )
    start = time.perf_counter()
    ig.lbi_train(task, cfg)
    return time.perf_counter() - start


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    if "compiled" not in K.available_backends():
        raise SystemExit(
            "compiled backend not built; install with "
            "`pip install -e . --no-build-isolation`"
        )

    rng = np.random.Generator(np.random.PCG64(0))
    rows = []
    for backend in ("python", "compiled"):
        K.set_backend(backend)
        cases = kernel_cases(rng)
        rows.append({name: timeit(fn, args.repeats) for name, fn in cases.items()})

    print(f"{'kernel':<32} {'python us':>10} {'compiled us':>12} {'speedup':>8}")
    for name in rows[0]:
        py, cy = rows[0][name] * 1e6, rows[1][name] * 1e6
        print(f"{name:<32} {py:>10.2f} {cy:>12.2f} {py / cy:>7.2f}x")

    print()
    for backend in ("python", "compiled"):
        K.set_backend(backend)
        seconds = end_to_end()
        print(f"bilevel two-tower run (5 epochs, 360 train), {backend:>8}: {seconds:.3f}s")


if __name__ == "__main__":
    main()
