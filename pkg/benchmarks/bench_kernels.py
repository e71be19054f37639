"""Time the compiled kernels against the pure-numpy fallback.

Runs each kernel on transformer-shaped inputs and one full training step
of the encoder under both backends.  Usage:

    python3 benchmarks/bench_kernels.py [--repeats 30] [--dtype float32]
"""

from __future__ import annotations

import argparse
import time

import numpy as np


def _timeit(fn, repeats: int) -> float:
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_kernels(repeats: int, dtype) -> list[tuple[str, float, float]]:
    from dagquery.kernels import _core, np_backend

    rng = np.random.default_rng(0)
    batch, heads, t, d, dff, ents = 32, 4, 48, 64, 256, 2000

    scores = rng.normal(size=(batch, heads, t, t)).astype(dtype)
    allowed = rng.random(size=(batch, 1, t, t)) > 0.2
    probs = np_backend.masked_softmax(scores, allowed)
    dprobs = rng.normal(size=probs.shape).astype(dtype)

    x = rng.normal(size=(batch, t, d)).astype(dtype)
    gain = np.ones(d, dtype=dtype)
    bias = np.zeros(d, dtype=dtype)
    _, xhat, rstd = np_backend.layer_norm(x, gain, bias, 1e-5)
    dy = rng.normal(size=x.shape).astype(dtype)

    h = rng.normal(size=(batch, t, dff)).astype(dtype)
    dh = rng.normal(size=h.shape).astype(dtype)

    logits = rng.normal(size=(batch * 3, ents)).astype(dtype)
    labels = rng.integers(0, ents, size=batch * 3).astype(np.int64)

    param = rng.normal(size=(ents, d)).astype(dtype)
    grad = rng.normal(size=param.shape).astype(dtype)
    m = np.zeros_like(param)
    v = np.zeros_like(param)

    acc = np.zeros((ents, d), dtype=dtype)
    idx = rng.integers(0, ents, size=batch * t).astype(np.int64)
    rows = rng.normal(size=(batch * t, d)).astype(dtype)

    cases = [
        ("masked_softmax", lambda b: b.masked_softmax(scores, allowed)),
        ("softmax_grad", lambda b: b.softmax_grad(probs, dprobs)),
        ("layer_norm", lambda b: b.layer_norm(x, gain, bias, 1e-5)),
        ("layer_norm_grad", lambda b: b.layer_norm_grad(dy, xhat, rstd, gain)),
        ("gelu", lambda b: b.gelu(h)),
        ("gelu_grad", lambda b: b.gelu_grad(h, dh)),
        ("softmax_xent", lambda b: b.softmax_xent(logits, labels)),
        ("adam_update", lambda b: b.adam_update(
            param, grad, m, v, step=5, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)),
        ("add_rows", lambda b: b.add_rows(acc, idx, rows)),
    ]
    out = []
    for name, call in cases:
        t_np = _timeit(lambda: call(np_backend), repeats)
        t_cy = _timeit(lambda: call(_core), repeats)
        out.append((name, t_np, t_cy))
    return out


def bench_train_step(repeats: int) -> list[tuple[str, float, float]]:
    import os
    import subprocess
    import sys
    import textwrap

    # The backend is chosen at import time, so each side runs in a fresh
    # interpreter with DAGQUERY_KERNELS pinned.
    script = textwrap.dedent(
        """
        import time, numpy as np
        from dagquery.kg import Vocabulary
        from dagquery.querydag import QueryDag, QueryNode, ANCHOR, TARGET
        from dagquery.encoding import encode_query, collate
        from dagquery import transformer as tf

        vocab = Vocabulary(num_entities=2000, num_relations=20)
        cfg = tf.ModelConfig(vocab_size=vocab.size, num_entities=2000,
                             num_layers=2, num_heads=4, hidden=64,
                             ffn_hidden=256, max_positions=48, dropout=0.0,
                             dtype="float32", init_seed=0)
        params = tf.init_params(cfg)
        rng = np.random.default_rng(0)
        seqs, labels = [], []
        for _ in range(32):
            k = int(rng.integers(2, 6))
            nodes = [QueryNode(0, ANCHOR, int(rng.integers(2000)))]
            nodes += [QueryNode(i, TARGET) for i in range(1, k + 1)]
            edges = tuple((i, int(rng.integers(20)), i + 1) for i in range(k))
            dag = QueryDag(tuple(nodes), edges)
            seqs.append(encode_query(dag, vocab, max_len=48))
            labels += [int(rng.integers(2000))] * k
        batch = collate(seqs)
        labels = np.asarray(labels, dtype=np.int64)
        state = tf.AdamState.init(params)

        def step():
            res = tf.loss_and_grads(params, batch, labels, mode="bidirectional", train=False)
            tf.adam_step(params.arrays, res.grads, state, lr=1e-3)

        step()
        best = min(
            (lambda s: (step(), time.perf_counter() - s)[1])(time.perf_counter())
            for _ in range(%d)
        )
        print(best)
        """
        % repeats
    )
    times = {}
    for backend in ("numpy", "compiled"):
        env = dict(os.environ, DAGQUERY_KERNELS=backend)
        out = subprocess.run(
            [sys.executable, "-c", script], env=env, capture_output=True, text=True
        )
        if out.returncode != 0:
            raise RuntimeError(out.stderr)
        times[backend] = float(out.stdout.strip())
    return [("train_step(B=32,T=48)", times["numpy"], times["compiled"])]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    parser.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    parser.add_argument("--skip-train-step", action="store_true")
    args = parser.parse_args()

    rows = bench_kernels(args.repeats, np.dtype(args.dtype))
    if not args.skip_train_step:
        rows += bench_train_step(max(3, args.repeats // 3))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'compiled':>10}  {'speedup':>8}")
    for name, t_np, t_cy in rows:
        print(
            f"{name:<{width}}  {t_np * 1e3:>8.3f}ms  {t_cy * 1e3:>8.3f}ms  "
            f"{t_np / t_cy:>7.2f}x"
        )


if __name__ == "__main__":
    main()
