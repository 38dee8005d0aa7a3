"""Benchmark the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times the three hot paths (autoregressive sampling, PPO policy loss with
gradient, value loss with gradient) plus GAE, and one end-to-end training
iteration of the parallel-retrieval workflow under each backend. The two
backends agree on sampled tokens and match log-probs/gradients to ~1e-12;
whole-run byte determinism holds within a backend.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from marlflow._kernels import pyref

try:
    from marlflow._kernels import _fast as fast
except ImportError:
    fast = None


def time_fn(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(feat=136, vocab=105, rows=64, width=8, n_samples=200):
    rng = np.random.default_rng(0)
    pol = rng.normal(size=(feat, vocab))
    vw = rng.normal(size=feat)
    bases = np.zeros((n_samples, feat))
    for i in range(n_samples):
        for t in rng.integers(0, vocab, size=16):
            bases[i, t] += 1
        bases[i, vocab + int(rng.integers(0, feat - vocab))] = 1.0
    unis = rng.random((n_samples, width))
    tokens = rng.integers(0, vocab, size=(rows, width)).astype(np.int32)
    lengths = rng.integers(1, width + 1, size=rows).astype(np.int32)
    base_feats = rng.integers(0, 3, size=(rows, feat)).astype(np.float64)
    old = -rng.random((rows, width))
    adv = rng.normal(size=(rows, width))
    ret = rng.normal(size=(rows, width))
    rew = rng.normal(size=(rows, width))
    val = rng.normal(size=(rows, width))
    tv = np.zeros(rows)

    def bench(impl):
        return {
            "sample_tokens x200": lambda: [
                impl.sample_tokens(pol, vw, bases[i], unis[i], 1, False)
                for i in range(n_samples)],
            "policy_loss_grad": lambda: impl.policy_loss_grad(
                pol, base_feats, tokens, lengths, old, adv, 0.2, 0.0),
            "value_loss_grad": lambda: impl.value_loss_grad(
                vw, base_feats, tokens, lengths, ret, 0.5),
            "gae_batch": lambda: impl.gae_batch(rew, val, lengths, tv, 1.0, 0.95),
        }

    return bench


def end_to_end_iteration():
    from marlflow.buffers import build_ready_batch
    from marlflow.config import default_config
    from marlflow.controller import assemble_and_commit, run_rollout
    from marlflow.loop import build_environment, build_workers
    from marlflow.policy import sync
    from marlflow.trainer import update

    cfg = default_config("A", seed=1, iterations=1, n_train=32, n_eval=8)
    env = build_environment(cfg)
    workers = build_workers(cfg, env)

    def once():
        records = run_rollout(env.train_tasks[:16], cfg.graph, cfg.mapping,
                              workers, env, 1, run_seed=1, epoch=1)
        for rec in records:
            if rec.done and not rec.failed:
                assemble_and_commit(rec, cfg.reward_spec, workers, env)
        for worker in workers.values():
            batch = build_ready_batch(worker.buffer, shuffle_seed=1)
            update(worker, batch, worker.trainer_config)
            sync(worker.model)

    return once


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    bench = kernel_cases()
    py_times = {name: time_fn(fn, args.repeat)
                for name, fn in bench(pyref).items()}
    fast_times = None
    if fast is not None:
        fast_times = {name: time_fn(fn, args.repeat)
                      for name, fn in bench(fast).items()}

    width = max(len(n) for n in py_times)
    header = f"{'kernel':<{width}}  {'python':>10}  {'compiled':>10}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, pt in py_times.items():
        if fast_times:
            ft = fast_times[name]
            print(f"{name:<{width}}  {pt * 1e3:>8.2f}ms  {ft * 1e3:>8.2f}ms  "
                  f"{pt / ft:>7.1f}x")
        else:
            print(f"{name:<{width}}  {pt * 1e3:>8.2f}ms  {'n/a':>10}  {'n/a':>8}")

    import os
    print()
    for backend in (["python", "compiled"] if fast is not None else ["python"]):
        os.environ["MARLFLOW_KERNELS"] = backend
        import importlib

        import marlflow._kernels as k
        importlib.reload(k)
        once = end_to_end_iteration()
        once()  # warm caches
        t = time_fn(once, max(2, args.repeat // 2))
        print(f"end-to-end training iteration ({backend:>8}): {t * 1e3:8.2f}ms")
    os.environ.pop("MARLFLOW_KERNELS", None)


if __name__ == "__main__":
    main()
