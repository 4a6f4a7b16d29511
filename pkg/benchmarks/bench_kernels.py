#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Runs each kernel at training-like and inference-like shapes, plus one full
training iteration and one fine-tune batch step end to end, and prints a
table of per-call times for every available backend.

Usage: python benchmarks/bench_kernels.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from precisedmi import _kernels
from precisedmi import neuralnet as nn
from precisedmi.signal_model import SpectralGrid, default_priors
from precisedmi.synth import TrainingSampleSpec, sample_training_batch


def timeit(fn, repeats):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3


def kernel_cases():
    rng = np.random.default_rng(0)
    cases = []
    for tag, (b, ci, co, n) in [("train", (128, 16, 32, 256)),
                                ("voxel", (1, 16, 32, 256))]:
        x = rng.standard_normal((b, ci, n)).astype(np.float32)
        w = rng.standard_normal((co, ci, 3)).astype(np.float32)
        bias = np.zeros(co, np.float32)
        gy = rng.standard_normal((b, co, n)).astype(np.float32)
        slope = np.full(co, 0.25, np.float32)
        cases.append((f"conv1d fwd  {tag} {b}x{ci}->{co}x{n}",
                      lambda k, x=x, w=w, bias=bias: k.conv1d_forward(x, w, bias)))
        cases.append((f"conv1d bwd  {tag}",
                      lambda k, x=x, w=w, gy=gy: k.conv1d_backward(x, w, gy)))
        y = rng.standard_normal((b, co, n)).astype(np.float32)
        cases.append((f"prelu fwd   {tag}",
                      lambda k, y=y, slope=slope: k.prelu_forward(y, slope)))
        cases.append((f"prelu bwd   {tag}",
                      lambda k, y=y, slope=slope, gy=gy:
                      k.prelu_backward(y, slope, gy)))
        cases.append((f"maxpool f/b {tag}",
                      lambda k, y=y: k.maxpool_backward(
                          k.maxpool_forward(y, 2)[1],
                          np.ascontiguousarray(y[:, :, ::2]), y.shape[2])))
    n_par = 1_058_116
    p = np.zeros(n_par, np.float32)
    g = rng.standard_normal(n_par).astype(np.float32)
    m = np.zeros(n_par, np.float32)
    v = np.zeros(n_par, np.float32)
    cases.append((f"adam {n_par} params",
                  lambda k: k.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 7)))
    return cases


def end_to_end(backend, repeats):
    priors = default_priors()
    grid = SpectralGrid()
    spec = TrainingSampleSpec.default(priors, grid)
    arch = nn.ArchitectureSpec()
    rng = np.random.default_rng(0)
    params = nn.init_params(arch, rng)
    x, a = sample_training_batch(spec, priors, grid, rng, 128)
    state = nn.AdamState.for_params(params)

    def train_iter():
        out, cache = nn.forward_cached(params, x)
        _, gout = nn.mse_loss_grad(out, a.astype(out.dtype))
        grads = nn.backward(params, cache, gout)
        nn.adam_step(state, params, grads)

    feats = rng.standard_normal((9, arch.flat_features)).astype(np.float32)
    targets = rng.standard_normal((9, arch.n_out)).astype(np.float32)
    st2 = nn.AdamState.for_params(params, names=params.fc_names())

    def finetune_step():
        out, cache = nn._head_forward(params, feats, True)
        _, gout = nn.mse_loss_grad(out, targets)
        grads, _ = nn.head_backward(params, cache, gout.astype(out.dtype),
                                    need_gflat=False)
        nn.adam_step(st2, params, grads)

    with _kernels.use(backend):
        t_train = timeit(train_iter, max(3, repeats // 5))
        t_ft = timeit(finetune_step, repeats)
    return t_train, t_ft


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    backends = _kernels.available_backends()
    print(f"available backends: {', '.join(backends)} "
          f"(active: {_kernels.backend_name()})\n")
    width = 38
    print(f"{'kernel':<{width}}" + "".join(f"{b:>12}" for b in backends))
    for name, call in kernel_cases():
        times = []
        for b in backends:
            with _kernels.use(b):
                times.append(timeit(lambda: call(_kernels.active), args.repeats))
        print(f"{name:<{width}}" + "".join(f"{t:>10.2f}ms" for t in times))
    print()
    for b in backends:
        t_train, t_ft = end_to_end(b, args.repeats)
        print(f"{b:>8}: training iteration {t_train:7.1f} ms, "
              f"fine-tune batch step {t_ft:6.2f} ms")


if __name__ == "__main__":
    main()
