"""Kernel and train-step benchmark: numba vs pure numpy.

Times the conv kernels on the layer shapes a desk-scale run actually hits,
plus one full training step, under each available backend.
"""
from __future__ import annotations

import time

import numpy as np

from . import backend, ops
from .phantom import default_phantom_spec, make_dataset
from .trainer import TrainConfig, compose_batch, init_state, train_step


def _time(fn, reps):
    fn()
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def bench_convs(base_width: int = 4, reps: int = 10) -> list[dict]:
    f = base_width
    shapes = [
        ("cross 24^3 lvl0", 4, f, f, 24),
        ("cross 12^3 lvl1", 4, 2 * f, 2 * f, 12),
        ("cross 24^3 dec0", 4, 3 * f, f, 24),
        ("cubes 8^3 lvl0", 108, f, f, 8),
        ("cubes 4^3 lvl1", 108, 2 * f, 2 * f, 4),
    ]
    rng = np.random.default_rng(0)
    rows = []
    for name, b, ci, co, d in shapes:
        x = rng.standard_normal((b, ci, d, d, d)).astype(np.float32)
        w = (rng.standard_normal((co, ci, 3, 3, 3)) * 0.1).astype(np.float32)
        bias = np.zeros(co, np.float32)
        dy = rng.standard_normal((b, co, d, d, d)).astype(np.float32)
        flop = 2.0 * b * co * d ** 3 * ci * 27
        row = {"shape": name, "gflop": flop / 1e9}
        for bk in available_backends():
            backend.set_backend(bk)
            tf = _time(lambda: ops.conv3_fwd(x, w, bias), reps)
            tb = _time(lambda: ops.conv3_bwd_w(dy, x), reps)
            tx = _time(lambda: ops.conv3_bwd_x(dy, w), reps)
            row[f"{bk}_fwd_ms"] = tf * 1e3
            row[f"{bk}_fwd_gfs"] = flop / tf / 1e9
            row[f"{bk}_bwd_ms"] = (tb + tx) * 1e3
        rows.append(row)
    backend.set_backend("auto")
    return rows


def bench_step(reps: int = 3) -> list[dict]:
    spec = default_phantom_spec(seed=1)
    ds = make_dataset(spec, 8, 0.5, np.random.default_rng(1))
    cfg = TrainConfig(max_iter=10, seed=1)
    rows = []
    for bk in available_backends():
        backend.set_backend(bk)
        state = init_state(cfg)
        batch = compose_batch(ds, cfg, np.random.default_rng(2))
        dt = _time(lambda: train_step(state, batch, cfg), reps)
        rows.append({"backend": bk, "step_ms": dt * 1e3,
                     "est_2000_iter_min": dt * 2000 / 60})
    backend.set_backend("auto")
    return rows


def available_backends() -> list[str]:
    return ["numba", "numpy"] if backend.HAS_NUMBA else ["numpy"]


def print_report() -> None:
    print("conv kernels (3x3x3, stride 1):")
    for row in bench_convs():
        line = f"  {row['shape']:<18} {row['gflop'] * 1e3:7.1f} MFLOP"
        for bk in available_backends():
            line += (f" | {bk}: fwd {row[f'{bk}_fwd_ms']:7.2f} ms"
                     f" ({row[f'{bk}_fwd_gfs']:5.1f} GF/s)"
                     f" bwd {row[f'{bk}_bwd_ms']:7.2f} ms")
        print(line)
    print("full training step (default desk config):")
    for row in bench_step():
        print(f"  {row['backend']:<6} {row['step_ms']:8.1f} ms/step "
              f"(~{row['est_2000_iter_min']:.1f} min per 2000-iteration run)")
