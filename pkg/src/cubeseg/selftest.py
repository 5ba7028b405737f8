"""Fast invariant suite behind the `selftest` subcommand.

A curated subset of the property tests that runs in a few seconds: geometry
inverses, blending algebra, loss gradients against finite differences,
schedule values, metric conventions, and serialization round-trips. Returns
the number of failed checks (0 on a healthy install).
"""
from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from . import blending, cubes, evaluate, losses, volume


def _fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def run_selftest(verbose: bool = True) -> int:
    rng = np.random.default_rng(7)
    failures = 0

    def check(name, ok):
        nonlocal failures
        if not ok:
            failures += 1
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name}")

    # geometry inverses
    ok = True
    for n in (1, 2, 3):
        v = rng.standard_normal((12, 12, 12)).astype(np.float32)
        g = cubes.partition(v, n)
        ok &= np.array_equal(cubes.recover(g), v)
        s = cubes.shuffle_within(g, rng)
        ok &= np.array_equal(cubes.recover(s), v)
        ok &= np.array_equal(cubes.unshuffle(s).locations, np.arange(n ** 3))
    check("partition/recover and shuffle/unshuffle inverses", ok)

    vols = [rng.standard_normal((12, 12, 12)).astype(np.float32) for _ in range(2)]
    grids = [cubes.partition(v, 2, cubes.SourceTag(i == 0, i))
             for i, v in enumerate(vols)]
    mixed, mask = cubes.cross_mix(grids, None, rng)
    rec = cubes.cross_recover([cubes.assemble(m) for m in mixed], mask, 2)
    check("cross_mix -> cross_recover identity",
          all(np.array_equal(r, v) for r, v in zip(rec, vols)))

    # blending algebra
    pt = rng.dirichlet(np.ones(3), size=(4, 4, 4)).transpose(3, 0, 1, 2).astype(np.float32)
    pi = rng.dirichlet(np.ones(3), size=(4, 4, 4)).transpose(3, 0, 1, 2).astype(np.float32)
    t_map = volume.ProbMap(pt, "probabilities")
    i_map = volume.ProbMap(pi, "probabilities")
    zeros = blending.WeightMap(np.zeros((4, 4, 4), np.float32))
    ones = blending.WeightMap(np.ones((4, 4, 4), np.float32))
    check("blend at w=0 is the teacher",
          np.array_equal(blending.blend(t_map, i_map, zeros).data, pt))
    check("blend at w=1 is the cube-wise map",
          np.array_equal(blending.blend(t_map, i_map, ones).data, pi))
    lut = blending.weight_lut(np.array([10, 90]))
    check("weight map follows the class-frequency ratio",
          abs(lut[1] - 10 / 90) < 1e-9 and lut[2] == 1.0 and lut[0] == 0.0)

    # gradients vs central finite differences (float64)
    p = rng.dirichlet(np.ones(3), size=(2, 2, 2)).transpose(3, 0, 1, 2)[None]
    y = rng.integers(0, 3, size=(1, 2, 2, 2)).astype(np.uint8)
    _, dp = losses.dice_loss_grad(p, y)
    fd = _fd_grad(lambda q: losses.dice_loss_batch(q, y), p.copy())
    check("dice gradient matches finite differences",
          np.abs(dp - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-4)
    lg = rng.standard_normal((4, 8))
    tg = rng.integers(0, 8, size=4)
    _, dl = losses.ce_location_grad(lg, tg)
    fd = _fd_grad(lambda q: losses.ce_location_loss(q, tg), lg.copy())
    check("location CE gradient matches finite differences",
          np.abs(dl - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-4)

    # schedules
    w = losses.LossWeights(alpha=0.0, alpha_max=1.0, ramp_iters=100)
    check("warm-up endpoints", abs(losses.alpha_schedule(0, w) - math.exp(-5)) < 1e-9
          and losses.alpha_schedule(100, w) == 1.0
          and losses.alpha_schedule(250, w) == 1.0)
    check("poly lr endpoints", losses.lr_schedule("poly", 0, 0.01, 100) == 0.01
          and losses.lr_schedule("poly", 100, 0.01, 100) == 0.0)
    rep = losses.assemble_total(1, 1, 1, 1, 1, losses.LossWeights(alpha=0.5, beta=0.1))
    check("loss assembly arithmetic", abs(rep.total - 2.7) < 1e-9)

    # metric conventions
    a = np.zeros((5, 5, 5), np.uint8)
    a[1:4, 1:4, 1:4] = 1
    la = volume.LabelMap(a, 1)
    check("perfect-match metrics", evaluate.dsc(la, la, 1) == 1.0
          and evaluate.nsd(la, la, 1) == 1.0)
    empty = volume.LabelMap(np.zeros((5, 5, 5), np.uint8), 1)
    check("empty-mask conventions", evaluate.dsc(empty, empty, 1) == 1.0
          and evaluate.dsc(la, empty, 1) == 0.0)

    # serialization round-trip
    with tempfile.TemporaryDirectory() as td:
        path = Path(td) / "t.mgv"
        v = volume.Volume(rng.standard_normal((3, 4, 5)).astype(np.float32))
        volume.write_raw_volume(v, path)
        volume.write_raw_volume(volume.read_raw_volume(path), Path(td) / "t2.mgv")
        check("raw volume round-trip is byte-exact",
              path.read_bytes() == (Path(td) / "t2.mgv").read_bytes())

    if verbose:
        print(f"{'OK' if failures == 0 else 'FAILED'}: "
              f"{failures} failing check(s)")
    return failures
