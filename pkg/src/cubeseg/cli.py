"""Command-line entry point.

Subcommands: phantom (dataset generation), train, eval, preview (mixing
inspection), ablate (experiment grids), selftest (invariant gate), bench
(backend comparison). Exit codes: 0 success, 2 usage, 3 config/input,
4 numeric failure, 5 I/O. CUBESEG_OUT_ROOT sets the default output root.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, cubes, experiments
from .errors import (ConfigError, ConsistencyError, CubesegError,
                     DimensionError, FormatError, NumericError)
from .evaluate import (EvalConfig, dump_features, emit_plot_data, evaluate,
                       location_accuracy, table_to_csv)
from .phantom import (Dataset, default_phantom_spec, load_dataset,
                      make_dataset, save_dataset)
from .trainer import TrainConfig, load_state, run
from .volume import normalize, write_raw_labels, write_raw_volume
from .volume import LabelMap, Volume


def _out_root() -> Path:
    return Path(os.environ.get("CUBESEG_OUT_ROOT", "."))


def _parse_overrides(pairs: list[str]) -> dict:
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, val = pair.split("=", 1)
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = fields[key].type
        if val.lower() in ("none", "null"):
            out[key] = None
        elif "bool" in str(ftype):
            if val.lower() not in ("true", "false", "1", "0"):
                raise ConfigError(f"{key} expects a boolean, got {val!r}")
            out[key] = val.lower() in ("true", "1")
        elif "int" in str(ftype):
            out[key] = int(val)
        elif "float" in str(ftype):
            out[key] = float(val)
        else:
            out[key] = val
    return out


def _load_train_config(path, overrides: dict) -> TrainConfig:
    base = {}
    if path is not None:
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != 1:
            raise ConfigError(f"{path}: config version must be 1")
        base = doc.get("train", {})
        unknown = set(base) - {f.name for f in dataclasses.fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"{path}: unknown train config keys {sorted(unknown)}")
    return TrainConfig(**{**base, **overrides})


def _write_manifest(out_dir: Path, payload: dict) -> None:
    payload = {"tool_version": __version__, **payload}
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=1, default=str))


def cmd_phantom(args) -> int:
    spec = default_phantom_spec(seed=args.seed)
    if args.dims != 24:
        scale = args.dims / 24.0
        organs = tuple(dataclasses.replace(o, radius=o.radius * scale)
                       for o in spec.organs)
        spec = dataclasses.replace(spec, dims=(args.dims,) * 3, organs=organs,
                                   global_shift_jitter=spec.global_shift_jitter * scale,
                                   organ_shift_jitter=spec.organ_shift_jitter * scale)
    ds = make_dataset(spec, args.cases, args.labeled_fraction,
                      np.random.default_rng(args.seed))
    out = Path(args.out)
    save_dataset(ds, out)
    print(f"wrote {args.cases} cases ({len(ds.labeled_ids)} labeled) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_train_config(args.config, _parse_overrides(args.ablate))
    ds = load_dataset(args.data)
    out = Path(args.out) if args.out else _out_root() / "train_run"
    val_cases = None
    if args.val_data:
        val_ds = load_dataset(args.val_data, with_truth=True)
        val_cases = _eval_cases(val_ds)
    state = run(cfg, ds, out_dir=out, resume=args.resume, val_cases=val_cases)
    print(f"trained {state.iteration} iterations; artifacts in {out}")
    return 0


def _eval_cases(ds: Dataset) -> list:
    cases = [(i, vol, lab) for i, (vol, lab) in zip(ds.labeled_ids, ds.labeled)]
    for i, vol in zip(ds.unlabeled_ids, ds.unlabeled):
        if i in ds.eval_truth:
            cases.append((i, vol, ds.eval_truth[i]))
    return sorted(cases, key=lambda c: c[0])


def cmd_eval(args) -> int:
    state, cfg = load_state(args.checkpoint)
    ds = load_dataset(args.cases, with_truth=True)
    cases = _eval_cases(ds)
    ecfg = EvalConfig(window=(args.window,) * 3, stride=(args.stride,) * 3,
                      tau=args.tau)
    table = evaluate(state.student, cases, ecfg, meta={"tag": Path(args.checkpoint).stem})
    table_to_csv(table, args.out)
    print(f"avg DSC {table.avg_dsc:.2f}  avg NSD {table.avg_nsd:.2f}  -> {args.out}")
    if args.plot_data:
        emit_plot_data([table], args.plot_data)
    if args.dump_features:
        items = [(cid, vol, cid in set(ds.labeled_ids)) for cid, vol, _ in cases]
        feats = dump_features(state.student, items)
        emit_plot_data([table], os.devnull, features=feats,
                       feature_path=args.dump_features)
    if args.loc_accuracy:
        acc = location_accuracy(state.student, cases, cfg.n_cubes)
        print(f"cube-location accuracy: {100 * acc:.2f}%")
    return 0


def cmd_preview(args) -> int:
    ds = load_dataset(args.data)
    vols = [vol for vol, _ in ds.labeled[:1]] + ds.unlabeled[:1]
    labeled_flags = [True] * min(1, len(ds.labeled)) + [False] * (len(vols) - min(1, len(ds.labeled)))
    if len(vols) < 2:
        vols = [vol for vol, _ in ds.labeled[:2]]
        labeled_flags = [True, True]
    if len(vols) < 2:
        raise ConfigError("preview needs at least two cases")
    rng = np.random.default_rng(args.seed)
    grids = [cubes.partition(normalize(v), args.n, cubes.SourceTag(fl, i))
             for i, (v, fl) in enumerate(zip(vols, labeled_flags))]
    mixed, mask = cubes.cross_mix(grids, None, rng, scramble=args.scramble)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cube_dims = grids[0].cube_dims
    for m, g in enumerate(mixed):
        write_raw_volume(cubes.assemble(g), out / f"mixed_{m}.vol.mgv")
        src = np.zeros(g.source_dims, np.uint8)
        for d in range(args.n ** 3):
            jx, jy, jz = cubes.loc_to_xyz(d, args.n)
            sl = (slice(jx * cube_dims[0], (jx + 1) * cube_dims[0]),
                  slice(jy * cube_dims[1], (jy + 1) * cube_dims[1]),
                  slice(jz * cube_dims[2], (jz + 1) * cube_dims[2]))
            src[sl] = mask.assignment[d, m]
        write_raw_labels(LabelMap(src, max(1, len(vols) - 1)),
                         out / f"mixed_{m}.src.mgv")
    sidecar = {"n": args.n, "scramble": args.scramble, "seed": args.seed,
               "assignment": mask.assignment.tolist(),
               "origins": mask.origins.tolist()}
    (out / "mask.json").write_text(json.dumps(sidecar, indent=1))
    _write_manifest(out, {"command": "preview", "config": sidecar})
    print(f"wrote {len(mixed)} mixed volumes to {out}")
    return 0


def cmd_ablate(args) -> int:
    overrides = _parse_overrides(args.ablate)
    ds = load_dataset(args.data)
    test_ds = load_dataset(args.test_data, with_truth=True)
    test_cases = _eval_cases(test_ds)
    ecfg = EvalConfig(window=(args.window,) * 3, stride=(args.stride,) * 3)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.iters:
        overrides["max_iter"] = args.iters
    rows = []
    for seed in range(args.seeds):
        for name, cfg in experiments.grid(args.grid, seed=seed, **overrides):
            run_dir = out / f"{name}_seed{seed}"
            state = run(cfg, ds, out_dir=run_dir)
            table = evaluate(state.student, test_cases, ecfg)
            rows.append([name, seed, f"{table.avg_dsc:.4f}", f"{table.avg_nsd:.4f}"]
                        + [f"{v:.4f}" for v in table.dsc_mean])
            table_to_csv(table, run_dir / "table.csv")
            print(f"{name} seed {seed}: avg DSC {table.avg_dsc:.2f}")
    n_classes = test_ds.num_classes
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "seed", "avg_dsc", "avg_nsd"]
                   + [f"dsc_class_{c}" for c in range(1, n_classes + 1)])
        w.writerows(rows)
    _write_manifest(out, {"command": "ablate", "grid": args.grid,
                          "seeds": args.seeds, "overrides": overrides})
    print(f"summary -> {out / 'summary.csv'}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return 4 if run_selftest(verbose=True) else 0


def cmd_bench(args) -> int:
    from .bench import print_report
    print_report()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cubeseg", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int, default=40)
    g.add_argument("--dims", type=int, default=24)
    g.add_argument("--labeled-fraction", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_phantom)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--config")
    t.add_argument("--resume")
    t.add_argument("--val-data")
    t.add_argument("--ablate", nargs="*", metavar="KEY=VALUE")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--cases", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--window", type=int, default=24)
    e.add_argument("--stride", type=int, default=8)
    e.add_argument("--tau", type=float, default=1.0)
    e.add_argument("--plot-data")
    e.add_argument("--dump-features")
    e.add_argument("--loc-accuracy", action="store_true")
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("preview", help="write mixed volumes for inspection")
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--n", type=int, default=3)
    v.add_argument("--scramble", action="store_true")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_preview)

    a = sub.add_parser("ablate", help="run an experiment grid")
    a.add_argument("--grid", required=True,
                   choices=["table3", "table4", "table5", "nstudy", "scramble"])
    a.add_argument("--data", required=True)
    a.add_argument("--test-data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--iters", type=int, default=0)
    a.add_argument("--window", type=int, default=16)
    a.add_argument("--stride", type=int, default=8)
    a.add_argument("--ablate", nargs="*", metavar="KEY=VALUE")
    a.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("selftest", help="run the fast invariant suite")
    s.set_defaults(fn=cmd_selftest)

    b = sub.add_parser("bench", help="compare numba and numpy kernels")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, DimensionError, ConsistencyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
