"""Named training configurations and the ablation grids.

The presets pin the desk-scale experiment matrix: a supervised-only lower
bound, a plain mean-teacher baseline, the cross-branch-only model, and the
full model, plus the component / supervision-strategy / augmentation grids
the `ablate` subcommand expands.
"""
from __future__ import annotations

from dataclasses import replace

from .errors import ConfigError
from .trainer import TrainConfig


def preset(name: str, seed: int = 0, **overrides) -> TrainConfig:
    base = TrainConfig(seed=seed)
    table = {
        "full": dict(),
        "supervised": dict(batch_unlabeled=0, cross=False, within=False,
                           loc=False, blend=False, sup_mode="teacher"),
        "mt": dict(cross=False, within=False, loc=False, blend=False,
                   sup_mode="teacher"),
        "cross": dict(within=False, loc=False, blend=False, sup_mode="teacher"),
        "cross_in": dict(loc=False, blend=False, sup_mode="teacher"),
        "cross_loc": dict(within=False, blend=False, sup_mode="teacher"),
        "cross_in_loc": dict(blend=False, sup_mode="teacher"),
    }
    if name not in table:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(table)}")
    return replace(base, **{**table[name], **overrides})


def grid(name: str, seed: int = 0, **overrides) -> list[tuple[str, TrainConfig]]:
    """Expand a named experiment grid into (run name, config) pairs."""
    if name == "table3":
        names = ["mt", "cross", "cross_in", "cross_loc", "cross_in_loc", "full"]
        return [(n, preset(n, seed, **overrides)) for n in names]
    if name == "table4":
        runs = []
        for mode in ("teacher", "mutual", "blend"):
            cfg = preset("full", seed, sup_mode=mode,
                         blend=(mode == "blend"), **overrides)
            runs.append((f"sup_{mode}", cfg))
        return runs
    if name == "table5":
        runs = []
        for aug in ("cutmix", "cutout", "mixup"):
            cfg = preset("mt", seed, baseline_aug=aug, **overrides)
            runs.append((aug, cfg))
        for n in (2, 3):
            runs.append((f"ours_n{n}", preset("full", seed, n_cubes=n, **overrides)))
        return runs
    if name == "nstudy":
        return [(f"n{n}", preset("full", seed, n_cubes=n, **overrides))
                for n in (2, 3)]
    if name == "scramble":
        runs = []
        for keep, scope in ((False, "U"), (True, "U"), (False, "LU"), (True, "LU")):
            cfg = preset("cross", seed, scramble=not keep, mix_scope=scope,
                         **overrides)
            runs.append((f"{'keep' if keep else 'scramble'}_{scope}", cfg))
        return runs
    raise ConfigError(f"unknown grid {name!r}; have table3, table4, table5, "
                      "nstudy, scramble")
