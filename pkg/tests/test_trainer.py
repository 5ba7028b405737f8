import dataclasses

import numpy as np
import pytest

from cubeseg.checkpoint import read_tensors
from cubeseg.errors import ConfigError, NumericError
from cubeseg.losses import dice_loss_batch
from cubeseg.model import net_forward
from cubeseg.phantom import OrganSpec, PhantomSpec, make_dataset
from cubeseg.trainer import (TrainConfig, _stream, compose_batch, init_state,
                             load_state, run, save_state, train_step)
from cubeseg.volume import softmax_channels_array


def tiny_spec(seed=0):
    organs = (
        OrganSpec(1, (0.38, 0.42, 0.45), 3.0, 0.1, 0.7, 0.05),
        OrganSpec(2, (0.68, 0.6, 0.55), 1.5, 0.15, 0.5, 0.05),
    )
    return PhantomSpec(dims=(12, 12, 12), organs=organs,
                       global_shift_jitter=0.6, organ_shift_jitter=0.3,
                       noise_std=0.08, gradient=(0.2, 0.15, 0.25), seed=seed)


def tiny_cfg(**kw):
    base = dict(num_classes=2, crop_size=8, n_cubes=2, batch_labeled=2,
                batch_unlabeled=2, max_iter=8, base_lr=0.05, base_width=2,
                depth=2, cls_hidden=8, hist_window=4, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset():
    return make_dataset(tiny_spec(), 8, 0.5, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(crop_size=9)          # not divisible by n_cubes=2... also 2^depth
    with pytest.raises(ConfigError):
        tiny_cfg(n_cubes=3)            # cube size 8/3 not integral
    with pytest.raises(ConfigError):
        tiny_cfg(sup_mode="bogus")
    with pytest.raises(ConfigError):
        tiny_cfg(sup_mode="mutual", within=False)
    with pytest.raises(ConfigError):
        tiny_cfg(baseline_aug="cutmix")  # cross must be off
    with pytest.raises(ConfigError):
        tiny_cfg(scramble=True, cross=False)


def test_effective_sup_degrades_without_within():
    assert tiny_cfg(within=False).effective_sup == "teacher"
    assert tiny_cfg(blend=False).effective_sup == "teacher"
    assert tiny_cfg().effective_sup == "blend"


def test_compose_batch_structure(dataset):
    cfg = tiny_cfg()
    batch = compose_batch(dataset, cfg, np.random.default_rng(1))
    assert len(batch) == 4
    assert [b.labeled for b in batch] == [True, True, False, False]
    for item in batch:
        assert item.x.shape == (8, 8, 8)
        assert abs(float(item.x.mean())) < 1.0
    assert batch[0].y is not None and batch[2].y is None


def test_compose_batch_deterministic(dataset):
    cfg = tiny_cfg()
    a = compose_batch(dataset, cfg, np.random.default_rng(9))
    b = compose_batch(dataset, cfg, np.random.default_rng(9))
    for x, y in zip(a, b):
        assert np.array_equal(x.x, y.x) and x.case_id == y.case_id


def test_compose_batch_requires_unlabeled_cases():
    ds = make_dataset(tiny_spec(1), 4, 1.0, np.random.default_rng(1))
    cfg = tiny_cfg()
    with pytest.raises(ConfigError):
        compose_batch(ds, cfg, np.random.default_rng(0))


def test_zero_lr_step_keeps_student_and_moves_teacher_by_ema(dataset):
    cfg = tiny_cfg(base_lr=0.0, ema_decay=0.9)
    state = init_state(cfg)
    student_before = {k: v.copy() for k, v in state.student.tensors.items()}
    teacher_before = {k: v.copy() for k, v in state.teacher.tensors.items()}
    batch = compose_batch(dataset, cfg, _stream(cfg, 101, 0))
    train_step(state, batch, cfg)
    for k in student_before:
        assert np.array_equal(state.student.tensors[k], student_before[k]), k
        want = np.float32(0.9) * teacher_before[k] \
            + np.float32(0.1) * state.student.tensors[k]
        assert np.array_equal(state.teacher.tensors[k], want), k


def test_teacher_follows_exact_ema_chain(dataset):
    cfg = tiny_cfg(ema_decay=0.95)
    state = init_state(cfg)
    for t in range(3):
        teacher_before = {k: v.copy() for k, v in state.teacher.tensors.items()}
        batch = compose_batch(dataset, cfg, _stream(cfg, 101, t))
        train_step(state, batch, cfg)
        for k in teacher_before:
            want = np.float32(0.95) * teacher_before[k] \
                + np.float32(0.05) * state.student.tensors[k]
            assert np.array_equal(state.teacher.tensors[k], want)


def test_student_actually_learns_labels(dataset):
    cfg = tiny_cfg(max_iter=40, cross=True, within=True, loc=True)
    state = init_state(cfg)
    first = last = None
    for t in range(40):
        batch = compose_batch(dataset, cfg, _stream(cfg, 101, t))
        rep, _ = train_step(state, batch, cfg)
        if t == 0:
            first = rep.l_cross_sup
        last = rep.l_cross_sup
    assert last < first


def test_teacher_mode_target_is_teacher_argmax(dataset):
    cfg = tiny_cfg(sup_mode="teacher", blend=False)
    state = init_state(cfg)
    batch = compose_batch(dataset, cfg, _stream(cfg, 101, 0))
    teacher = state.teacher.copy()
    _, extras = train_step(state, batch, cfg)
    xs_u = np.stack([b.x for b in batch if not b.labeled])[:, None]
    logits, _, _ = net_forward(teacher.config, teacher.tensors, xs_u)
    want = softmax_channels_array(logits, axis=1).argmax(axis=1)
    assert np.array_equal(extras["unsup_target"], want)


def test_blend_mode_can_flip_targets_toward_tail(dataset):
    # with a warm histogram dominated by class 1, blending must be able to
    # deviate from the raw teacher argmax
    cfg = tiny_cfg(sup_mode="blend")
    state = init_state(cfg)
    for t in range(6):
        batch = compose_batch(dataset, cfg, _stream(cfg, 101, t))
        _, extras = train_step(state, batch, cfg)
    assert extras["mean_omega"] >= 0.0
    assert extras["unsup_target"] is not None


def test_loss_report_structure_per_ablation(dataset):
    cfg = tiny_cfg(within=False, loc=False, blend=False, sup_mode="teacher")
    state = init_state(cfg)
    batch = compose_batch(dataset, cfg, _stream(cfg, 101, 0))
    rep, _ = train_step(state, batch, cfg)
    assert rep.l_cross_sup > 0
    assert rep.l_cross_in_unsup > 0
    assert rep.l_in_sup == 0.0
    assert rep.l_cls_sup == 0.0 and rep.l_cls_unsup == 0.0


def test_supervised_only_runs_without_unlabeled():
    ds = make_dataset(tiny_spec(2), 4, 1.0, np.random.default_rng(2))
    cfg = tiny_cfg(batch_unlabeled=0, cross=False, within=False, loc=False,
                   blend=False, sup_mode="teacher")
    state = init_state(cfg)
    batch = compose_batch(ds, cfg, _stream(cfg, 101, 0))
    rep, extras = train_step(state, batch, cfg)
    assert rep.l_cross_in_unsup == 0.0
    assert extras["unsup_target"] is None


def test_mix_scope_u_forwards_labeled_whole(dataset):
    cfg = tiny_cfg(mix_scope="U", within=False, loc=False, blend=False,
                   sup_mode="teacher")
    state = init_state(cfg)
    student = state.student.copy()
    batch = compose_batch(dataset, cfg, _stream(cfg, 101, 0))
    rep, _ = train_step(state, batch, cfg)
    xs_l = np.stack([b.x for b in batch if b.labeled])[:, None]
    ys_l = np.stack([b.y for b in batch if b.labeled])
    logits, _, _ = net_forward(student.config, student.tensors, xs_l)
    probs = softmax_channels_array(logits, axis=1)
    assert abs(dice_loss_batch(probs, ys_l) - rep.l_cross_sup) < 1e-6


@pytest.mark.parametrize("mode", ["mutual", "teacher"])
def test_alternative_sup_modes_run(dataset, mode):
    cfg = tiny_cfg(sup_mode=mode, blend=False)
    state = init_state(cfg)
    batch = compose_batch(dataset, cfg, _stream(cfg, 101, 0))
    rep, _ = train_step(state, batch, cfg)
    assert np.isfinite(rep.total)


def test_scramble_mode_runs(dataset):
    cfg = tiny_cfg(scramble=True)
    state = init_state(cfg)
    batch = compose_batch(dataset, cfg, _stream(cfg, 101, 0))
    rep, _ = train_step(state, batch, cfg)
    assert np.isfinite(rep.total)


@pytest.mark.parametrize("aug", ["cutmix", "cutout", "mixup"])
def test_baseline_augmentations_run(dataset, aug):
    cfg = tiny_cfg(cross=False, within=False, loc=False, blend=False,
                   sup_mode="teacher", baseline_aug=aug)
    state = init_state(cfg)
    batch = compose_batch(dataset, cfg, _stream(cfg, 101, 0))
    rep, _ = train_step(state, batch, cfg)
    assert np.isfinite(rep.total) and rep.l_cross_in_unsup > 0


def test_nan_parameters_raise_numeric_error(dataset):
    cfg = tiny_cfg()
    state = init_state(cfg)
    state.student.tensors["enc0a.w"][:] = np.nan
    batch = compose_batch(dataset, cfg, _stream(cfg, 101, 0))
    with pytest.raises(NumericError):
        train_step(state, batch, cfg)


def test_histogram_capacity_is_window_times_batch(dataset):
    cfg = tiny_cfg(hist_window=4, batch_unlabeled=2)
    state = init_state(cfg)
    assert state.hist.capacity == 8
    for t in range(6):
        batch = compose_batch(dataset, cfg, _stream(cfg, 101, t))
        train_step(state, batch, cfg)
    assert len(state.hist.window) == 8


def test_run_writes_metrics_and_checkpoints(dataset, tmp_path):
    cfg = tiny_cfg(max_iter=4, checkpoint_interval=2)
    out = tmp_path / "run"
    state = run(cfg, dataset, out_dir=out)
    assert state.iteration == 4
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 5  # header + one row per iteration
    assert lines[0].startswith("iteration,lr,alpha,")
    assert (out / "ckpt_000002.mgck").exists()
    assert (out / "ckpt_final.mgck").exists()
    assert (out / "run_manifest.json").exists()


def test_run_zero_iterations(dataset, tmp_path):
    cfg = tiny_cfg(max_iter=0)
    out = tmp_path / "zero"
    state = run(cfg, dataset, out_dir=out)
    assert state.iteration == 0
    assert len((out / "metrics.csv").read_text().splitlines()) == 1


def test_run_determinism_bitwise(dataset, tmp_path):
    cfg = tiny_cfg(max_iter=6)
    run(cfg, dataset, out_dir=tmp_path / "a")
    run(cfg, dataset, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
        (tmp_path / "b" / "metrics.csv").read_bytes()


def test_checkpoint_state_roundtrip(dataset, tmp_path):
    cfg = tiny_cfg(max_iter=3)
    state = run(cfg, dataset, out_dir=tmp_path / "r")
    back, cfg2 = load_state(tmp_path / "r" / "ckpt_final.mgck")
    assert dataclasses.asdict(cfg2) == dataclasses.asdict(cfg)
    assert back.iteration == 3
    for k in state.student.tensors:
        assert np.array_equal(back.student.tensors[k], state.student.tensors[k])
        assert np.array_equal(back.teacher.tensors[k], state.teacher.tensors[k])
        assert np.array_equal(back.momentum[k], state.momentum[k])
    assert np.array_equal(back.hist.counts, state.hist.counts)
    assert len(back.hist.window) == len(state.hist.window)


def test_resume_matches_uninterrupted(dataset, tmp_path):
    cfg = tiny_cfg(max_iter=8, checkpoint_interval=4)
    run(cfg, dataset, out_dir=tmp_path / "full")
    run(cfg, dataset, out_dir=tmp_path / "tail",
        resume=tmp_path / "full" / "ckpt_000004.mgck")
    full_rows = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
    tail_rows = (tmp_path / "tail" / "metrics.csv").read_text().splitlines()
    assert tail_rows[1:] == full_rows[5:]


def test_resume_rejects_config_mismatch(dataset, tmp_path):
    cfg = tiny_cfg(max_iter=4, checkpoint_interval=2)
    run(cfg, dataset, out_dir=tmp_path / "r")
    other = tiny_cfg(max_iter=4, checkpoint_interval=2, base_lr=0.123)
    with pytest.raises(ConfigError):
        run(other, dataset, out_dir=tmp_path / "r2",
            resume=tmp_path / "r" / "ckpt_000002.mgck")


def test_checkpoint_contains_config_echo(dataset, tmp_path):
    cfg = tiny_cfg(max_iter=1)
    state = init_state(cfg)
    batch = compose_batch(dataset, cfg, _stream(cfg, 101, 0))
    train_step(state, batch, cfg)
    save_state(tmp_path / "c.mgck", state, cfg)
    tensors = read_tensors(tmp_path / "c.mgck")
    assert "meta/config" in tensors and "hist/window" in tensors
    assert int(tensors["meta/iteration"][0]) == 1
