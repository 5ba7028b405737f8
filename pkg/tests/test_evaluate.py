import csv

import numpy as np
import pytest

import cubeseg.evaluate as ev
from cubeseg.errors import ConfigError, DimensionError
from cubeseg.evaluate import (EvalConfig, MetricsTable, dsc, emit_plot_data,
                              evaluate, nsd, sliding_window_infer,
                              surface_voxels, table_to_csv)
from cubeseg.model import ModelConfig, forward_seg, init_params
from cubeseg.volume import LabelMap, Volume, normalize, softmax_channels_array


def lab(arr, c=1):
    return LabelMap(np.asarray(arr, np.uint8), c)


# ----- independent oracles -----

def dsc_oracle(a_mask, b_mask):
    a = {tuple(i) for i in np.argwhere(a_mask)}
    b = {tuple(i) for i in np.argwhere(b_mask)}
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return 2 * len(a & b) / (len(a) + len(b))


def surface_oracle(mask):
    pts = set()
    dims = mask.shape
    for idx in np.argwhere(mask):
        x, y, z = idx
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                           (0, 0, 1), (0, 0, -1)):
            nx, ny, nz = x + dx, y + dy, z + dz
            if not (0 <= nx < dims[0] and 0 <= ny < dims[1] and 0 <= nz < dims[2]) \
                    or not mask[nx, ny, nz]:
                pts.add((x, y, z))
                break
    return pts


def nsd_oracle(a_mask, b_mask, tau):
    if not a_mask.any() and not b_mask.any():
        return 1.0
    if not a_mask.any() or not b_mask.any():
        return 0.0
    sa = surface_oracle(a_mask)
    sb = surface_oracle(b_mask)

    def near(src, dst):
        n = 0
        for p in src:
            best = min((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2
                       + (p[2] - q[2]) ** 2 for q in dst)
            if best <= tau * tau + 1e-9:
                n += 1
        return n

    return (near(sa, sb) + near(sb, sa)) / (len(sa) + len(sb))


def test_dsc_conventions():
    a = np.zeros((4, 4, 4), np.uint8)
    a[:2, :2, :2] = 1
    assert dsc(lab(a), lab(a), 1) == 1.0
    empty = lab(np.zeros((4, 4, 4)))
    assert dsc(empty, empty, 1) == 1.0
    assert dsc(lab(a), empty, 1) == 0.0
    assert dsc(empty, lab(a), 1) == 0.0


def test_dsc_half_overlap_hand_case():
    a = np.zeros((4, 4, 4), np.uint8)
    b = np.zeros((4, 4, 4), np.uint8)
    a[0:2, 0:2, 0:2] = 1          # 8 voxels
    b[1:3, 0:2, 0:2] = 1          # 8 voxels, 4 shared
    assert dsc(lab(a), lab(b), 1) == 0.5


def test_dsc_is_symmetric_and_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(25):
        a = rng.random((5, 5, 5)) < 0.3
        b = rng.random((5, 5, 5)) < 0.3
        got = dsc(lab(a), lab(b), 1)
        assert got == dsc(lab(b), lab(a), 1)
        assert abs(got - dsc_oracle(a, b)) < 1e-12


def test_dsc_rejects_dim_mismatch():
    with pytest.raises(DimensionError):
        dsc(lab(np.zeros((4, 4, 4))), lab(np.zeros((3, 3, 3))), 1)


def test_dsc_nested_mask_monotonicity():
    a = np.zeros((6, 6, 6), np.uint8)
    b = np.zeros((6, 6, 6), np.uint8)
    c = np.zeros((6, 6, 6), np.uint8)
    a[2:4, 2:4, 2:4] = 1
    b[1:5, 2:4, 2:4] = 1
    c[1:5, 1:5, 2:4] = 1
    assert dsc(lab(a), lab(b), 1) >= dsc(lab(a), lab(c), 1)


def test_nsd_identical_masks():
    a = np.zeros((5, 5, 5), np.uint8)
    a[1:4, 1:4, 1:4] = 1
    assert nsd(lab(a), lab(a), 1, 1.0) == 1.0


def test_nsd_far_single_voxels_zero():
    a = np.zeros((6, 6, 6), np.uint8)
    b = np.zeros((6, 6, 6), np.uint8)
    a[0, 0, 0] = 1
    b[5, 5, 5] = 1
    assert nsd(lab(a), lab(b), 1, 1.0) == 0.0


def test_nsd_shifted_cube_matches_surface_oracle():
    a = np.zeros((6, 6, 6), bool)
    b = np.zeros((6, 6, 6), bool)
    a[1:4, 1:4, 1:4] = True
    b[2:5, 1:4, 1:4] = True
    got = nsd(lab(a), lab(b), 1, 1.0)
    want = nsd_oracle(a, b, 1.0)
    assert abs(got - want) < 1e-12


def test_nsd_random_masks_match_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.random((5, 5, 5)) < 0.25
        b = rng.random((5, 5, 5)) < 0.25
        for tau in (0.0, 1.0, 1.5):
            got = nsd(lab(a), lab(b), 1, tau)
            assert abs(got - nsd_oracle(a, b, tau)) < 1e-12


def test_surface_voxels_of_solid_block():
    m = np.zeros((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = True
    surf = surface_voxels(m)
    assert surf.sum() == 26  # 27-voxel cube minus its single interior voxel
    assert surface_voxels(np.ones((3, 3, 3), bool)).sum() == 26


def _trained_like_params(seed=0):
    cfg = ModelConfig(num_classes=2, n_locations=8, base_width=2, depth=2)
    return init_params(cfg, np.random.default_rng(seed))


def test_sliding_window_degenerate_equals_single_forward():
    params = _trained_like_params()
    v = Volume(np.random.default_rng(2).standard_normal((8, 8, 8)).astype(np.float32))
    got = sliding_window_infer(params, v, (8, 8, 8), (4, 4, 4))
    logits, _ = forward_seg(params, v)
    want = softmax_channels_array(logits.data)
    assert np.allclose(got.data, want, atol=1e-6)


def test_sliding_window_matches_bruteforce_accumulation():
    params = _trained_like_params(3)
    v = Volume(np.random.default_rng(4).standard_normal((12, 12, 12)).astype(np.float32))
    win, stride = (8, 8, 8), (4, 4, 4)
    got = sliding_window_infer(params, v, win, stride)
    acc = np.zeros((3, 12, 12, 12))
    cov = np.zeros((12, 12, 12))
    starts = [0, 4]
    for ox in starts:
        for oy in starts:
            for oz in starts:
                sub = Volume(v.data[ox:ox + 8, oy:oy + 8, oz:oz + 8].copy())
                logits, _ = forward_seg(params, sub)
                acc[:, ox:ox + 8, oy:oy + 8, oz:oz + 8] += \
                    softmax_channels_array(logits.data)
                cov[ox:ox + 8, oy:oy + 8, oz:oz + 8] += 1
    assert np.allclose(got.data, acc / cov, atol=1e-6)


def test_sliding_window_clamps_last_window():
    params = _trained_like_params(5)
    v = Volume(np.random.default_rng(6).standard_normal((12, 12, 12)).astype(np.float32))
    got = sliding_window_infer(params, v, (8, 8, 8), (5, 5, 5))
    assert got.data.shape == (3, 12, 12, 12)
    assert np.allclose(got.data.sum(axis=0), 1.0, atol=1e-5)


def test_sliding_window_constant_net_uniform_everywhere():
    params = _trained_like_params(7)
    for k in params.tensors:
        params.tensors[k] = np.zeros_like(params.tensors[k])
    v = Volume(np.random.default_rng(8).standard_normal((12, 12, 12)).astype(np.float32))
    got = sliding_window_infer(params, v, (8, 8, 8), (4, 4, 4))
    assert np.allclose(got.data, 1 / 3, atol=1e-6)


def test_sliding_window_rejects_oversized_window():
    params = _trained_like_params(9)
    v = Volume(np.zeros((8, 8, 8), np.float32))
    with pytest.raises(DimensionError):
        sliding_window_infer(params, v, (12, 12, 12), (4, 4, 4))


def test_evaluate_with_perfect_oracle_network(monkeypatch):
    cfg = ModelConfig(num_classes=2, n_locations=8, base_width=2, depth=2)
    params = init_params(cfg, np.random.default_rng(10))
    rng = np.random.default_rng(11)
    gt = np.zeros((8, 8, 8), np.uint8)
    gt[2:5, 2:5, 2:5] = 1
    gt[5:7, 5:7, 5:7] = 2
    vol = Volume(rng.standard_normal((8, 8, 8)).astype(np.float32))

    def fake_forward(mcfg, tensors, x, need_cache=False):
        b = x.shape[0]
        logits = np.full((b, 3) + x.shape[2:], -50.0, np.float32)
        for i in range(b):
            for c in range(3):
                logits[i, c][gt == c] = 50.0
        return logits, None, None

    monkeypatch.setattr(ev, "net_forward", fake_forward)
    table = evaluate(params, [(0, vol, lab(gt, 2))],
                     EvalConfig(window=(8, 8, 8), stride=(8, 8, 8)))
    assert table.avg_dsc == 100.0
    assert table.avg_nsd == 100.0
    assert np.array_equal(table.case_dsc, [[100.0, 100.0]])


def test_evaluate_aggregation_identity_and_zero_std():
    params = _trained_like_params(12)
    rng = np.random.default_rng(13)
    vol = Volume(rng.standard_normal((8, 8, 8)).astype(np.float32))
    gt = lab((rng.random((8, 8, 8)) < 0.2).astype(np.uint8), 2)
    cfgE = EvalConfig(window=(8, 8, 8), stride=(8, 8, 8))
    one = evaluate(params, [(0, vol, gt)], cfgE)
    two = evaluate(params, [(0, vol, gt), (1, vol, gt)], cfgE)
    assert np.allclose(one.dsc_mean, two.dsc_mean)
    assert np.allclose(two.dsc_std, 0.0)
    pred = ev.predict_labels(params, vol, cfgE)
    direct = [100 * dsc(pred, gt, c) for c in (1, 2)]
    assert np.allclose(one.case_dsc[0], direct)


def test_evaluate_requires_cases():
    params = _trained_like_params(14)
    with pytest.raises(ConfigError):
        evaluate(params, [], EvalConfig())


def test_metrics_table_averages_are_class_means():
    t = MetricsTable([1, 2], [0, 1], np.array([[80.0, 60.0], [90.0, 70.0]]),
                     np.array([[50.0, 40.0], [60.0, 30.0]]))
    assert abs(t.avg_dsc - np.mean([85.0, 65.0])) < 1e-9
    assert abs(t.avg_nsd - np.mean([55.0, 35.0])) < 1e-9


def test_emit_plot_data_round_trip(tmp_path):
    t = MetricsTable([1, 2], [7, 9], np.array([[80.0, 60.0], [90.0, 70.0]]),
                     np.array([[50.0, 40.0], [60.0, 30.0]]), {"tag": "runA"})
    path = tmp_path / "plot.csv"
    emit_plot_data([t], path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 4
    got = {(r["case"], r["class"]): float(r["dsc"]) for r in rows}
    assert got[("7", "1")] == 80.0
    assert got[("9", "2")] == 70.0
    emit_plot_data([], tmp_path / "empty.csv")
    assert open(tmp_path / "empty.csv").read().strip() == "table,case,class,dsc,nsd"


def test_table_to_csv_layout(tmp_path):
    t = MetricsTable([1, 2], [0], np.array([[80.0, 60.0]]),
                     np.array([[50.0, 40.0]]))
    path = tmp_path / "table.csv"
    table_to_csv(t, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["metric", "class_1", "class_2", "avg_dsc", "avg_nsd"]
    assert rows[1][0] == "dsc_mean" and float(rows[1][3]) == 70.0
