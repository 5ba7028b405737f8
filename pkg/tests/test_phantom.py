import numpy as np
import pytest

from cubeseg.errors import ConfigError
from cubeseg.phantom import (Dataset, OrganSpec, PhantomSpec,
                             class_frequency_profile, default_phantom_spec,
                             generate_case, load_dataset, make_dataset,
                             save_dataset)


def single_organ_spec():
    return PhantomSpec(
        dims=(16, 16, 16),
        organs=(OrganSpec(1, (0.5, 0.5, 0.5), 3.0, 0.0, 1.0, 0.0),),
        global_shift_jitter=0.0, organ_shift_jitter=0.0,
        noise_std=0.0, gradient=(0.0, 0.0, 0.0), seed=0)


def test_single_organ_matches_rasterization_recount():
    spec = single_organ_spec()
    vol, lab = generate_case(spec, np.random.default_rng(0))
    count = 0
    for x in range(16):
        for y in range(16):
            for z in range(16):
                if ((x + 0.5 - 8) / 3) ** 2 + ((y + 0.5 - 8) / 3) ** 2 \
                        + ((z + 0.5 - 8) / 3) ** 2 <= 1.0:
                    count += 1
                    assert lab.data[x, y, z] == 1
    assert int((lab.data == 1).sum()) == count
    assert count > 0


def test_generation_is_seed_deterministic():
    spec = default_phantom_spec(seed=1)
    a = generate_case(spec, np.random.default_rng(11))
    b = generate_case(spec, np.random.default_rng(11))
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


def centroid(mask):
    idx = np.argwhere(mask)
    return idx.mean(axis=0)


def test_relative_location_prior_far_separated_pairs():
    spec = default_phantom_spec(seed=2)
    jitter = spec.global_shift_jitter + spec.organ_shift_jitter
    organs = {o.class_id: o for o in spec.organs}
    for trial in range(100):
        _, lab = generate_case(spec, np.random.default_rng(1000 + trial))
        cents = {}
        for cid in organs:
            mask = lab.data == cid
            if mask.any():
                cents[cid] = centroid(mask)
        for a in organs.values():
            for b in organs.values():
                if a.class_id >= b.class_id:
                    continue
                if a.class_id not in cents or b.class_id not in cents:
                    continue
                for ax in range(3):
                    gap = (b.center[ax] - a.center[ax]) * spec.dims[ax]
                    if abs(gap) > 2 * jitter + 2:
                        got = cents[b.class_id][ax] - cents[a.class_id][ax]
                        assert np.sign(got) == np.sign(gap), \
                            f"organs {a.class_id},{b.class_id} swapped on axis {ax}"


def test_organ_intensity_separated_from_background():
    spec = default_phantom_spec(seed=3)
    vol, lab = generate_case(spec, np.random.default_rng(5))
    bg_mean = vol.data[lab.data == 0].mean()
    for organ in spec.organs:
        mask = lab.data == organ.class_id
        if mask.any():
            organ_mean = vol.data[mask].mean()
            assert organ_mean - bg_mean >= 3 * spec.noise_std


def test_make_dataset_split_arithmetic():
    spec = default_phantom_spec(seed=4)
    ds = make_dataset(spec, 40, 0.1, np.random.default_rng(4))
    assert len(ds.labeled) == 4
    assert len(ds.unlabeled) == 36
    assert set(ds.labeled_ids).isdisjoint(ds.unlabeled_ids)
    assert sorted(ds.labeled_ids + ds.unlabeled_ids) == list(range(40))
    assert set(ds.eval_truth) == set(ds.unlabeled_ids)


def test_make_dataset_full_fraction_all_labeled():
    spec = default_phantom_spec(seed=5)
    ds = make_dataset(spec, 6, 1.0, np.random.default_rng(5))
    assert len(ds.labeled) == 6 and not ds.unlabeled


def test_make_dataset_different_seeds_differ():
    spec = default_phantom_spec(seed=6)
    a = make_dataset(spec, 20, 0.2, np.random.default_rng(1))
    b = make_dataset(spec, 20, 0.2, np.random.default_rng(2))
    assert len(a.labeled_ids) == len(b.labeled_ids) == 4
    assert a.labeled_ids != b.labeled_ids or not np.array_equal(
        a.labeled[0][0].data, b.labeled[0][0].data)


def test_make_dataset_validation():
    spec = default_phantom_spec(seed=7)
    with pytest.raises(ConfigError):
        make_dataset(spec, 0, 0.5, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        make_dataset(spec, 5, 0.0, np.random.default_rng(0))


def test_frequency_profile_has_head_and_tail():
    spec = default_phantom_spec(seed=8)
    ds = make_dataset(spec, 10, 1.0, np.random.default_rng(8))
    freq = class_frequency_profile(ds)
    assert len(freq) == 5
    assert freq.max() / max(freq.min(), 1) >= 10
    assert freq.sum() <= 10 * 24 ** 3


def test_frequency_profile_single_organ():
    ds = make_dataset(single_organ_spec(), 2, 1.0, np.random.default_rng(9))
    freq = class_frequency_profile(ds)
    assert freq.shape == (1,)


def test_frequency_profile_requires_labels():
    ds = Dataset(single_organ_spec(), [], [], [], [], 0.5, 0)
    with pytest.raises(ConfigError):
        class_frequency_profile(ds)


def test_spec_validation_rejects_out_of_bounds_organ():
    with pytest.raises(ConfigError):
        PhantomSpec(dims=(16, 16, 16),
                    organs=(OrganSpec(1, (0.1, 0.5, 0.5), 5.0, 0.0, 1.0, 0.0),),
                    global_shift_jitter=0.0, organ_shift_jitter=0.0,
                    noise_std=0.0)


def test_spec_validation_rejects_bad_class_ids():
    o1 = OrganSpec(1, (0.4, 0.5, 0.5), 2.0, 0.0, 1.0, 0.0)
    o3 = OrganSpec(3, (0.6, 0.5, 0.5), 2.0, 0.0, 1.0, 0.0)
    with pytest.raises(ConfigError):
        PhantomSpec(dims=(16, 16, 16), organs=(o1, o3))


def test_overlap_resolution_first_listed_wins():
    o1 = OrganSpec(1, (0.45, 0.5, 0.5), 3.0, 0.0, 1.0, 0.0)
    o2 = OrganSpec(2, (0.55, 0.5, 0.5), 3.0, 0.0, 2.0, 0.0)
    spec = PhantomSpec(dims=(20, 20, 20), organs=(o1, o2),
                       global_shift_jitter=0.0, organ_shift_jitter=0.0,
                       noise_std=0.0, gradient=(0, 0, 0))
    _, lab = generate_case(spec, np.random.default_rng(0))
    # overlapping voxels keep organ 1; organ 2 still appears outside the overlap
    c1 = np.array([0.45 * 20, 10, 10])
    overlap = lab.data[int(c1[0]) + 1, 10, 10]
    assert overlap == 1
    assert (lab.data == 2).any()


def test_dataset_round_trip(tmp_path):
    spec = default_phantom_spec(seed=10)
    ds = make_dataset(spec, 8, 0.25, np.random.default_rng(10))
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d", with_truth=True)
    assert back.labeled_ids == ds.labeled_ids
    assert back.num_classes == ds.num_classes
    for (v1, l1), (v2, l2) in zip(ds.labeled, back.labeled):
        assert np.array_equal(v1.data, v2.data)
        assert np.array_equal(l1.data, l2.data)
    for i in ds.unlabeled_ids:
        assert np.array_equal(ds.eval_truth[i].data, back.eval_truth[i].data)


def test_unlabeled_truth_is_structurally_separate(tmp_path):
    spec = default_phantom_spec(seed=11)
    ds = make_dataset(spec, 6, 0.34, np.random.default_rng(11))
    save_dataset(ds, tmp_path / "d")
    # removing the sidecar leaves training inputs fully readable
    import shutil
    shutil.rmtree(tmp_path / "d" / "eval_truth")
    back = load_dataset(tmp_path / "d")
    assert len(back.labeled) == len(ds.labeled)
    assert len(back.unlabeled) == len(ds.unlabeled)
    assert not back.eval_truth
