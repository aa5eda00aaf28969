"""Dataset indexing, splitting, and episodic sampling contracts."""

import numpy as np
import pytest

from conceptmix.container import write_container
from conceptmix.episodes import (IMAGE_DIRECTORY, PRECOMPUTED, SYNTHETIC,
                                 SyntheticSpec, load_dataset,
                                 materialize_inputs, materialize_taps,
                                 sample_episode, split_base_novel)


def synthetic_index(num_classes=20, per_class=30, **kw):
    return load_dataset(SyntheticSpec(num_classes, per_class, **kw), SYNTHETIC)


# -- loading ------------------------------------------------------------------


def test_synthetic_counts():
    index = synthetic_index(20, 30)
    assert len(index.items) == 600
    assert index.num_classes == 20
    assert index.classes == sorted(index.classes)


def test_synthetic_features_deterministic():
    spec = SyntheticSpec(4, 5, seed=11)
    a = spec.sample_features(2, 3)
    b = spec.sample_features(2, 3)
    assert a.dtype == np.float32 and a.shape == (16, 32)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, spec.sample_features(2, 4))


def test_synthetic_margin_controls_separability():
    near = SyntheticSpec(2, 1, class_margin=0.5, noise_sigma=1.0, seed=3)
    far = SyntheticSpec(2, 1, class_margin=8.0, noise_sigma=1.0, seed=3)

    def gap(spec):
        a = spec.sample_features(0, 0).mean(axis=0)
        b = spec.sample_features(1, 0).mean(axis=0)
        return np.linalg.norm(a - b)

    assert gap(far) > gap(near)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(2, 3, class_margin=-0.5)
    with pytest.raises(ValueError):
        SyntheticSpec(2, 3, noise_sigma=-1.0)
    with pytest.raises(ValueError):
        SyntheticSpec(0, 3)
    # margin 0 is legal: a signal-free dataset for chance-level baselines
    SyntheticSpec(2, 3, class_margin=0.0)


def test_image_directory_counts(tmp_path):
    from PIL import Image

    rng = np.random.default_rng(0)
    for label in ("cats", "dogs"):
        (tmp_path / label).mkdir()
        for i in range(3):
            px = rng.integers(0, 256, size=(12, 12), dtype=np.uint8)
            Image.fromarray(px, mode="L").save(tmp_path / label / f"{i}.png")
    index = load_dataset(tmp_path, IMAGE_DIRECTORY, patch_grid=(4, 4), patch_size=4)
    assert len(index.items) == 6
    assert index.classes == ["cats", "dogs"]
    feats = materialize_inputs(index, np.arange(6))
    assert feats.shape == (6, 16, 16)
    assert feats.min() >= 0.0 and feats.max() <= 1.0


def test_image_directory_missing_root():
    with pytest.raises(FileNotFoundError):
        load_dataset("/nonexistent/path", IMAGE_DIRECTORY)


def _write_precomputed(path, dims, grid=(2, 2)):
    r = grid[0] * grid[1]
    arrays, labels = {}, {}
    for si, (sid, d) in enumerate(dims.items()):
        labels[sid] = "a" if si % 2 == 0 else "b"
        for tap in ("low", "mid", "high", "out"):
            arrays[f"{sid}:{tap}"] = np.full((r, d), si, dtype=np.float32)
    write_container(path, arrays, metadata={"labels": labels, "patch_grid": list(grid)})


def test_precomputed_roundtrip(tmp_path):
    _write_precomputed(tmp_path / "c", {"s0": 8, "s1": 8, "s2": 8, "s3": 8})
    index = load_dataset(tmp_path / "c", PRECOMPUTED)
    assert index.input_dim == 8 and index.patch_grid == (2, 2)
    assert index.classes == ["a", "b"]
    taps = materialize_taps(index, np.array([0, 2]))
    assert set(taps) == {"low", "mid", "high", "out"}
    assert taps["low"].shape == (2, 4, 8)
    with pytest.raises(ValueError, match="features, not inputs"):
        materialize_inputs(index, np.array([0]))


def test_precomputed_inconsistent_dim_rejected(tmp_path):
    _write_precomputed(tmp_path / "c", {"s0": 8, "s1": 16})
    with pytest.raises(ValueError, match="inconsistent feature dim"):
        load_dataset(tmp_path / "c", PRECOMPUTED)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown dataset kind"):
        load_dataset(".", "mystery")


# -- base/novel split -----------------------------------------------------------


def test_split_20_classes_quarter_novel():
    index = synthetic_index(20, 5)
    base, novel = split_base_novel(index, 0.25, seed=7)
    assert base.num_classes == 15 and novel.num_classes == 5
    assert not set(base.classes) & set(novel.classes)
    assert sorted(base.classes + novel.classes) == index.classes


def test_split_deterministic():
    index = synthetic_index(12, 4)
    first = split_base_novel(index, 0.3, seed=9)
    second = split_base_novel(index, 0.3, seed=9)
    assert first[0].classes == second[0].classes
    assert first[1].classes == second[1].classes


def test_split_partition_property_over_seeds():
    index = synthetic_index(10, 3)
    for seed in range(100):
        base, novel = split_base_novel(index, 0.3, seed=seed)
        assert sorted(base.classes + novel.classes) == index.classes
        assert not set(base.classes) & set(novel.classes)


def test_split_single_class_rejected():
    index = synthetic_index(1, 5)
    with pytest.raises(ValueError, match="at least 2"):
        split_base_novel(index, 0.5, seed=0)


def test_split_empty_side_rejected():
    index = synthetic_index(3, 5)
    with pytest.raises(ValueError, match="empty"):
        split_base_novel(index, 0.01, seed=0)


# -- episode sampling ----------------------------------------------------------------


def test_episode_5way_1shot_15query():
    index = synthetic_index(20, 30)
    ep = sample_episode(index, n_way=5, k_shot=1, q_queries=15, seed=42)
    assert ep.support.shape == (5, 1) and ep.query.shape == (5, 15)
    assert not set(ep.support.ravel()) & set(ep.query.ravel())
    assert len(ep.class_labels) == 5


def test_episode_5way_5shot_support_count():
    index = synthetic_index(20, 30)
    ep = sample_episode(index, n_way=5, k_shot=5, q_queries=15, seed=1)
    assert ep.support.size == 25
    assert all((ep.support[i] >= 0).all() for i in range(5))


def test_episode_per_class_counts_exact():
    index = synthetic_index(8, 10)
    ep = sample_episode(index, n_way=4, k_shot=3, q_queries=2, seed=5)
    for row in range(4):
        label = ep.class_labels[row]
        pool = set(index.class_items(label))
        assert set(ep.support[row]) <= pool and set(ep.query[row]) <= pool


def test_episode_deterministic():
    index = synthetic_index(15, 20)
    a = sample_episode(index, 5, 2, 4, seed=123)
    b = sample_episode(index, 5, 2, 4, seed=123)
    assert np.array_equal(a.support, b.support)
    assert np.array_equal(a.query, b.query)
    assert a.class_labels == b.class_labels
    c = sample_episode(index, 5, 2, 4, seed=124)
    assert not (np.array_equal(a.support, c.support)
                and a.class_labels == c.class_labels)


def test_episode_too_many_ways_rejected():
    index = synthetic_index(20, 30)
    with pytest.raises(ValueError, match="20 classes"):
        sample_episode(index, n_way=25, k_shot=1, q_queries=1, seed=0)


def test_episode_insufficient_items_rejected():
    index = synthetic_index(5, 4)
    with pytest.raises(ValueError, match="need 6"):
        sample_episode(index, n_way=3, k_shot=4, q_queries=2, seed=0)


def test_materialize_inputs_shapes_follow_indices():
    index = synthetic_index(6, 8, patch_grid=(3, 3), feature_dim=10)
    ep = sample_episode(index, 3, 2, 2, seed=7)
    sup = materialize_inputs(index, ep.support)
    assert sup.shape == (3, 2, 9, 10) and sup.dtype == np.float32
    flat = materialize_inputs(index, ep.support.ravel())
    assert np.array_equal(flat.reshape(sup.shape), sup)
