"""Patch cutting, farthest point sampling, nearest-key retrieval and database files."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitlab import patch_store
from exitlab.errors import ArgumentError, FormatError, NotFoundError, SchemaError, ShapeError
from exitlab.patch_store import (
    DbEntry,
    FeatureMap,
    PatchDatabase,
    PatchGrid,
    PoseExprKey,
    build_database,
    cut_into_patches,
    database_stats,
    fps_sample,
    glue_patches,
    pose_key_grid,
    pose_key_vector,
    query_nearest,
    query_pose,
    retrieve_guidance,
)


def _entries(keys, labels=None, value_shape=(1, 1, 1)):
    return [
        DbEntry(
            key=key,
            value=FeatureMap(np.full(value_shape, float(i), dtype=np.float32)),
            class_label=None if labels is None else int(labels[i]),
        )
        for i, key in enumerate(keys)
    ]


def _random_db(rng, n, dim, n_classes=None):
    keys = rng.standard_normal((n, dim)).astype(np.float32)
    labels = None if n_classes is None else rng.integers(0, n_classes, size=n)
    return PatchDatabase(entries=_entries(keys, labels), key_dim=dim)


def _brute_nearest(keys, query, candidates):
    best, best_d = None, np.inf
    for i in candidates:
        d = float(np.sum((keys[i].astype(np.float64) - query) ** 2))
        if d < best_d:
            best, best_d = i, d
    return best


# --- patches -----------------------------------------------------------------


def test_cut_small_map_row_major():
    fmap = FeatureMap(np.arange(4.0).reshape(1, 2, 2))
    patches = cut_into_patches(fmap, PatchGrid(2, 2))
    assert [float(p.data[0, 0, 0]) for p in patches] == [0.0, 1.0, 2.0, 3.0]
    assert all(p.shape == (1, 1, 1) for p in patches)


def test_single_cell_grid_is_identity():
    fmap = FeatureMap(np.random.default_rng(0).standard_normal((3, 4, 5)))
    (patch,) = cut_into_patches(fmap, PatchGrid(1, 1))
    np.testing.assert_array_equal(patch.data, fmap.data)
    np.testing.assert_array_equal(glue_patches([patch], PatchGrid(1, 1)).data, fmap.data)


def test_wide_map_on_eight_by_sixteen_grid(rng):
    fmap = FeatureMap(rng.standard_normal((512, 8, 16)).astype(np.float32))
    grid = PatchGrid(8, 16)
    patches = cut_into_patches(fmap, grid)
    assert len(patches) == 128
    assert patches[17].shape == (512, 1, 1)
    np.testing.assert_array_equal(patches[17].data[:, 0, 0], fmap.data[:, 1, 1])
    np.testing.assert_array_equal(glue_patches(patches, grid).data, fmap.data)


def test_patches_are_copies(rng):
    fmap = FeatureMap(rng.standard_normal((2, 4, 4)))
    patches = cut_into_patches(fmap, PatchGrid(2, 2))
    patches[0].data[...] = 99.0
    assert not np.any(fmap.data == 99.0)


@settings(max_examples=100, deadline=None)
@given(
    channels=st.integers(1, 4),
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    ph=st.integers(1, 3),
    pw=st.integers(1, 3),
    seed=st.integers(0, 2**16),
)
def test_glue_inverts_cut(channels, rows, cols, ph, pw, seed):
    data = np.random.default_rng(seed).standard_normal((channels, rows * ph, cols * pw))
    fmap = FeatureMap(data)
    grid = PatchGrid(rows, cols)
    glued = glue_patches(cut_into_patches(fmap, grid), grid)
    assert glued.data.tobytes() == fmap.data.tobytes()


def test_non_dividing_grid():
    with pytest.raises(ShapeError):
        cut_into_patches(FeatureMap(np.zeros((1, 5, 4))), PatchGrid(2, 2))


def test_glue_rejects_wrong_count_and_shapes():
    grid = PatchGrid(1, 2)
    with pytest.raises(ShapeError):
        glue_patches([FeatureMap(np.zeros((1, 1, 1)))], grid)
    with pytest.raises(ShapeError):
        glue_patches([FeatureMap(np.zeros((1, 1, 1))), FeatureMap(np.zeros((1, 1, 2)))], grid)


def test_feature_map_validation():
    with pytest.raises(ShapeError):
        FeatureMap(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        FeatureMap(np.array([[[np.nan]]]))
    with pytest.raises(ShapeError):
        FeatureMap.from_flat(2, 2, 2, [0.0] * 7)
    assert FeatureMap.from_flat(1, 2, 3, range(6)).shape == (1, 2, 3)


# --- farthest point sampling -------------------------------------------------


def test_fps_one_dimensional_examples():
    assert fps_sample(np.array([0.0, 1.0, 10.0]), 2) == [0, 2]
    assert fps_sample(np.array([0.0, 1.0, 10.0]), 3) == [0, 2, 1]


def test_fps_ties_resolve_to_lowest_index():
    keys = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    assert fps_sample(keys, 2) == [0, 1]
    duplicates = np.zeros((4, 3))
    assert fps_sample(duplicates, 4, start_index=2) == [2, 0, 1, 3]


def _replay_ok(points, selected):
    for step in range(1, len(selected)):
        chosen = selected[:step]
        best, best_gap = None, -1.0
        for i in range(len(points)):
            if i in chosen:
                continue
            gap = min(float(np.sum((points[i] - points[j]) ** 2)) for j in chosen)
            if gap > best_gap:
                best, best_gap = i, gap
        if selected[step] != best:
            return False
    return True


@pytest.mark.parametrize("seed", range(20))
def test_fps_matches_greedy_replay(seed):
    points = np.random.default_rng(seed).standard_normal((100, 4))
    selected = fps_sample(points, 10, start_index=seed % 100)
    assert selected[0] == seed % 100
    assert len(set(selected)) == 10
    assert _replay_ok(points, selected)


@settings(max_examples=50, deadline=None)
@given(
    points=st.lists(
        st.tuples(st.integers(-3, 3), st.integers(-3, 3)), min_size=1, max_size=10
    ),
    data=st.data(),
)
def test_fps_small_sets_match_exhaustive_replay(points, data):
    keys = np.asarray(points, dtype=np.float64)
    k = data.draw(st.integers(1, len(keys)))
    start = data.draw(st.integers(0, len(keys) - 1))
    selected = fps_sample(keys, k, start)
    assert selected[0] == start
    assert len(set(selected)) == k
    assert _replay_ok(keys, selected)


def test_fps_argument_errors():
    keys = np.zeros((3, 2))
    with pytest.raises(ArgumentError):
        fps_sample(keys, 4)
    with pytest.raises(ArgumentError):
        fps_sample(keys, 0)
    with pytest.raises(ArgumentError):
        fps_sample(keys, 2, start_index=3)


# --- database ----------------------------------------------------------------


def test_build_under_cap_keeps_everything(rng):
    entries = _entries(rng.standard_normal((10, 4)), labels=[0] * 10)
    db = build_database(entries, per_class_cap=10)
    assert len(db) == 10


def test_build_two_classes_keeps_fps_pairs():
    keys = np.array([[0.0], [1.0], [10.0], [5.0], [5.5], [-5.0]])
    entries = _entries(keys, labels=[0, 0, 0, 1, 1, 1])
    db = build_database(entries, per_class_cap=2)
    assert len(db) == 4
    kept = [float(e.key[0]) for e in db.entries]
    assert kept == [0.0, 10.0, 5.0, -5.0]
    assert db.class_index == {0: [0, 1], 1: [2, 3]}


def test_build_partition_is_exhaustive_and_disjoint(rng):
    keys = rng.standard_normal((1000, 8))
    labels = rng.integers(0, 5, size=1000)
    db = build_database(_entries(keys, labels), per_class_cap=100)
    members = sorted(i for bucket in db.class_index.values() for i in bucket)
    assert members == list(range(len(db)))
    for label, bucket in db.class_index.items():
        assert len(bucket) == min(100, int(np.sum(labels == label)))
        assert all(db.entries[i].class_label == label for i in bucket)


def test_build_rejects_mixed_key_dims():
    entries = _entries([np.zeros(3), np.zeros(4)])
    with pytest.raises(SchemaError):
        build_database(entries, per_class_cap=5)
    with pytest.raises(ArgumentError):
        build_database([], per_class_cap=5)


def test_database_rejects_partial_labels_and_bad_index():
    entries = _entries(np.zeros((2, 2)), labels=[1, 1])
    mixed = [entries[0], DbEntry(key=np.ones(2), value=entries[1].value)]
    with pytest.raises(SchemaError):
        PatchDatabase(entries=mixed, key_dim=2)
    with pytest.raises(SchemaError):
        PatchDatabase(entries=entries, key_dim=2, class_index={1: [0]})


def test_query_single_entry_and_exact_hit(rng):
    one = PatchDatabase(entries=_entries(np.ones((1, 3))), key_dim=3)
    assert query_nearest(one, [100.0, -4.0, 2.0]) is one.entries[0]
    db = _random_db(rng, 50, 6)
    assert query_nearest(db, db.entries[31].key) is db.entries[31]


def test_query_ties_pick_lowest_index():
    db = PatchDatabase(entries=_entries(np.array([[1.0], [-1.0], [1.0]])), key_dim=1)
    assert query_nearest(db, [0.0]) is db.entries[0]


def test_query_matches_brute_force(rng):
    db = _random_db(rng, 1000, 64, n_classes=4)
    keys = db.keys
    for _ in range(100):
        query = rng.standard_normal(64)
        label = int(rng.integers(0, 4))
        assert query_nearest(db, query) is db.entries[_brute_nearest(keys, query, range(len(db)))]
        expected = _brute_nearest(keys, query, db.class_index[label])
        assert query_nearest(db, query, label) is db.entries[expected]


def test_query_errors(rng):
    db = _random_db(rng, 10, 4, n_classes=2)
    with pytest.raises(SchemaError):
        query_nearest(db, np.zeros(5))
    with pytest.raises(NotFoundError):
        query_nearest(db, np.zeros(4), class_label=7)


def test_query_pose_angle_weight_zero():
    expressions = np.zeros((4, 5))
    expressions[2, 0] = 1.0
    keys = np.hstack([np.random.default_rng(2).standard_normal((4, 3)), expressions])
    db = PatchDatabase(entries=_entries(keys), key_dim=8)
    query = PoseExprKey(angles=[9.0, 9.0, 9.0], expression=expressions[2], angle_weight=0.0)
    assert query_pose(db, query) is db.entries[2]


def test_query_pose_matches_weighted_brute_force(rng):
    angles = np.linspace(-0.6, 0.6, 8)
    grid = pose_key_grid(angles, angles[:6], angles[:4], rng.standard_normal((5, 16)))
    assert grid.shape == (960, 19)
    db = PatchDatabase(entries=_entries(grid.astype(np.float32)), key_dim=19)
    stored = db.keys.astype(np.float64)
    for _ in range(50):
        key = PoseExprKey(angles=rng.uniform(-0.7, 0.7, 3), expression=rng.standard_normal(16), angle_weight=2.5)
        costs = 2.5 * np.sum((stored[:, :3] - key.angles) ** 2, axis=1) + np.sum(
            (stored[:, 3:] - key.expression) ** 2, axis=1
        )
        assert query_pose(db, key) is db.entries[int(np.argmin(costs))]
    exact = PoseExprKey(angles=grid[77, :3], expression=grid[77, 3:])
    np.testing.assert_allclose(pose_key_vector(exact), grid[77])


def test_query_pose_layout_mismatch(rng):
    db = _random_db(rng, 5, 10)
    with pytest.raises(SchemaError):
        query_pose(db, PoseExprKey(angles=[0, 0, 0], expression=np.zeros(4)))
    with pytest.raises(SchemaError):
        PoseExprKey(angles=[0, 0], expression=np.zeros(4))


def test_retrieve_guidance_rebuilds_stored_map(rng):
    grid = PatchGrid(2, 4)
    keys_map = FeatureMap(rng.standard_normal((3, 4, 8)).astype(np.float32))
    values_map = FeatureMap(rng.standard_normal((5, 2, 4)).astype(np.float32))
    entries = [
        DbEntry(key=k.flat(), value=v)
        for k, v in zip(cut_into_patches(keys_map, grid), cut_into_patches(values_map, grid))
    ]
    db = PatchDatabase(entries=entries, key_dim=3 * 2 * 2)
    guidance = retrieve_guidance(db, keys_map, grid)
    np.testing.assert_array_equal(guidance.data, values_map.data)


def test_database_stats():
    db = PatchDatabase(entries=_entries(np.zeros((3, 4)), labels=[0, 0, 1]), key_dim=4)
    stats = database_stats(db)
    assert stats["entries"] == 3
    assert stats["classes"] == {"0": 2, "1": 1}
    assert stats["stored_floats"] == 3 * (4 + 1)
    assert stats["bytes"] == len(patch_store.save(db))


# --- persistence -------------------------------------------------------------


def _assert_same_db(a, b):
    assert a.key_dim == b.key_dim
    assert a.class_index == b.class_index
    assert len(a) == len(b)
    for x, y in zip(a.entries, b.entries):
        assert x.key.tobytes() == y.key.tobytes()
        assert x.value.data.tobytes() == y.value.data.tobytes()
        assert x.class_label == y.class_label


def test_empty_database_roundtrip():
    db = PatchDatabase(entries=[], key_dim=4)
    _assert_same_db(patch_store.load(patch_store.save(db)), db)


def test_large_database_roundtrip(rng):
    keys = rng.standard_normal((1000, 16))
    db = PatchDatabase(entries=_entries(keys, rng.integers(0, 9, 1000), value_shape=(2, 1, 3)), key_dim=16)
    _assert_same_db(patch_store.load(patch_store.save(db)), db)


def test_file_roundtrip(tmp_path, rng):
    db = _random_db(rng, 20, 5)
    path = patch_store.save_file(db, tmp_path / "guide.fncdb")
    _assert_same_db(patch_store.load_file(path), db)


def test_corrupted_streams_are_rejected(rng):
    blob = patch_store.save(_random_db(rng, 5, 3, n_classes=2))
    with pytest.raises(FormatError) as info:
        patch_store.load(b"XXXXXX" + blob[6:])
    assert info.value.offset == 0
    with pytest.raises(FormatError):
        patch_store.load(blob[:-9])
    flipped = bytearray(blob)
    flipped[10] ^= 0xFF
    with pytest.raises(FormatError):
        patch_store.load(bytes(flipped))
    with pytest.raises(FormatError):
        patch_store.load(blob[:4])
