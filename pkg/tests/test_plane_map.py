"""Voxel plane map: statistics, classification, octree, dynamic removal.

The incremental path is checked against batch recomputation over the
union of all inserted points (the oracle is numpy mean/cov on the
concatenated array, computed independently of the merge code).
"""

import numpy as np
import pytest

from planevio.plane_map import (
    ACCUMULATING,
    KEPT_INITIAL,
    NONPLANAR,
    OUTCOME_REMOVED,
    PLANAR,
    SUBDIVIDED,
    UPDATED,
    PlaneMapConfig,
    PlaneStats,
    VoxelPlaneMap,
    batch_stats,
    is_planar,
    merge_stats,
    update_plane,
    voxel_key,
)


def plane_points(rng, n, z=0.0, jitter=0.0, box=(0.05, 0.95)):
    """n points on the z=const plane inside the unit voxel."""
    pts = np.empty((n, 3))
    pts[:, 0] = rng.uniform(*box, size=n)
    pts[:, 1] = rng.uniform(*box, size=n)
    pts[:, 2] = z + (jitter * rng.standard_normal(n) if jitter else 0.0)
    return pts


class TestStats:
    def test_square_corners_hand_values(self):
        # corners of the 2x2 square in z=0 plus its center:
        # mean (1,1,0); scatter diag(4,4,0) -> cov diag(0.8,0.8,0)
        pts = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [2, 2, 0], [1, 1, 0]], dtype=float)
        s = batch_stats(pts)
        np.testing.assert_allclose(s.mean, [1.0, 1.0, 0.0], atol=1e-14)
        np.testing.assert_allclose(np.sort(np.diag(s.cov)), [0.0, 0.8, 0.8], atol=1e-14)
        assert s.lambda_min == pytest.approx(0.0, abs=1e-14)
        np.testing.assert_allclose(s.normal, [0.0, 0.0, 1.0], atol=1e-12)

    def test_eigenvalues_ascending(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            s = batch_stats(rng.normal(size=(50, 3)) * [3.0, 1.0, 0.2])
            assert s.eigenvalues[0] <= s.eigenvalues[1] <= s.eigenvalues[2]

    def test_normal_sign_convention(self):
        rng = np.random.default_rng(11)
        # horizontal plane -> nz = +1
        s = batch_stats(plane_points(rng, 40))
        assert s.normal[2] > 0
        # vertical plane x=0 -> nz = 0, ny = 0, nx must be +1
        pts = np.zeros((40, 3))
        pts[:, 1] = rng.uniform(0, 1, 40)
        pts[:, 2] = rng.uniform(0, 1, 40)
        s = batch_stats(pts)
        np.testing.assert_allclose(np.abs(s.normal), [1.0, 0.0, 0.0], atol=1e-12)
        assert s.normal[0] > 0

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            batch_stats(np.zeros((2, 3)))

    def test_merge_equals_batch(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            n = rng.integers(10, 300)
            pts = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10.0)
            cut = rng.integers(3, n - 3)
            merged = merge_stats(batch_stats(pts[:cut]), batch_stats(pts[cut:]))
            whole = batch_stats(pts)
            np.testing.assert_allclose(merged.mean, whole.mean, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(merged.cov, whole.cov, rtol=1e-9, atol=1e-12)

    def test_classification_strictly_below_threshold(self):
        rng = np.random.default_rng(13)
        s = batch_stats(plane_points(rng, 30, jitter=0.02))
        # threshold exactly at lambda_min: strict < must reject
        assert not is_planar(s, PlaneMapConfig(eig_threshold=s.lambda_min))
        assert is_planar(s, PlaneMapConfig(eig_threshold=s.lambda_min * (1 + 1e-9)))


class TestVoxelKey:
    def test_floor_semantics(self):
        assert voxel_key(np.array([-0.2, 0.5, 1.9]), 1.0) == (-1, 0, 1)
        assert voxel_key(np.array([0.0, 0.0, 0.0]), 1.0) == (0, 0, 0)
        assert voxel_key(np.array([2.5, -3.5, 0.1]), 0.5) == (5, -7, 0)


def planar_cell(rng, n=30, z=0.35, jitter=0.001):
    """A map with one established planar voxel at key (0,0,0)."""
    m = VoxelPlaneMap(PlaneMapConfig())
    pts = plane_points(rng, n, z=z, jitter=jitter)
    m.insert_scan(pts)
    cell = m.cells[(0, 0, 0)]
    assert cell.state == PLANAR
    return m, cell, pts


class TestUpdate:
    def test_coplanar_update_commits_pooled_stats(self):
        rng = np.random.default_rng(14)
        m, cell, first = planar_cell(rng)
        extra = plane_points(rng, 12, z=0.35, jitter=0.001)
        outcome = update_plane(cell, extra, m.cfg)
        assert outcome == UPDATED
        whole = batch_stats(np.vstack([first, extra]))  # oracle over the union
        np.testing.assert_allclose(cell.stats.mean, whole.mean, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(cell.stats.cov, whole.cov, rtol=1e-9, atol=1e-12)

    def test_small_shift_bad_eigenvalue_keeps_initial(self):
        # 10 points offset 0.25 m against 30 base points: pooled mean moves
        # 0.0625 m (< 0.1) but pooled z-variance rises past 0.01
        rng = np.random.default_rng(15)
        m, cell, _ = planar_cell(rng)
        before_mean = cell.stats.mean.copy()
        before_count = cell.stats.count
        offset = plane_points(rng, 10, z=0.60, jitter=0.001)
        assert update_plane(cell, offset, m.cfg) == KEPT_INITIAL
        np.testing.assert_allclose(cell.stats.mean, before_mean, atol=1e-15)
        assert cell.stats.count == before_count

    def test_large_shift_removes(self):
        # cluster 0.5 m off the plane, big enough to drag the pooled mean
        rng = np.random.default_rng(16)
        m, cell, _ = planar_cell(rng, n=15)
        cluster = plane_points(rng, 10, z=0.85, jitter=0.001)
        assert update_plane(cell, cluster, m.cfg) == OUTCOME_REMOVED

    def test_update_requires_min_batch(self):
        rng = np.random.default_rng(17)
        m, cell, _ = planar_cell(rng)
        with pytest.raises(ValueError):
            update_plane(cell, plane_points(rng, 4), m.cfg)

    def test_small_batches_buffer_until_threshold(self):
        rng = np.random.default_rng(18)
        m, cell, first = planar_cell(rng)
        count0 = cell.stats.count
        m.insert_scan(plane_points(rng, 3, z=0.35, jitter=0.001))
        assert cell.stats.count == count0          # buffered, no update yet
        m.insert_scan(plane_points(rng, 2, z=0.35, jitter=0.001))
        assert cell.stats.count == count0 + 5      # threshold reached

    def test_incremental_equals_batch_through_map(self):
        # chunk sequence through insert_scan vs one whole scan
        rng = np.random.default_rng(19)
        pts = plane_points(rng, 60, z=0.5, jitter=0.002)
        whole = VoxelPlaneMap(PlaneMapConfig())
        whole.insert_scan(pts)
        chunked = VoxelPlaneMap(PlaneMapConfig())
        for lo, hi in [(0, 25), (25, 40), (40, 52), (52, 60)]:
            chunked.insert_scan(pts[lo:hi])
        a = whole.extract_centroids()
        b = chunked.extract_centroids()
        assert len(a) == len(b) == 1
        np.testing.assert_allclose(a[0].position, b[0].position, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(a[0].normal, b[0].normal, rtol=1e-7, atol=1e-9)


class TestMap:
    def test_accumulates_until_strictly_above_threshold(self):
        rng = np.random.default_rng(20)
        m = VoxelPlaneMap(PlaneMapConfig())
        m.insert_scan(plane_points(rng, 10))   # exactly t_s: still accumulating
        assert m.cells[(0, 0, 0)].state == ACCUMULATING
        m.insert_scan(plane_points(rng, 1))
        assert m.cells[(0, 0, 0)].state == PLANAR

    def test_two_layer_voxel_subdivides(self):
        # planes at z=0.1 and z=0.9 in one voxel: root fails the eigen
        # test, children are planar, centroids carry octree paths
        rng = np.random.default_rng(21)
        m = VoxelPlaneMap(PlaneMapConfig())
        low = plane_points(rng, 30, z=0.1, jitter=0.001)
        high = plane_points(rng, 30, z=0.9, jitter=0.001)
        m.insert_scan(np.vstack([low, high]))
        cell = m.cells[(0, 0, 0)]
        assert cell.state == SUBDIVIDED
        cents = m.extract_centroids()
        assert len(cents) >= 2
        assert all(len(c.path) >= 1 for c in cents)
        zs = sorted(c.position[2] for c in cents)
        assert abs(zs[0] - 0.1) < 0.02 and abs(zs[-1] - 0.9) < 0.02

    def test_octree_depth_capped(self):
        # tight eigen threshold forces subdivision all the way down; no
        # node may exceed depth 3 and unresolvable leaves go nonplanar
        rng = np.random.default_rng(22)
        cfg = PlaneMapConfig(eig_threshold=1e-8)
        m = VoxelPlaneMap(cfg)
        m.insert_scan(rng.uniform(0.0, 1.0, size=(4000, 3)))

        depths = []
        states = []

        def walk(node):
            depths.append(node.depth)
            states.append(node.state)
            for ch in node.children.values():
                walk(ch)

        walk(m.cells[(0, 0, 0)])
        assert max(depths) <= 3
        assert NONPLANAR in states
        for c in m.extract_centroids():
            assert len(c.path) <= 3

    def test_centroid_inside_source_bounds(self):
        rng = np.random.default_rng(23)
        m = VoxelPlaneMap(PlaneMapConfig())
        for _ in range(5):
            pts = rng.uniform(-2.0, 2.0, size=(400, 3)) * [1, 1, 0.01]
            m.insert_scan(pts)
        for c in m.extract_centroids():
            lo = np.array(c.key, dtype=float)
            size = 1.0
            for step in c.path:
                size *= 0.5
                lo = lo + size * np.array([step & 1, (step >> 1) & 1, (step >> 2) & 1])
            assert np.all(c.position >= lo - 1e-12)
            assert np.all(c.position <= lo + size + 1e-12)

    def test_removed_cell_recreated_fresh(self):
        rng = np.random.default_rng(24)
        m, cell, _ = planar_cell(rng, n=15)
        m.insert_scan(plane_points(rng, 10, z=0.85, jitter=0.001))  # dynamic cluster
        assert (0, 0, 0) not in m.cells
        assert m.extract_centroids() == []
        m.insert_scan(plane_points(rng, 6, z=0.2))
        assert m.cells[(0, 0, 0)].state == ACCUMULATING

    def test_insert_returns_sorted_touched_keys(self):
        m = VoxelPlaneMap(PlaneMapConfig())
        pts = np.array([[2.5, 0.5, 0.5], [0.5, 0.5, 0.5], [-1.5, 0.5, 0.5]])
        assert m.insert_scan(pts) == [(-2, 0, 0), (0, 0, 0), (2, 0, 0)]

    def test_nonfinite_points_skipped_and_counted(self):
        m = VoxelPlaneMap(PlaneMapConfig())
        pts = np.array([[0.5, 0.5, 0.5], [np.nan, 0.0, 0.0], [np.inf, 1.0, 1.0]])
        m.insert_scan(pts)
        assert m.skipped_points == 2
        assert m.cells[(0, 0, 0)].pending_count() == 1

    def test_spatial_window_prunes_far_cells(self):
        rng = np.random.default_rng(25)
        m = VoxelPlaneMap(PlaneMapConfig(window_radius=3.0))
        m.insert_scan(plane_points(rng, 20, z=0.5))
        m.insert_scan(plane_points(rng, 20, z=0.5) + [10.0, 0.0, 0.0])
        assert len(m.cells) == 2
        dropped = m.prune_outside(np.zeros(3))
        assert dropped == 1
        assert list(m.cells) == [(0, 0, 0)]

    def test_extract_deterministic(self):
        rng = np.random.default_rng(26)
        m = VoxelPlaneMap(PlaneMapConfig())
        pts = rng.uniform(-3, 3, size=(2000, 3)) * [1, 1, 0.001]
        m.insert_scan(pts)
        a = m.extract_centroids()
        b = m.extract_centroids()
        assert [(c.key, c.path) for c in a] == [(c.key, c.path) for c in b]
        assert [(c.key, c.path) for c in a] == sorted((c.key, c.path) for c in a)
