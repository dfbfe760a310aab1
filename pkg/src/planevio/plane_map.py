"""Incremental plane extraction from a voxelized world-frame point map.

Points are hashed into fixed-size voxels.  Once a voxel has seen enough
points its Gaussian statistics are evaluated: a small enough minimum
covariance eigenvalue means the voxel holds a single plane; otherwise
the voxel subdivides into an octree (at most three layers) and each
child is evaluated the same way.  Established planes absorb later
points through an exact pooled mean/covariance merge, and a plane whose
pooled centroid moves too far is treated as dynamic content and
removed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# node / cell states
ACCUMULATING = "accumulating"
PLANAR = "planar"
SUBDIVIDED = "subdivided"
NONPLANAR = "nonplanar"   # evaluated at max depth and failed; terminal
REMOVED = "removed"

# update_plane outcomes
UPDATED = "updated"
KEPT_INITIAL = "kept_initial"
OUTCOME_REMOVED = "removed"


@dataclass
class PlaneMapConfig:
    voxel_size: float = 1.0
    min_init_points: int = 10        # t_s: points needed before a cell is evaluated
    eig_threshold: float = 0.01      # t_lambda (m^2): plane test on smallest eigenvalue
    mean_shift_threshold: float = 0.1  # t_delta (m): pooled-centroid shift marking dynamics
    min_update_points: int = 5       # m_min: batch size for incremental updates
    max_octree_depth: int = 3
    window_radius: float | None = None  # optional: drop cells beyond this radius


class PlaneStats:
    """Second-order point statistics with the plane eigendecomposition.

    ``scatter`` is the sum of outer products about the mean, so
    ``cov = scatter / count`` (population normalization).  Eigenvalues
    are ascending; the normal is the eigenvector of the smallest one
    with its sign fixed so nz >= 0 (ties broken by ny, then nx).
    """

    __slots__ = ("count", "mean", "scatter", "eigenvalues", "normal")

    def __init__(self, count: int, mean: np.ndarray, scatter: np.ndarray):
        self.count = int(count)
        self.mean = np.asarray(mean, dtype=float)
        self.scatter = np.asarray(scatter, dtype=float)
        evals, evecs = np.linalg.eigh(self.scatter / self.count)
        self.eigenvalues = evals
        n = evecs[:, 0]
        if n[2] < 0 or (n[2] == 0 and (n[1] < 0 or (n[1] == 0 and n[0] < 0))):
            n = -n
        self.normal = n

    @property
    def cov(self) -> np.ndarray:
        return self.scatter / self.count

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])


def batch_stats(points: np.ndarray) -> PlaneStats:
    """Mean and population covariance of a point block (N >= 3)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise ValueError(f"need at least 3 points of dim 3, got shape {pts.shape}")
    mean = pts.mean(axis=0)
    d = pts - mean
    return PlaneStats(pts.shape[0], mean, d.T @ d)


def merge_stats(a: PlaneStats, b: PlaneStats) -> PlaneStats:
    """Exact pooled merge of two disjoint point sets' statistics."""
    n, m = a.count, b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (m / (n + m))
    scatter = a.scatter + b.scatter + np.outer(delta, delta) * (n * m / (n + m))
    return PlaneStats(n + m, mean, scatter)


def is_planar(stats: PlaneStats, cfg: PlaneMapConfig) -> bool:
    return stats.lambda_min < cfg.eig_threshold


def voxel_key(point: np.ndarray, voxel_size: float) -> tuple[int, int, int]:
    """Integer lattice coordinates of the voxel containing a point."""
    k = np.floor(np.asarray(point, dtype=float) / voxel_size).astype(int)
    return (int(k[0]), int(k[1]), int(k[2]))


@dataclass
class PlaneCentroid:
    position: np.ndarray
    normal: np.ndarray
    key: tuple[int, int, int]
    path: tuple[int, ...]   # octree child indices; () for the voxel itself
    thickness: float = 0.0  # rms out-of-plane spread of the fit, m


@dataclass
class _Node:
    origin: np.ndarray        # min corner, world frame
    size: float
    depth: int
    path: tuple[int, ...]
    state: str = ACCUMULATING
    stats: PlaneStats | None = None
    pending: list = field(default_factory=list)   # list of (k,3) arrays
    children: dict = field(default_factory=dict)  # child index -> _Node

    def pending_count(self) -> int:
        return sum(len(p) for p in self.pending)

    def pending_array(self) -> np.ndarray:
        return np.concatenate(self.pending, axis=0)

    def child_index(self, pts: np.ndarray) -> np.ndarray:
        center = self.origin + 0.5 * self.size
        bits = (pts >= center).astype(int)
        return bits[:, 0] | (bits[:, 1] << 1) | (bits[:, 2] << 2)

    def child_node(self, idx: int) -> "_Node":
        node = self.children.get(idx)
        if node is None:
            half = 0.5 * self.size
            offset = np.array([idx & 1, (idx >> 1) & 1, (idx >> 2) & 1], dtype=float)
            node = _Node(self.origin + offset * half, half, self.depth + 1,
                         self.path + (idx,))
            self.children[idx] = node
        return node


def update_plane(node: _Node, new_points: np.ndarray, cfg: PlaneMapConfig) -> str:
    """Fold a batch of new points into an established plane.

    Returns ``UPDATED`` when the pooled statistics still pass the plane
    test, ``KEPT_INITIAL`` when the pooled eigenvalue fails it (the
    original plane stands, the batch is discarded), and ``REMOVED``
    when the pooled centroid moved by at least the mean-shift threshold
    (dynamic content: the plane is dropped).
    """
    pts = np.asarray(new_points, dtype=float)
    if len(pts) < cfg.min_update_points:
        raise ValueError(f"update needs >= {cfg.min_update_points} points, got {len(pts)}")
    if node.state != PLANAR or node.stats is None:
        raise ValueError("update_plane requires an established plane")
    m = len(pts)
    chunk_mean = pts.mean(axis=0)
    d = pts - chunk_mean
    merged = merge_stats(node.stats, PlaneStats(m, chunk_mean, d.T @ d))
    shift = float(np.linalg.norm(merged.mean - node.stats.mean))
    if shift >= cfg.mean_shift_threshold:
        node.state = REMOVED
        node.stats = None
        node.pending = []
        return OUTCOME_REMOVED
    if merged.lambda_min < cfg.eig_threshold:
        node.stats = merged
        return UPDATED
    return KEPT_INITIAL


def _evaluate(node: _Node, cfg: PlaneMapConfig) -> None:
    """Classify an accumulating node, subdividing non-planar ones."""
    pts = node.pending_array()
    stats = batch_stats(pts)
    if is_planar(stats, cfg):
        node.state = PLANAR
        node.stats = stats
        node.pending = []
        return
    if node.depth >= cfg.max_octree_depth:
        node.state = NONPLANAR
        node.pending = []
        return
    node.state = SUBDIVIDED
    node.pending = []
    idx = node.child_index(pts)
    for i in np.unique(idx):
        child = node.child_node(int(i))
        child.pending.append(pts[idx == i])
        if child.pending_count() >= cfg.min_init_points:
            _evaluate(child, cfg)


def _insert(node: _Node, pts: np.ndarray, cfg: PlaneMapConfig) -> None:
    if node.state == ACCUMULATING:
        node.pending.append(pts)
        count = node.pending_count()
        # the root cell initializes strictly above the threshold; octree
        # children evaluate as soon as they reach it
        trigger = count > cfg.min_init_points if node.depth == 0 else count >= cfg.min_init_points
        if trigger:
            _evaluate(node, cfg)
    elif node.state == PLANAR:
        node.pending.append(pts)
        if node.pending_count() >= cfg.min_update_points:
            batch = node.pending_array()
            node.pending = []
            update_plane(node, batch, cfg)
    elif node.state == SUBDIVIDED:
        idx = node.child_index(pts)
        for i in np.unique(idx):
            _insert(node.child_node(int(i)), pts[idx == i], cfg)
    # NONPLANAR / REMOVED nodes ignore further points


class VoxelPlaneMap:
    """Hash table of voxel cells holding incremental plane statistics."""

    def __init__(self, cfg: PlaneMapConfig | None = None):
        self.cfg = cfg or PlaneMapConfig()
        self.cells: dict[tuple[int, int, int], _Node] = {}
        self.skipped_points = 0

    def insert_scan(self, points_world: np.ndarray) -> list[tuple[int, int, int]]:
        """Insert a world-frame scan; returns the sorted keys it touched."""
        pts = np.asarray(points_world, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
        finite = np.isfinite(pts).all(axis=1)
        self.skipped_points += int((~finite).sum())
        pts = pts[finite]
        if len(pts) == 0:
            return []
        cfg = self.cfg
        keys = np.floor(pts / cfg.voxel_size).astype(int)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        touched = []
        for i, k in enumerate(uniq):
            key = (int(k[0]), int(k[1]), int(k[2]))
            touched.append(key)
            cell = self.cells.get(key)
            if cell is None:
                cell = _Node(k.astype(float) * cfg.voxel_size, cfg.voxel_size, 0, ())
                self.cells[key] = cell
            _insert(cell, pts[inv == i], cfg)
            if cell.state == REMOVED:
                # dynamic content: drop the cell; a later scan re-creates
                # it as a fresh accumulating voxel
                del self.cells[key]
        return touched

    def prune_outside(self, center: np.ndarray) -> int:
        """Drop cells whose center is beyond the configured window radius."""
        if self.cfg.window_radius is None:
            return 0
        center = np.asarray(center, dtype=float)
        doomed = []
        for key, cell in self.cells.items():
            cell_center = cell.origin + 0.5 * cell.size
            if np.linalg.norm(cell_center - center) > self.cfg.window_radius:
                doomed.append(key)
        for key in doomed:
            del self.cells[key]
        return len(doomed)

    def extract_centroids(self) -> list[PlaneCentroid]:
        """All plane centroids (voxel-level and octree-level), key-ordered."""
        out: list[PlaneCentroid] = []

        def walk(node: _Node, key):
            if node.state == PLANAR:
                out.append(PlaneCentroid(node.stats.mean.copy(), node.stats.normal.copy(),
                                         key, node.path,
                                         math.sqrt(max(node.stats.eigenvalues[0], 0.0))))
            elif node.state == SUBDIVIDED:
                for i in sorted(node.children):
                    walk(node.children[i], key)

        for key in sorted(self.cells):
            walk(self.cells[key], key)
        return out
