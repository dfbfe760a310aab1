"""End-to-end odometry loop tying the subsystems together.

Per camera frame the pipeline:

1. propagates the filter through the IMU samples since the last frame,
2. folds any pending scans into the voxel plane map using the
   scan-registration poses,
3. LK-tracks surviving feature points and projected plane centroids
   from the previous image in one batch, seeded from the propagated
   state,
4. gates all correspondences with a single fundamental-matrix RANSAC,
5. re-acquires features the tracker lost via weighted epipolar search,
6. performs the iterated filter update on the pooled feature / centroid
   reprojection stack,
7. advances the depth window, refines track depths and promotes
   converged tracks to fixed map points,
8. replenishes the feature set with fresh corners.

Everything is deterministic given the dataset and the configuration;
the only randomness (RANSAC sampling) is reseeded per frame.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .dataset import ConfigError, Dataset, Trajectory, write_trajectory
from .depth import (
    DEPTH_CONVERGED,
    DROPPED,
    TRACKING,
    CheiralityError,
    DepthConfig,
    DepthEstimate,
    FeatureTrack,
    ParallaxError,
    PureRotationError,
    RecoveryError,
    SlidingWindow,
    finalize_map_point,
    refine_point,
    optimize_depth,
    parallax,
    recover_feature,
    transfer_depth,
    triangulate,
)
from .esikf import (
    FilterConfig,
    HybridMeasurement,
    NavState,
    ReprojectionTerm,
    iterated_update,
    pose_update,
    project_centroids,
    propagate,
    propagate_state,
)
from .evaluate import MODE_PAPER, evaluate_ate
from .frontend import (
    TRACK_OK,
    FrontendConfig,
    build_pyramid,
    harris_detect,
    lk_track_pyramid,
    ransac_filter,
)
from .geometry import Pixel, compose
from .plane_map import PlaneMapConfig, VoxelPlaneMap

ABLATION_HYBRID = "hybrid"
ABLATION_FEATURES = "features-only"
ABLATION_CENTROIDS = "centroids-only"
ABLATIONS = (ABLATION_HYBRID, ABLATION_FEATURES, ABLATION_CENTROIDS)

_STAMP_SLOP = 1e-9  # scheduling tolerance for stream alignment


@dataclass
class PipelineConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    depth: DepthConfig = field(default_factory=DepthConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    plane_map: PlaneMapConfig = field(default_factory=PlaneMapConfig)
    ablation: str = ABLATION_HYBRID
    max_features: int = 40
    min_feature_distance: float = 12.0
    centroid_margin: float = 12.0
    max_centroid_terms: int = 60
    max_centroid_thickness_m: float = 0.02  # skip fat plane fits (corner voxels)
    ransac_seed: int = 1000           # per-frame seed is ransac_seed + frame index
    innovation_gate_px: float = 20.0  # reject terms this far from prediction
    # Per-frame common-mode pixel noise (texture bias, residual warp error)
    # hits every term in a frame the same way; treating it as independent
    # would let the aggregate weight grow without bound as terms are added.
    # Each term's effective variance is its own independent variance plus
    # n_terms * common_variance, which caps frame information at
    # 1 / common_variance no matter how many terms fire.
    common_variance_px2: float = 0.0
    lis_rotation_sigma: float = 1e-3  # trust in the scan-registration poses, rad
    lis_translation_sigma: float = 1e-3  # and meters
    lis_update_stride: int = 1        # anchor on every Nth scan; 0 = map only
    init_rotation_sigma: float = 1e-4
    init_position_sigma: float = 1e-4
    init_velocity_sigma: float = 1e-2
    init_accel_bias_sigma: float = 0.05
    init_gyro_bias_sigma: float = 0.01

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; "
                              f"expected one of {', '.join(ABLATIONS)}")
        if self.lis_update_stride < 0:
            raise ConfigError("lis_update_stride must be >= 0")

    def initial_covariance(self) -> np.ndarray:
        sig = np.concatenate([
            np.full(3, self.init_rotation_sigma),
            np.full(3, self.init_position_sigma),
            np.full(3, self.init_velocity_sigma),
            np.full(3, self.init_accel_bias_sigma),
            np.full(3, self.init_gyro_bias_sigma),
        ])
        return np.diag(sig ** 2)


def _sub_config(cls, raw, where):
    known = {f.name for f in fields(cls)}
    bad = set(raw) - known
    if bad:
        raise ConfigError(f"{where}: unknown keys {sorted(bad)}")
    return cls(**raw)


def pipeline_config_from_dict(raw: dict) -> PipelineConfig:
    raw = dict(raw)
    kwargs = {}
    for name, cls in (("frontend", FrontendConfig), ("depth", DepthConfig),
                      ("filter", FilterConfig), ("plane_map", PlaneMapConfig)):
        if name in raw:
            section = raw.pop(name)
            if not isinstance(section, dict):
                raise ConfigError(f"{name}: expected an object")
            kwargs[name] = _sub_config(cls, section, name)
    known = {f.name for f in fields(PipelineConfig)}
    bad = set(raw) - known
    if bad:
        raise ConfigError(f"unknown pipeline keys {sorted(bad)}")
    kwargs.update(raw)
    return PipelineConfig(**kwargs)


def load_pipeline_config(path: str) -> PipelineConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return pipeline_config_from_dict(raw)


@dataclass
class FrameDiagnostics:
    t: float
    feature_terms: int      # feature reprojection rows / 2 in the update
    centroid_terms: int
    active_tracks: int      # live tracks after replenishment
    map_points: int         # cumulative promoted landmarks
    iterations: int
    dropped_terms: int
    degraded: bool


@dataclass
class PipelineResult:
    trajectory: Trajectory
    map_points: list        # MapPoint
    centroids: list         # final PlaneCentroid extraction
    diagnostics: list       # FrameDiagnostics per processed frame
    truncated: str | None = None


def initial_state(ds: Dataset) -> NavState:
    """Filter start: first ground-truth pose, dataset velocity, zero biases."""
    pose0 = ds.ground_truth.pose(0)
    return NavState(pose0.rotation.copy(), pose0.translation.copy(),
                    np.asarray(ds.initial_velocity, dtype=float).copy(),
                    np.zeros(3), np.zeros(3))


def _imu_start_index(imu, t0):
    ii = 0
    while ii + 1 < len(imu) and imu[ii + 1].t <= t0 + _STAMP_SLOP:
        ii += 1
    return ii


def _predict_pixel(state: NavState, p_world, extrinsic, intr, min_depth):
    p_body = state.rotation.T @ (p_world - state.position)
    p_cam = extrinsic.rotation.T @ (p_body - extrinsic.translation)
    if p_cam[2] <= min_depth:
        return None
    return Pixel(intr.fx * p_cam[0] / p_cam[2] + intr.cx,
                 intr.fy * p_cam[1] / p_cam[2] + intr.cy)


def _in_image(px: Pixel, width: int, height: int, margin: float) -> bool:
    return (margin <= px.u <= width - 1 - margin
            and margin <= px.v <= height - 1 - margin)


def _association_prior(lis_poses, lis_times, t):
    """Registration pose at time t as a pose-only NavState, or None.

    Template placement wants the best available pose for the previous
    frame.  Placing every template from the filter posterior couples
    them all to the same estimation error: each patch then confirms the
    shared offset instead of measuring it, and no amount of per-term
    averaging removes a common mode.  The scan-registration stream is
    independent of the filter, so anchoring templates on it keeps the
    per-term errors independent.
    """
    if lis_times is None or not len(lis_times):
        return None
    li = int(np.argmin(np.abs(lis_times - t)))
    if abs(lis_times[li] - t) > 1e-6:
        return None
    p = lis_poses.pose(li)
    return NavState(p.rotation, p.translation,
                    np.zeros(3), np.zeros(3), np.zeros(3))


def _template_warp(prev_state: NavState, cur_state: NavState, p_world,
                   normal, extrinsic, intr, min_depth: float):
    """2x2 map from current-patch pixel offsets to template offsets.

    Differential of the plane-induced homography between the predicted
    previous and current camera poses, evaluated at the point.  `normal`
    is the world-frame surface normal; None means fronto-parallel (the
    viewing ray itself), which captures rotation and zoom but not slant.
    Returns None when the geometry is degenerate.
    """
    R1 = prev_state.rotation @ extrinsic.rotation
    o1 = prev_state.rotation @ extrinsic.translation + prev_state.position
    R2 = cur_state.rotation @ extrinsic.rotation
    o2 = cur_state.rotation @ extrinsic.translation + cur_state.position
    p1 = R1.T @ (p_world - o1)
    p2 = R2.T @ (p_world - o2)
    z1, z2 = p1[2], p2[2]
    if z1 <= min_depth or z2 <= min_depth:
        return None
    ray = (p_world - o1) / z1
    n = ray if normal is None else np.asarray(normal, dtype=float)
    dot = n @ ray
    if abs(dot) < 1e-9:
        return None         # grazing view of the surface
    dr = R1 @ np.array([[1.0 / intr.fx, 0.0], [0.0, 1.0 / intr.fy], [0.0, 0.0]])
    dX = z1 * (dr - np.outer(ray, n @ dr) / dot)
    J2 = np.array([[intr.fx / z2, 0.0, -intr.fx * p2[0] / z2 ** 2],
                   [0.0, intr.fy / z2, -intr.fy * p2[1] / z2 ** 2]]) @ R2.T
    A = J2 @ dX             # template offsets -> current offsets
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    if abs(det) < 1e-6:
        return None
    return np.array([[A[1, 1], -A[0, 1]], [-A[1, 0], A[0, 0]]]) / det


def _slide_window(window: SlidingWindow, tracks: dict, intr) -> None:
    """Drop the oldest window frame, transporting depth references off it."""
    old = window.frames[0]
    for track in tracks.values():
        est = track.estimate
        if est is None or est.ref_frame != old:
            continue
        new_ref = next((f for f in window.frames[1:] if f in track.observations), None)
        d = est.d_opt if est.d_opt is not None else est.d_init
        if new_ref is None or d is None:
            track.estimate = None
            continue
        try:
            d_new = transfer_depth(d, track, window, old, new_ref, intr)
        except CheiralityError:
            track.estimate = None
            continue
        track.estimate = DepthEstimate(ref_frame=new_ref, d_init=d_new,
                                       transported=True)
    window.frames.pop(0)
    window.poses.pop(0)


def _update_depths(window, tracks, intr, cfg: DepthConfig, map_points):
    """Triangulate, refine and promote track depths on the current window.

    A depth is only trusted once it has crossed a window slide: the
    freshly optimized value must agree with the prior transported from
    the previous window.  Same-window agreement is vacuous, and early
    promotions would freeze whatever pose error the first short
    baselines carried.  Landmarks of still-tracked features are
    re-anchored on every re-convergence so they follow the corrected
    trajectory instead of the pose that happened to exist at creation.
    """
    for track in tracks.values():
        if track.state == DROPPED:
            continue
        obs_frames = [f for f in window.frames if f in track.observations]
        if len(obs_frames) < 2:
            continue
        est = track.estimate
        if est is None or est.ref_frame != obs_frames[0]:
            try:
                d0 = triangulate(track, window, intr, cfg)
            except (ParallaxError, CheiralityError):
                continue
            est = DepthEstimate(ref_frame=obs_frames[0], d_init=d0)
            track.estimate = est
        if len(obs_frames) < 3:
            continue
        try:
            est.d_opt = optimize_depth(track, window, intr, est.d_init, cfg)
        except (CheiralityError, ValueError):
            track.estimate = None
            continue
        settled = (est.transported and est.delta < cfg.depth_gate_m
                   and est.d_opt <= cfg.max_depth_m)
        if not settled:
            continue
        if track.map_point is None:
            track.state = DEPTH_CONVERGED
            mp = finalize_map_point(track, window, est, intr, cfg)
            mp.position = refine_point(mp.position, track, window, intr)
            track.map_point = mp
            map_points.append(mp)
        else:
            refreshed = finalize_map_point(track, window, est, intr, cfg)
            track.map_point.position = refine_point(refreshed.position, track,
                                                    window, intr)
            track.map_point.frame = refreshed.frame


def run_pipeline(ds: Dataset, cfg: PipelineConfig | None = None) -> PipelineResult:
    cfg = cfg or PipelineConfig()
    intr = ds.intrinsics
    width, height = ds.image_size
    use_features = cfg.ablation in (ABLATION_HYBRID, ABLATION_FEATURES)
    use_centroids = cfg.ablation in (ABLATION_HYBRID, ABLATION_CENTROIDS)

    state = initial_state(ds)
    cov = cfg.initial_covariance()
    plane_map = VoxelPlaneMap(cfg.plane_map)
    window = SlidingWindow(capacity=cfg.depth.window_capacity)
    tracks: dict[int, FeatureTrack] = {}
    next_track_id = 0
    map_points: list = []
    diagnostics: list = []
    times_out: list = []
    poses_out: list = []
    truncated = None

    imu = ds.imu
    ii = _imu_start_index(imu, ds.images[0][0])
    scan_idx = 0
    prev_pyr = None
    prev_state = None   # posterior at the previous frame
    prev_t = None       # timestamp of the previous frame

    def advance(t_target):
        """Propagate through the IMU grid up to t_target (inclusive)."""
        nonlocal state, cov, ii
        while ii + 1 < len(imu) and imu[ii + 1].t <= t_target + _STAMP_SLOP:
            state, cov = propagate(state, cov, imu[ii], imu[ii + 1], cfg.filter)
            ii += 1

    lis_times = np.asarray(ds.lis_poses.times, dtype=float)

    for fi, (t_img, img) in enumerate(ds.images):
        if fi > 0 and imu[-1].t < t_img - 1e-6:
            truncated = (f"imu stream exhausted at t={imu[-1].t:.6f} "
                         f"before frame at t={t_img:.6f}")
            break

        # --- LIS events due before this frame: anchor the state on the
        # registration pose, then fold the scan into the plane map ---
        while scan_idx < len(ds.scans) and ds.scans[scan_idx][0] <= t_img + _STAMP_SLOP:
            t_scan, points = ds.scans[scan_idx]
            scan_idx += 1
            if not len(points):
                continue    # nothing to register against
            li = int(np.argmin(np.abs(lis_times - t_scan)))
            if abs(lis_times[li] - t_scan) > 1e-6:
                raise ConfigError(f"no scan-registration pose at t={t_scan:.6f}")
            advance(t_scan)
            stride = cfg.lis_update_stride
            if stride and (scan_idx - 1) % stride == 0:
                state, cov = pose_update(state, cov, ds.lis_poses.pose(li),
                                         cfg.lis_rotation_sigma ** 2,
                                         cfg.lis_translation_sigma ** 2)
            if use_centroids:
                sensor_pose = compose(ds.lidar_to_body, ds.lis_poses.pose(li))
                plane_map.insert_scan(sensor_pose.apply(points))
        if use_centroids and cfg.plane_map.window_radius is not None:
            plane_map.prune_outside(state.position)

        advance(t_img)

        pyr = build_pyramid(img)
        feature_terms = centroid_terms = n_iters = n_dropped = 0
        degraded = False

        if fi > 0:
            # --- joint correspondence batch: surviving tracks + centroids ---
            tpl_state = (_association_prior(ds.lis_poses, lis_times, prev_t)
                         if prev_t is not None else None)
            if tpl_state is None:
                tpl_state = prev_state
            batch_prev: list[Pixel] = []
            batch_init: list[Pixel] = []
            batch_item: list = []    # FeatureTrack or PlaneCentroid
            batch_warp: list = []
            if use_features:
                for track in tracks.values():
                    px_prev = track.observations.get(fi - 1)
                    if track.state == DROPPED or px_prev is None:
                        continue
                    init = px_prev
                    warp = None
                    if track.map_point is not None:
                        # re-derive the template location from the landmark
                        # each frame; a chained template would accumulate
                        # per-step tracking bias as an unbounded random walk
                        anchored = _predict_pixel(tpl_state, track.map_point.position,
                                                  ds.cam_to_body, intr,
                                                  cfg.filter.min_depth) \
                            if tpl_state is not None else None
                        if anchored is not None and _in_image(anchored, width, height,
                                                              cfg.centroid_margin):
                            px_prev = anchored
                        guess = _predict_pixel(state, track.map_point.position,
                                               ds.cam_to_body, intr,
                                               cfg.filter.min_depth)
                        if guess is not None:
                            init = guess
                        if tpl_state is not None:
                            warp = _template_warp(tpl_state, state,
                                                  track.map_point.position, None,
                                                  ds.cam_to_body, intr,
                                                  cfg.filter.min_depth)
                    batch_prev.append(px_prev)
                    batch_init.append(init)
                    batch_item.append(track)
                    batch_warp.append(warp)
            if use_centroids and tpl_state is not None:
                # a near-corner cell can pass the eigenvalue test with a fat,
                # tilted fit whose mean floats off every real surface; such a
                # point cannot reproject consistently and only injects bias
                flat = [c for c in plane_map.extract_centroids()
                        if c.thickness <= cfg.max_centroid_thickness_m]
                visible = project_centroids(tpl_state, flat,
                                            ds.cam_to_body, intr, width, height,
                                            margin=cfg.centroid_margin,
                                            min_depth=cfg.filter.min_depth)
                if len(visible) > cfg.max_centroid_terms:
                    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
                    visible.sort(key=lambda cp: ((cp[1].u - cx) ** 2 + (cp[1].v - cy) ** 2,
                                                 cp[0].key, cp[0].path))
                    visible = visible[:cfg.max_centroid_terms]
                for cent, px_prev in visible:
                    init = _predict_pixel(state, cent.position, ds.cam_to_body,
                                          intr, cfg.filter.min_depth) or px_prev
                    batch_prev.append(px_prev)
                    batch_init.append(init)
                    batch_item.append(cent)
                    batch_warp.append(_template_warp(tpl_state, state,
                                                     cent.position, cent.normal,
                                                     ds.cam_to_body, intr,
                                                     cfg.filter.min_depth))

            results = (lk_track_pyramid(prev_pyr, pyr, batch_prev,
                                        inits=batch_init, cfg=cfg.frontend,
                                        warps=batch_warp)
                       if batch_prev else [])
            ok = [k for k, r in enumerate(results) if r.status == TRACK_OK]
            inlier = np.zeros(len(results), dtype=bool)
            if ok:
                a = np.array([[batch_prev[k].u, batch_prev[k].v] for k in ok])
                b = np.array([[results[k].point.u, results[k].point.v] for k in ok])
                ver = ransac_filter(a, b, seed=cfg.ransac_seed + fi, cfg=cfg.frontend)
                inlier[ok] = ver.inlier_mask

            def gated_term(world_point, px):
                """Reject terms whose innovation under the propagated state
                is beyond any plausible estimation error (stale landmark or
                a consistent mistrack that slipped through RANSAC)."""
                pred = _predict_pixel(state, world_point, ds.cam_to_body,
                                      intr, cfg.filter.min_depth)
                if pred is None or np.hypot(pred.u - px.u,
                                            pred.v - px.v) > cfg.innovation_gate_px:
                    return None
                return ReprojectionTerm(world_point, px)

            feature_stack: list[ReprojectionTerm] = []
            centroid_stack: list[ReprojectionTerm] = []
            lost: list[FeatureTrack] = []
            for k, item in enumerate(batch_item):
                if isinstance(item, FeatureTrack):
                    if inlier[k]:
                        item.add_observation(fi, results[k].point)
                        if item.map_point is not None:
                            term = gated_term(item.map_point.position,
                                              results[k].point)
                            if term is not None:
                                feature_stack.append(term)
                    else:
                        lost.append(item)
                elif inlier[k]:
                    term = gated_term(item.position, results[k].point)
                    if term is not None:
                        centroid_stack.append(term)

            # --- epipolar recovery of lost tracks against the predicted pose ---
            if lost and len(window.frames) >= 2:
                probe = SlidingWindow(capacity=len(window.frames) + 1,
                                      frames=list(window.frames),
                                      poses=list(window.poses))
                probe.append(fi, compose(ds.cam_to_body, state.pose()))
                for track in lost:
                    seen = sum(1 for f in probe.frames[:-1] if f in track.observations)
                    if seen < 2:
                        track.state = DROPPED
                        continue
                    try:
                        px = recover_feature(track, probe, prev_pyr, pyr,
                                             intr, cfg.depth, cfg.frontend)
                    except (RecoveryError, PureRotationError):
                        track.state = DROPPED
                        continue
                    track.add_observation(fi, px)
                    track.state = TRACKING
                    if track.map_point is not None:
                        term = gated_term(track.map_point.position, px)
                        if term is not None:
                            feature_stack.append(term)
            else:
                for track in lost:
                    track.state = DROPPED

            meas = HybridMeasurement(features=feature_stack, centroids=centroid_stack)
            if len(meas):
                fcfg = cfg.filter
                if cfg.common_variance_px2 > 0.0:
                    bump = len(meas) * cfg.common_variance_px2
                    fcfg = replace(fcfg,
                                   feature_variance_px2=fcfg.feature_variance_px2 + bump,
                                   centroid_variance_px2=fcfg.centroid_variance_px2 + bump)
                upd = iterated_update(state, cov, meas, ds.cam_to_body, intr, fcfg)
                state, cov = upd.state, upd.covariance
                n_iters = upd.iterations
                n_dropped = upd.dropped_terms
                degraded = upd.degraded
            feature_terms = len(feature_stack)
            centroid_terms = len(centroid_stack)

        times_out.append(t_img)
        poses_out.append(state.pose())

        # --- depth window lifecycle under the posterior camera pose ---
        if use_features:
            cam_pose = compose(ds.cam_to_body, state.pose())
            if not window.full:
                window.append(fi, cam_pose)
            else:
                newest = window.frames[-1]
                gaps = [parallax(tr, newest, fi) for tr in tracks.values()
                        if tr.state != DROPPED
                        and newest in tr.observations and fi in tr.observations]
                if gaps and float(np.median(gaps)) > cfg.depth.parallax_gate_px:
                    _slide_window(window, tracks, intr)
                    window.append(fi, cam_pose)
            _update_depths(window, tracks, intr, cfg.depth, map_points)

            # --- replenish with fresh corners away from live tracks ---
            live = [tr for tr in tracks.values()
                    if tr.state != DROPPED and fi in tr.observations]
            deficit = cfg.max_features - len(live)
            if deficit > 0:
                taken = np.array([[tr.observations[fi].u, tr.observations[fi].v]
                                  for tr in live], dtype=float).reshape(-1, 2)
                corners = harris_detect(img, max_corners=cfg.max_features * 2,
                                        min_dist=cfg.min_feature_distance,
                                        cfg=cfg.frontend)
                for c in corners:
                    if deficit <= 0:
                        break
                    if len(taken) and np.min(np.hypot(taken[:, 0] - c.u,
                                                      taken[:, 1] - c.v)) < cfg.min_feature_distance:
                        continue
                    track = FeatureTrack(track_id=next_track_id)
                    next_track_id += 1
                    track.add_observation(fi, c)
                    tracks[track.track_id] = track
                    taken = np.vstack([taken, [c.u, c.v]])
                    deficit -= 1
            tracks = {tid: tr for tid, tr in tracks.items() if tr.state != DROPPED}

        prev_pyr = pyr
        prev_state = state.copy()
        prev_t = t_img
        diagnostics.append(FrameDiagnostics(
            t=t_img, feature_terms=feature_terms, centroid_terms=centroid_terms,
            active_tracks=len(tracks), map_points=len(map_points),
            iterations=n_iters, dropped_terms=n_dropped, degraded=degraded))

    trajectory = Trajectory.from_poses(times_out, poses_out)
    centroids = plane_map.extract_centroids() if use_centroids else []
    return PipelineResult(trajectory, map_points, centroids, diagnostics, truncated)


def dead_reckon(ds: Dataset, cfg: FilterConfig | None = None) -> Trajectory:
    """IMU-only strapdown from the same start state, sampled at the frames."""
    cfg = cfg or FilterConfig()
    state = initial_state(ds)
    imu = ds.imu
    ii = _imu_start_index(imu, ds.images[0][0])
    times, poses = [], []
    for fi, (t_img, _) in enumerate(ds.images):
        if fi > 0:
            if imu[-1].t < t_img - 1e-6:
                break
            while ii + 1 < len(imu) and imu[ii + 1].t <= t_img + _STAMP_SLOP:
                state = propagate_state(state, imu[ii], imu[ii + 1], cfg)
                ii += 1
        times.append(t_img)
        poses.append(state.pose())
    return Trajectory.from_poses(times, poses)


def _fmt(x) -> str:
    return format(float(x), ".9g")


def export_results(result: PipelineResult, out_dir: str,
                   ground_truth: Trajectory | None = None) -> None:
    """Write the run artifacts under `out_dir`.

    trajectory.txt   estimated poses, one per processed frame
    map_points.csv   promoted landmarks (track_id,ref_frame,x,y,z)
    centroids.txt    final plane-map extraction
    diagnostics.csv  per-frame update statistics
    errors.csv       per-match position error, when ground truth is given
    summary.json     run totals and the truncation diagnostic, if any
    """
    os.makedirs(out_dir, exist_ok=True)
    write_trajectory(os.path.join(out_dir, "trajectory.txt"), result.trajectory)

    with open(os.path.join(out_dir, "map_points.csv"), "w", newline="") as f:
        f.write("track_id,ref_frame,x,y,z\n")
        for mp in result.map_points:
            f.write(f"{mp.track_id},{mp.frame},{_fmt(mp.position[0])},"
                    f"{_fmt(mp.position[1])},{_fmt(mp.position[2])}\n")

    with open(os.path.join(out_dir, "centroids.txt"), "w", newline="") as f:
        f.write("x y z nx ny nz voxel_key octree_path\n")
        for c in result.centroids:
            key = ",".join(str(k) for k in c.key)
            path = "/".join(str(d) for d in c.path) if c.path else "-"
            vals = " ".join(_fmt(v) for v in (*c.position, *c.normal))
            f.write(f"{vals} {key} {path}\n")

    with open(os.path.join(out_dir, "diagnostics.csv"), "w", newline="") as f:
        f.write("t,feature_terms,centroid_terms,active_tracks,"
                "map_points,iterations,dropped_terms,degraded\n")
        for d in result.diagnostics:
            f.write(f"{_fmt(d.t)},{d.feature_terms},{d.centroid_terms},"
                    f"{d.active_tracks},{d.map_points},{d.iterations},"
                    f"{d.dropped_terms},{int(d.degraded)}\n")

    summary = {
        "frames": len(result.diagnostics),
        "map_points": len(result.map_points),
        "centroids": len(result.centroids),
        "truncated": result.truncated,
    }

    if ground_truth is not None:
        report = evaluate_ate(result.trajectory.times, result.trajectory.positions,
                              ground_truth.times, ground_truth.positions,
                              mode=MODE_PAPER)
        with open(os.path.join(out_dir, "errors.csv"), "w", newline="") as f:
            f.write("t,error\n")
            for t, err in report.errors:
                f.write(f"{_fmt(t)},{_fmt(err)}\n")
        summary["ate"] = report.ate
        summary["matched"] = report.matched

    with open(os.path.join(out_dir, "summary.json"), "w", newline="") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
