"""Feature depth estimation over a sliding window of camera poses.

Two mechanisms live here.  First, a lost feature is re-acquired by
intersecting the epipolar constraints of its earlier observations in
the newest frame (each prior frame contributes one linear row; rows are
weighted by their epipolar consistency against the most recent
observation, which is trusted most) and refining the solution with
pyramidal LK.  Second, a feature's depth in its reference frame is
initialized by two-view triangulation once parallax is sufficient,
refined by a scalar Levenberg-Marquardt fit of all windowed
reprojection residuals, and accepted once the refined depth agrees with
the value transferred from the previous window position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frontend import TRACK_OK, FrontendConfig, Pyramid, lk_track_pyramid
from .geometry import (
    BehindCameraError,
    CameraIntrinsics,
    Pixel,
    Pose,
    compose,
    inverse,
    project,
    skew,
)

# track states
TRACKING = "tracking"
RECOVERING = "recovering"
DEPTH_CONVERGED = "depth_converged"
DROPPED = "dropped"


class PureRotationError(ValueError):
    """Epipolar recovery attempted with no translation in the window."""


class RecoveryError(ValueError):
    """Feature recovery failed (ill-conditioned system or bad refinement)."""


class CheiralityError(ValueError):
    """A depth operation produced a point behind a camera."""


class ParallaxError(ValueError):
    """Observations too close together for triangulation."""


@dataclass
class DepthConfig:
    window_capacity: int = 10
    parallax_gate_px: float = 10.0       # t_X: strict > to act
    depth_gate_m: float = 0.1            # t_d: |d_opt - d_init| below this converges
    max_depth_m: float = 100.0           # sanity bound on an accepted depth
    lm_max_iterations: int = 50
    lm_step_tol: float = 1e-6
    lm_grad_tol: float = 1e-9
    cond_limit: float = 1e8
    weight_clamp: float = 1e-12          # floor on e_min in recovery weights
    recover_residual_max: float = 0.1    # LK intensity residual accepted as a match


@dataclass
class SlidingWindow:
    """Recent frame ids with their camera-in-world poses."""
    capacity: int = 10
    frames: list[int] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)

    def append(self, frame: int, pose: Pose) -> None:
        if self.frames and frame <= self.frames[-1]:
            raise ValueError(f"frame ids must increase: {frame} after {self.frames[-1]}")
        self.frames.append(frame)
        self.poses.append(pose)
        if len(self.frames) > self.capacity:
            raise ValueError("window over capacity; use step_window to slide")

    @property
    def full(self) -> bool:
        return len(self.frames) >= self.capacity

    def pose_of(self, frame: int) -> Pose:
        return self.poses[self.frames.index(frame)]


@dataclass
class DepthEstimate:
    ref_frame: int
    d_init: float               # transferred / triangulated value at ref_frame
    d_opt: float | None = None  # windowed MAP refinement
    transported: bool = False   # d_init came from a previous window via transfer

    @property
    def delta(self) -> float:
        if self.d_opt is None:
            return float("inf")
        return abs(self.d_opt - self.d_init)


@dataclass
class MapPoint:
    position: np.ndarray   # world frame
    track_id: int
    frame: int             # frame whose depth anchored the point


@dataclass
class FeatureTrack:
    track_id: int
    observations: dict[int, Pixel] = field(default_factory=dict)
    state: str = TRACKING
    window: SlidingWindow | None = None
    estimate: DepthEstimate | None = None
    map_point: MapPoint | None = None

    def add_observation(self, frame: int, px: Pixel) -> None:
        self.observations[frame] = px

    def frames_observed(self) -> list[int]:
        return list(self.observations)


def relative_pose(window: SlidingWindow, i: int, n: int) -> Pose:
    """Pose mapping window position n's frame into position i's frame."""
    return compose(window.poses[n], inverse(window.poses[i]))


def parallax(track: FeatureTrack, frame_i: int, frame_j: int) -> float:
    a = track.observations[frame_i]
    b = track.observations[frame_j]
    return float(np.hypot(a.u - b.u, a.v - b.v))


@dataclass
class EpipolarSystem:
    rows: np.ndarray        # (m, 3): rows annihilate the lost frame's pixel
    X: np.ndarray           # (m, 2) = rows[:, :2]
    y: np.ndarray           # (m,)   = -rows[:, 2]
    errors: np.ndarray      # (m-1,) epipolar errors vs the anchor observation
    weights: np.ndarray     # (m,) row weights; anchor fixed at 1
    positions: list[int]    # window positions contributing rows
    anchor_position: int


def recovery_weights(errors: np.ndarray, clamp: float = 1e-12) -> np.ndarray:
    """Row weights e_i / e_min + 1 with the anchor appended at weight 1."""
    e = np.asarray(errors, dtype=float)
    if len(e) == 0:
        return np.array([1.0])
    e_min = max(float(e.min()), clamp)
    return np.append(e / e_min + 1.0, 1.0)


def build_epipolar_system(track: FeatureTrack, window: SlidingWindow,
                          intr: CameraIntrinsics,
                          cfg: DepthConfig | None = None) -> EpipolarSystem:
    """Linear constraints locating a lost feature in the last window frame.

    Every earlier window frame with an observation contributes the row
    ray_i^T [t]_x R K^-1 of its epipolar constraint with the last frame;
    rows are weighted by their epipolar error against the newest
    observed frame, which itself enters at weight 1.
    """
    cfg = cfg or DepthConfig()
    n = len(window.frames)
    if n < 3:
        raise RecoveryError("window too short for epipolar recovery")
    observed = [k for k in range(n - 1) if window.frames[k] in track.observations]
    if len(observed) < 2:
        raise RecoveryError(f"track {track.track_id} has {len(observed)} usable "
                            "observations; need at least 2")
    anchor = observed[-1]
    k_inv = np.linalg.inv(intr.matrix())
    rays = {k: intr.ray(track.observations[window.frames[k]]) for k in observed}

    rows = np.empty((len(observed), 3))
    translations = []
    for r, k in enumerate(observed):
        rel = relative_pose(window, k, n - 1)   # last frame -> frame k
        translations.append(np.linalg.norm(rel.translation))
        rows[r] = rays[k] @ skew(rel.translation) @ rel.rotation @ k_inv
    if max(translations) < 1e-6:
        raise PureRotationError("no translation between window frames and the lost frame")

    errors = np.empty(len(observed) - 1)
    for r, k in enumerate(observed[:-1]):
        rel = relative_pose(window, k, anchor)  # anchor frame -> frame k
        errors[r] = abs(rays[k] @ skew(rel.translation) @ rel.rotation @ rays[anchor])
    weights = recovery_weights(errors, cfg.weight_clamp)

    return EpipolarSystem(rows, rows[:, :2].copy(), -rows[:, 2].copy(),
                          errors, weights, observed, anchor)


def solve_weighted(system: EpipolarSystem,
                   cfg: DepthConfig | None = None) -> Pixel:
    """Weighted least-squares pixel from the epipolar rows."""
    cfg = cfg or DepthConfig()
    W = system.weights
    M = system.X.T @ (system.X * W[:, None])
    if not np.isfinite(M).all() or np.linalg.cond(M) > cfg.cond_limit:
        raise RecoveryError("epipolar system is ill-conditioned")
    rhs = system.X.T @ (W * system.y)
    f = np.linalg.solve(M, rhs)
    return Pixel(float(f[0]), float(f[1]))


def recover_feature(track: FeatureTrack, window: SlidingWindow,
                    prev_pyr: Pyramid, next_pyr: Pyramid,
                    intr: CameraIntrinsics,
                    cfg: DepthConfig | None = None,
                    fe_cfg: FrontendConfig | None = None) -> Pixel:
    """Locate a feature lost in the last window frame.

    The weighted epipolar solution seeds pyramidal LK from the newest
    observed frame's patch; the refined position is accepted only when
    tracking converges with a small intensity residual.
    """
    cfg = cfg or DepthConfig()
    system = build_epipolar_system(track, window, intr, cfg)
    guess = solve_weighted(system, cfg)
    anchor_frame = window.frames[system.anchor_position]
    template = track.observations[anchor_frame]
    result = lk_track_pyramid(prev_pyr, next_pyr, [template], inits=[guess], cfg=fe_cfg)[0]
    if result.status != TRACK_OK:
        raise RecoveryError(f"LK refinement failed ({result.status})")
    if not (result.residual < cfg.recover_residual_max):
        raise RecoveryError(f"refined match residual {result.residual:.4f} too high")
    return result.point


def triangulate(track: FeatureTrack, window: SlidingWindow,
                intr: CameraIntrinsics, cfg: DepthConfig | None = None) -> float:
    """Two-view DLT depth (in the first observed frame) from the widest
    observation pair in the window; requires the parallax gate to pass."""
    cfg = cfg or DepthConfig()
    observed = [k for k in range(len(window.frames)) if window.frames[k] in track.observations]
    if len(observed) < 2:
        raise ParallaxError("need two observations to triangulate")
    first, last = observed[0], observed[-1]
    px = parallax(track, window.frames[first], window.frames[last])
    if not (px > cfg.parallax_gate_px):
        raise ParallaxError(f"parallax {px:.2f} px does not exceed "
                            f"{cfg.parallax_gate_px} px")
    ray_f = intr.ray(track.observations[window.frames[first]])
    ray_l = intr.ray(track.observations[window.frames[last]])
    rel = compose(window.poses[first], inverse(window.poses[last]))  # first -> last
    P2 = np.hstack([rel.rotation, rel.translation[:, None]])
    A = np.array([
        [-1.0, 0.0, ray_f[0], 0.0],
        [0.0, -1.0, ray_f[1], 0.0],
        ray_l[0] * P2[2] - P2[0],
        ray_l[1] * P2[2] - P2[1],
    ])
    _, _, vt = np.linalg.svd(A)
    X = vt[-1]
    if abs(X[3]) < 1e-12:
        raise ParallaxError("triangulated point at infinity")
    p_first = X[:3] / X[3]
    if p_first[2] <= 0.0 or rel.apply(p_first)[2] <= 0.0:
        raise CheiralityError("triangulated point behind a camera")
    return float(p_first[2])


def transfer_depth(depth: float, track: FeatureTrack, window: SlidingWindow,
                   from_frame: int, to_frame: int,
                   intr: CameraIntrinsics) -> float:
    """Re-express a feature depth in another window frame (z-component
    of the rigidly transported point)."""
    p_from = depth * intr.ray(track.observations[from_frame])
    rel = compose(window.pose_of(from_frame), inverse(window.pose_of(to_frame)))
    z = float(rel.apply(p_from)[2])
    if z <= 0.0:
        raise CheiralityError(f"transferred depth {z:.3f} is behind frame {to_frame}")
    return z


def depth_residual(depth: float, track: FeatureTrack, window: SlidingWindow,
                   ref_position: int, obs_position: int,
                   intr: CameraIntrinsics) -> np.ndarray:
    """Reprojection error (2,) of the ref-frame depth in another frame."""
    ref_frame = window.frames[ref_position]
    obs_frame = window.frames[obs_position]
    p_ref = depth * intr.ray(track.observations[ref_frame])
    rel = compose(window.poses[ref_position], inverse(window.poses[obs_position]))
    predicted = project(intr, rel.apply(p_ref))
    observed = track.observations[obs_frame]
    return np.array([predicted.u - observed.u, predicted.v - observed.v])


def optimize_depth(track: FeatureTrack, window: SlidingWindow,
                   intr: CameraIntrinsics, d_init: float,
                   cfg: DepthConfig | None = None) -> float:
    """Scalar Levenberg-Marquardt refinement of a reference-frame depth.

    Minimizes the stacked reprojection error of the windowed
    observations; the returned depth never has higher cost than the
    initial value.
    """
    cfg = cfg or DepthConfig()
    observed = [k for k in range(len(window.frames)) if window.frames[k] in track.observations]
    if len(observed) < 3:
        raise ValueError("need the reference and at least two residual frames")
    ref = observed[0]
    residual_positions = observed[1:]
    ray_ref = intr.ray(track.observations[window.frames[ref]])
    rels = [compose(window.poses[ref], inverse(window.poses[k])) for k in residual_positions]
    targets = [track.observations[window.frames[k]] for k in residual_positions]

    def evaluate(d):
        """(cost, gradient, gauss-newton hessian) or None behind a camera."""
        cost = 0.0
        g = 0.0
        h = 0.0
        for rel, obs in zip(rels, targets):
            p = rel.apply(d * ray_ref)
            if p[2] <= 0.0:
                return None
            m = rel.rotation @ ray_ref       # dp/dd
            z2 = p[2] * p[2]
            ju = intr.fx * (m[0] * p[2] - p[0] * m[2]) / z2
            jv = intr.fy * (m[1] * p[2] - p[1] * m[2]) / z2
            ru = intr.fx * p[0] / p[2] + intr.cx - obs.u
            rv = intr.fy * p[1] / p[2] + intr.cy - obs.v
            cost += ru * ru + rv * rv
            g += ju * ru + jv * rv
            h += ju * ju + jv * jv
        return cost, g, h

    state = evaluate(d_init)
    if state is None:
        raise CheiralityError("initial depth places the point behind a window camera")
    cost, g, h = state
    d = d_init
    lam = 1e-4
    for _ in range(cfg.lm_max_iterations):
        if abs(g) < cfg.lm_grad_tol:
            break
        step = -g / (h + lam * h + 1e-300)
        trial = d + step
        trial_state = evaluate(trial) if trial > 0.0 else None
        if trial_state is not None and trial_state[0] < cost:
            d = trial
            cost, g, h = trial_state
            lam = max(lam / 3.0, 1e-12)
            if abs(step) < cfg.lm_step_tol:
                break
        else:
            lam *= 9.0
            if lam > 1e12:
                break
    return float(d)


# step_window outcomes
WINDOW_APPENDED = "appended"
WINDOW_SLID = "slid"
WINDOW_UNCHANGED = "unchanged"


def step_window(window: SlidingWindow, track: FeatureTrack, est: DepthEstimate,
                new_frame: int, new_pose: Pose, intr: CameraIntrinsics,
                cfg: DepthConfig | None = None) -> str:
    """Advance a track's depth window by one observed frame.

    Below capacity the frame is simply appended.  At capacity the new
    frame must exceed the parallax gate against the newest window
    frame; the refined depth is then transported to the next reference
    frame and the oldest frame is dropped.
    """
    cfg = cfg or DepthConfig()
    if not window.full:
        window.append(new_frame, new_pose)
        return WINDOW_APPENDED
    px = parallax(track, window.frames[-1], new_frame)
    if not (px > cfg.parallax_gate_px):
        return WINDOW_UNCHANGED
    if est.d_opt is None:
        raise ValueError("cannot slide a window before the depth was optimized")
    new_ref = window.frames[1]
    d_next = transfer_depth(est.d_opt, track, window, est.ref_frame, new_ref, intr)
    window.frames.pop(0)
    window.poses.pop(0)
    window.append(new_frame, new_pose)
    est.ref_frame = new_ref
    est.d_init = d_next
    est.d_opt = None
    est.transported = True
    return WINDOW_SLID


def finalize_map_point(track: FeatureTrack, window: SlidingWindow,
                       est: DepthEstimate, intr: CameraIntrinsics,
                       cfg: DepthConfig | None = None) -> MapPoint:
    """Anchor a converged depth as a fixed world-frame landmark."""
    cfg = cfg or DepthConfig()
    if est.d_opt is None or not (est.delta < cfg.depth_gate_m):
        raise ValueError(f"depth not converged (delta {est.delta:.3f} m)")
    pose = window.pose_of(est.ref_frame)
    p_world = pose.apply(est.d_opt * intr.ray(track.observations[est.ref_frame]))
    return MapPoint(p_world, track.track_id, est.ref_frame)


def refine_point(p_world: np.ndarray, track: FeatureTrack, window: SlidingWindow,
                 intr: CameraIntrinsics, iterations: int = 5) -> np.ndarray:
    """Full 3-dof Gauss-Newton polish of a landmark over the window.

    A depth estimate keeps the landmark on the ray through its reference
    pixel, so that pixel's noise is frozen into the point.  Re-solving
    for the point itself (poses held fixed) spreads the error over every
    windowed observation instead.
    """
    obs = [(track.observations[f], window.pose_of(f))
           for f in window.frames if f in track.observations]
    if len(obs) < 2:
        return np.asarray(p_world, dtype=float)
    p = np.asarray(p_world, dtype=float).copy()
    best = p.copy()
    best_cost = np.inf
    for _ in range(iterations):
        JtJ = np.zeros((3, 3))
        Jtr = np.zeros(3)
        cost = 0.0
        for px, pose in obs:
            p_cam = pose.rotation.T @ (p - pose.translation)
            x, y, z = p_cam
            if z <= 1e-6:
                return best if np.isfinite(best_cost) else np.asarray(p_world, float)
            r = np.array([intr.fx * x / z + intr.cx - px.u,
                          intr.fy * y / z + intr.cy - px.v])
            Jc = np.array([[intr.fx / z, 0.0, -intr.fx * x / z ** 2],
                           [0.0, intr.fy / z, -intr.fy * y / z ** 2]])
            J = Jc @ pose.rotation.T
            JtJ += J.T @ J
            Jtr += J.T @ r
            cost += float(r @ r)
        if cost < best_cost:
            best_cost = cost
            best = p.copy()
        try:
            step = np.linalg.solve(JtJ + 1e-9 * np.eye(3), -Jtr)
        except np.linalg.LinAlgError:
            break
        p = p + step
        if np.linalg.norm(step) < 1e-10:
            break
    # keep the final iterate if it still lowered the cost
    final_cost = 0.0
    for px, pose in obs:
        p_cam = pose.rotation.T @ (p - pose.translation)
        if p_cam[2] <= 1e-6:
            return best
        u = intr.fx * p_cam[0] / p_cam[2] + intr.cx
        v = intr.fy * p_cam[1] / p_cam[2] + intr.cy
        final_cost += (u - px.u) ** 2 + (v - px.v) ** 2
    return p if final_cost <= best_cost else best
