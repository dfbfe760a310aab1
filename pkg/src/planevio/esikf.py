"""Iterated error-state Kalman filter on the IMU manifold.

State: body-to-world rotation, position, velocity, accelerometer bias,
gyro bias. The 15-dim error state is ordered (dtheta, dp, dv, dba, dbg)
with a right-multiplicative rotation error: R_true = R * exp(dtheta^).

The update fuses pixel reprojection residuals of two kinds against one
stacked Jacobian: tracked feature points with estimated depth, and plane
centroids from the voxel map. Both share the same reprojection model and
differ only in measurement variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pixel,
    Pose,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inverse,
)

STATE_DIM = 15
# error-state slices
TH = slice(0, 3)
DP = slice(3, 6)
DV = slice(6, 9)
BA = slice(9, 12)
BG = slice(12, 15)


@dataclass
class NavState:
    rotation: np.ndarray      # body-to-world
    position: np.ndarray
    velocity: np.ndarray
    accel_bias: np.ndarray
    gyro_bias: np.ndarray

    @staticmethod
    def identity() -> "NavState":
        return NavState(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))

    def pose(self) -> Pose:
        """Body-to-world pose of the state."""
        return Pose(self.rotation.copy(), self.position.copy())

    def copy(self) -> "NavState":
        return NavState(self.rotation.copy(), self.position.copy(),
                        self.velocity.copy(), self.accel_bias.copy(),
                        self.gyro_bias.copy())


def boxplus(state: NavState, delta: np.ndarray) -> NavState:
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (STATE_DIM,):
        raise ValueError(f"error state must have shape (15,), got {delta.shape}")
    return NavState(state.rotation @ so3_exp(delta[TH]),
                    state.position + delta[DP],
                    state.velocity + delta[DV],
                    state.accel_bias + delta[BA],
                    state.gyro_bias + delta[BG])


def boxminus(a: NavState, b: NavState) -> np.ndarray:
    """Error vector d with a = b [+] d."""
    d = np.empty(STATE_DIM)
    d[TH] = so3_log(b.rotation.T @ a.rotation)
    d[DP] = a.position - b.position
    d[DV] = a.velocity - b.velocity
    d[BA] = a.accel_bias - b.accel_bias
    d[BG] = a.gyro_bias - b.gyro_bias
    return d


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: np.ndarray   # specific force, body frame
    gyro: np.ndarray    # angular rate, body frame


@dataclass
class FilterConfig:
    gravity: float = 9.81
    gyro_noise: float = 2e-3          # rad/s/sqrt(Hz)
    accel_noise: float = 2e-2         # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 1e-5      # rad/s^2/sqrt(Hz)
    accel_bias_walk: float = 1e-4     # m/s^3/sqrt(Hz)
    feature_variance_px2: float = 1.0
    centroid_variance_px2: float = 2.0
    max_iterations: int = 5
    convergence_tol: float = 1e-6
    min_depth: float = 1e-6

    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])


def propagate_state(state: NavState, s0: ImuSample, s1: ImuSample,
                    cfg: FilterConfig) -> NavState:
    """Midpoint IMU integration over [s0.t, s1.t]."""
    dt = s1.t - s0.t
    if dt <= 0.0:
        raise ValueError(f"non-increasing imu timestamps: {s0.t} -> {s1.t}")
    omega = 0.5 * (np.asarray(s0.gyro) + np.asarray(s1.gyro)) - state.gyro_bias
    R0 = state.rotation
    R1 = R0 @ so3_exp(omega * dt)
    a0 = np.asarray(s0.accel) - state.accel_bias
    a1 = np.asarray(s1.accel) - state.accel_bias
    a_w = 0.5 * (R0 @ a0 + R1 @ a1) + cfg.gravity_vector()
    return NavState(R1,
                    state.position + state.velocity * dt + 0.5 * a_w * dt * dt,
                    state.velocity + a_w * dt,
                    state.accel_bias.copy(),
                    state.gyro_bias.copy())


def error_transition(state: NavState, s0: ImuSample, s1: ImuSample,
                     cfg: FilterConfig) -> tuple[np.ndarray, np.ndarray]:
    """Discrete error-state transition F and process noise Q for one step."""
    dt = s1.t - s0.t
    if dt <= 0.0:
        raise ValueError(f"non-increasing imu timestamps: {s0.t} -> {s1.t}")
    omega = 0.5 * (np.asarray(s0.gyro) + np.asarray(s1.gyro)) - state.gyro_bias
    phi = omega * dt
    E = so3_exp(phi)
    Jr = so3_right_jacobian(phi)
    R0 = state.rotation
    R1 = R0 @ E
    a0 = np.asarray(s0.accel) - state.accel_bias
    a1 = np.asarray(s1.accel) - state.accel_bias

    F = np.eye(STATE_DIM)
    F[TH, TH] = E.T
    F[TH, BG] = -Jr * dt
    # velocity: d a_w / d(dtheta) through both endpoint rotations
    Avth = -0.5 * dt * R0 @ skew(a0 + E @ a1)
    Avba = -0.5 * dt * (R0 + R1)
    Avbg = 0.5 * dt * dt * R1 @ skew(a1) @ Jr
    F[DV, TH] = Avth
    F[DV, BA] = Avba
    F[DV, BG] = Avbg
    F[DP, DV] = np.eye(3) * dt
    F[DP, TH] = 0.5 * dt * Avth
    F[DP, BA] = 0.5 * dt * Avba
    F[DP, BG] = 0.5 * dt * Avbg

    Q = np.zeros((STATE_DIM, STATE_DIM))
    Q[TH, TH] = cfg.gyro_noise ** 2 * dt * np.eye(3)
    Q[DV, DV] = cfg.accel_noise ** 2 * dt * np.eye(3)
    Q[BA, BA] = cfg.accel_bias_walk ** 2 * dt * np.eye(3)
    Q[BG, BG] = cfg.gyro_bias_walk ** 2 * dt * np.eye(3)
    return F, Q


def propagate(state: NavState, cov: np.ndarray, s0: ImuSample, s1: ImuSample,
              cfg: FilterConfig) -> tuple[NavState, np.ndarray]:
    """One IMU step: mean through the midpoint model, covariance FPF^T + Q."""
    F, Q = error_transition(state, s0, s1, cfg)
    cov = F @ cov @ F.T + Q
    return propagate_state(state, s0, s1, cfg), 0.5 * (cov + cov.T)


def pose_update(state: NavState, cov: np.ndarray, meas: Pose,
                rot_var: float, trans_var: float) -> tuple[NavState, np.ndarray]:
    """Kalman update on a direct body-pose measurement (scan registration).

    The innovation is (log(R^T R_m), p_m - p) against the (rotation,
    position) blocks of the error state; a single linear step suffices
    for the small residuals a registration source produces.
    """
    z = np.concatenate([so3_log(state.rotation.T @ meas.rotation),
                        meas.translation - state.position])
    H = np.zeros((6, STATE_DIM))
    H[0:3, TH] = np.eye(3)
    H[3:6, DP] = np.eye(3)
    R = np.diag([max(rot_var, 0.0)] * 3 + [max(trans_var, 0.0)] * 3)
    S = H @ cov @ H.T + R
    K = cov @ H.T @ np.linalg.inv(S)
    post = (np.eye(STATE_DIM) - K @ H) @ cov
    return boxplus(state, K @ z), 0.5 * (post + post.T)


@dataclass(frozen=True)
class ReprojectionTerm:
    world_point: np.ndarray
    pixel: Pixel


@dataclass
class HybridMeasurement:
    features: list = field(default_factory=list)
    centroids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.features) + len(self.centroids)


def project_centroids(state: NavState, centroids, extrinsic: Pose,
                      intr: CameraIntrinsics, width: int, height: int,
                      margin: float = 0.0, min_depth: float = 1e-6):
    """Predicted pixels of map-plane centroids under a state.

    Returns (centroid, Pixel) pairs for centroids in front of the camera
    and inside the image (shrunk by `margin` on all sides).
    """
    body_from_world = state.pose()
    out = []
    for c in centroids:
        p_body = body_from_world.rotation.T @ (c.position - body_from_world.translation)
        p_cam = extrinsic.rotation.T @ (p_body - extrinsic.translation)
        if p_cam[2] <= min_depth:
            continue
        u = intr.fx * p_cam[0] / p_cam[2] + intr.cx
        v = intr.fy * p_cam[1] / p_cam[2] + intr.cy
        if margin <= u <= width - 1 - margin and margin <= v <= height - 1 - margin:
            out.append((c, Pixel(u, v)))
    return out


def evaluate_terms(state: NavState, terms, extrinsic: Pose,
                   intr: CameraIntrinsics, min_depth: float):
    """Residuals (predicted - measured) and Jacobians for reprojection terms.

    Terms whose point falls behind the camera get zeroed rows (no
    information) and are reported in the dropped count.
    """
    m = len(terms)
    z = np.zeros(2 * m)
    H = np.zeros((2 * m, STATE_DIM))
    dropped = 0
    R = state.rotation
    t = state.position
    RE = extrinsic.rotation
    for i, term in enumerate(terms):
        p_body = R.T @ (term.world_point - t)
        p_cam = RE.T @ (p_body - extrinsic.translation)
        x, y, zc = p_cam
        if zc <= min_depth:
            dropped += 1
            continue
        r = 2 * i
        z[r] = intr.fx * x / zc + intr.cx - term.pixel.u
        z[r + 1] = intr.fy * y / zc + intr.cy - term.pixel.v
        J_px = np.array([[intr.fx / zc, 0.0, -intr.fx * x / (zc * zc)],
                         [0.0, intr.fy / zc, -intr.fy * y / (zc * zc)]])
        H[r:r + 2, TH] = J_px @ (RE.T @ skew(p_body))
        H[r:r + 2, DP] = J_px @ (-RE.T @ R.T)
    return z, H, dropped


@dataclass
class UpdateResult:
    state: NavState
    covariance: np.ndarray
    iterations: int
    converged: bool
    degraded: bool
    dropped_terms: int
    costs: list


def iterated_update(prior: NavState, cov: np.ndarray, meas: HybridMeasurement,
                    extrinsic: Pose, intr: CameraIntrinsics,
                    cfg: FilterConfig | None = None) -> UpdateResult:
    """Gauss-Newton iteration of the manifold Kalman update.

    Each pass relinearizes the residual stack at the current estimate and
    solves (H^T R^-1 H + Pj^-1) dx = -(H^T R^-1 z + Hc^T P^-1 b) where
    Pj = Hc^-1 P Hc^-T accounts for the boxminus Jacobian Hc between the
    iterate and the prior. The posterior covariance is the final inverse
    normal matrix.
    """
    cfg = cfg or FilterConfig()
    terms = list(meas.features) + list(meas.centroids)
    n_rows = 2 * len(terms)
    if n_rows == 0:
        return UpdateResult(prior.copy(), cov.copy(), 0, True, False, 0, [])

    r_inv = np.empty(n_rows)
    r_inv[:2 * len(meas.features)] = 1.0 / cfg.feature_variance_px2
    r_inv[2 * len(meas.features):] = 1.0 / cfg.centroid_variance_px2

    try:
        P_inv = np.linalg.inv(cov)
    except np.linalg.LinAlgError:
        return UpdateResult(prior.copy(), cov.copy(), 0, False, True, 0, [])

    x = prior.copy()
    costs = []
    dropped = 0
    converged = False
    iterations = 0
    S = None
    for iterations in range(1, cfg.max_iterations + 1):
        z, H, dropped = evaluate_terms(x, terms, extrinsic, intr, cfg.min_depth)
        phi = so3_log(prior.rotation.T @ x.rotation)
        b = boxminus(x, prior)
        Hc = np.eye(STATE_DIM)
        Hc[TH, TH] = so3_right_jacobian_inverse(phi)
        P_check_inv = Hc.T @ P_inv @ Hc
        HtRi = H.T * r_inv
        S = HtRi @ H + P_check_inv
        rhs = HtRi @ z + Hc.T @ (P_inv @ b)
        costs.append(float(z @ (r_inv * z) + b @ (P_inv @ b)))
        try:
            dx = -np.linalg.solve(S, rhs)
        except np.linalg.LinAlgError:
            return UpdateResult(prior.copy(), cov.copy(), iterations, False,
                                True, dropped, costs)
        if not np.isfinite(dx).all():
            return UpdateResult(prior.copy(), cov.copy(), iterations, False,
                                True, dropped, costs)
        x = boxplus(x, dx)
        if np.linalg.norm(dx) < cfg.convergence_tol:
            converged = True
            break

    try:
        post = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        return UpdateResult(prior.copy(), cov.copy(), iterations, False,
                            True, dropped, costs)
    return UpdateResult(x, 0.5 * (post + post.T), iterations, converged,
                        False, dropped, costs)
