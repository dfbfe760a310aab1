"""Synthetic world generation: planes, trajectories, sensors.

A scene is a set of bounded textured rectangles plus a parametric body
trajectory. Sensors are derived analytically: IMU samples come from the
trajectory's exact derivatives (plus configured bias and noise), images
from ray-plane intersection against procedural textures, LiDAR scans
from points sampled on front-facing rectangles.

Textures are seeded random grids low-pass filtered once, then sampled
bilinearly; the grid cell (0.4 m) keeps image-space frequencies low
enough for a 4-level tracking pyramid at the scene depths used here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter

from .dataset import ConfigError, Dataset, Trajectory, validate
from .esikf import ImuSample
from .frontend import GrayImage
from .geometry import CameraIntrinsics, Pose, compose, so3_exp


def _vec(x, n, name):
    a = np.asarray(x, dtype=float)
    if a.shape != (n,):
        raise ConfigError(f"{name} must have {n} entries, got shape {a.shape}")
    return a


@dataclass
class PlaneSpec:
    center: np.ndarray
    normal: np.ndarray
    extent: tuple            # half-sizes along the two in-plane axes
    texture_seed: int = 0

    def __post_init__(self):
        self.center = _vec(self.center, 3, "plane center")
        self.normal = _vec(self.normal, 3, "plane normal")
        n = np.linalg.norm(self.normal)
        if n == 0:
            raise ConfigError("plane normal must be nonzero")
        self.normal = self.normal / n
        if len(self.extent) != 2 or min(self.extent) <= 0:
            raise ConfigError(f"plane extent must be two positive half-sizes, "
                              f"got {self.extent}")
        self.extent = (float(self.extent[0]), float(self.extent[1]))


def plane_basis(normal: np.ndarray) -> tuple:
    """Deterministic in-plane axes (u, v) completing the normal."""
    n = np.asarray(normal, dtype=float)
    ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(ref, n)
    u = u / np.linalg.norm(u)
    return u, np.cross(n, u)


class PlaneTexture:
    """Seeded blob pattern on a plane rectangle, smoothed once."""

    CELL = 0.4  # metres per texture cell

    def __init__(self, plane: PlaneSpec):
        self.plane = plane
        self.u, self.v = plane_basis(plane.normal)
        e0, e1 = plane.extent
        n0 = max(int(math.ceil(2 * e0 / self.CELL)) + 4, 8)
        n1 = max(int(math.ceil(2 * e1 / self.CELL)) + 4, 8)
        rng = np.random.default_rng(plane.texture_seed)
        grid = gaussian_filter(rng.uniform(0.0, 1.0, (n0, n1)), sigma=1.2,
                               mode="nearest")
        lo, hi = grid.min(), grid.max()
        self.grid = 0.1 + 0.8 * (grid - lo) / max(hi - lo, 1e-12)
        self.origin = (-e0 - 2 * self.CELL, -e1 - 2 * self.CELL)

    def sample(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Bilinear texture lookup at in-plane coordinates (clamped)."""
        gs = np.clip((s - self.origin[0]) / self.CELL, 0.0,
                     self.grid.shape[0] - 1.000001)
        gt = np.clip((t - self.origin[1]) / self.CELL, 0.0,
                     self.grid.shape[1] - 1.000001)
        i0 = gs.astype(int)
        j0 = gt.astype(int)
        fi = gs - i0
        fj = gt - j0
        g = self.grid
        return ((1 - fi) * (1 - fj) * g[i0, j0] + fi * (1 - fj) * g[i0 + 1, j0]
                + (1 - fi) * fj * g[i0, j0 + 1] + fi * fj * g[i0 + 1, j0 + 1])


@dataclass
class CircleSpec:
    center: np.ndarray
    radius: float
    period: float
    phase: float = 0.0

    def __post_init__(self):
        self.center = _vec(self.center, 3, "circle center")
        if self.radius <= 0 or self.period <= 0:
            raise ConfigError("circle radius and period must be positive")


@dataclass
class WaypointSpec:
    times: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float)
        if self.times.ndim != 1 or len(self.times) < 4:
            raise ConfigError("waypoints need at least 4 stamped points")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("waypoint times must be strictly increasing")
        if self.points.shape != (len(self.times), 3):
            raise ConfigError("waypoint points must be (N, 3)")


def _yaw_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class CircleTrajectory:
    """Constant-speed circle, body x along the velocity, z up."""

    def __init__(self, spec: CircleSpec):
        self.spec = spec
        self.omega = 2.0 * math.pi / spec.period

    def _theta(self, t: float) -> float:
        return self.omega * t + self.spec.phase

    def pose(self, t: float) -> Pose:
        th = self._theta(t)
        r = self.spec.radius
        p = self.spec.center + r * np.array([math.cos(th), math.sin(th), 0.0])
        return Pose(_yaw_rotation(th + 0.5 * math.pi), p)

    def velocity(self, t: float) -> np.ndarray:
        th = self._theta(t)
        rv = self.spec.radius * self.omega
        return rv * np.array([-math.sin(th), math.cos(th), 0.0])

    def omega_body(self, t: float) -> np.ndarray:
        return np.array([0.0, 0.0, self.omega])

    def accel_body(self, t: float, gravity: float) -> np.ndarray:
        # centripetal acceleration points body-left; gravity reaction up
        return np.array([0.0, self.spec.radius * self.omega ** 2, gravity])


class SplineTrajectory:
    """Cubic-spline position with tangent yaw; roll and pitch stay zero."""

    def __init__(self, spec: WaypointSpec):
        self.spline = CubicSpline(spec.times, spec.points, axis=0)
        self.d1 = self.spline.derivative(1)
        self.d2 = self.spline.derivative(2)
        self.d3 = self.spline.derivative(3)

    def _yaw(self, t: float) -> float:
        v = self.d1(t)
        if np.hypot(v[0], v[1]) < 1e-9:
            raise ConfigError(f"degenerate heading at t={t}: planar speed ~ 0")
        return math.atan2(v[1], v[0])

    def pose(self, t: float) -> Pose:
        return Pose(_yaw_rotation(self._yaw(t)), np.asarray(self.spline(t)))

    def velocity(self, t: float) -> np.ndarray:
        return np.asarray(self.d1(t))

    def omega_body(self, t: float) -> np.ndarray:
        v, a = self.d1(t), self.d2(t)
        sq = v[0] ** 2 + v[1] ** 2
        if sq < 1e-18:
            raise ConfigError(f"degenerate heading at t={t}: planar speed ~ 0")
        return np.array([0.0, 0.0, (v[0] * a[1] - v[1] * a[0]) / sq])

    def accel_body(self, t: float, gravity: float) -> np.ndarray:
        a_w = np.asarray(self.d2(t)) - np.array([0.0, 0.0, -gravity])
        return self.pose(t).rotation.T @ a_w


@dataclass
class NoiseSpec:
    pixel_sigma: float = 0.0      # per-frame smooth warp-field amplitude, px
    range_sigma: float = 0.0      # LiDAR range noise, m
    accel_sigma: float = 0.0      # per-sample accel noise, m/s^2
    gyro_sigma: float = 0.0       # per-sample gyro noise, rad/s
    lis_pos_sigma: float = 0.0    # scan-pose position noise, m
    lis_rot_sigma: float = 0.0    # scan-pose rotation noise, rad


@dataclass
class SceneConfig:
    planes: list
    trajectory: object            # CircleSpec or WaypointSpec
    duration: float = 30.0
    imu_hz: float = 200.0
    cam_hz: float = 10.0
    lidar_hz: float = 10.0
    image_width: int = 256
    image_height: int = 256
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(350.0, 350.0, 128.0, 128.0))
    cam_to_body: Pose = field(default_factory=lambda: Pose(
        np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]),
        np.array([0.1, 0.0, 0.05])))
    lidar_to_body: Pose = field(default_factory=lambda: Pose(
        np.eye(3), np.array([0.0, 0.0, 0.12])))
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    true_accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    true_gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    points_per_scan: int = 1200
    gravity: float = 9.81

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        for name in ("imu_hz", "cam_hz", "lidar_hz"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.planes:
            raise ConfigError("scene needs at least one plane")
        self.true_accel_bias = _vec(self.true_accel_bias, 3, "true_accel_bias")
        self.true_gyro_bias = _vec(self.true_gyro_bias, 3, "true_gyro_bias")

    def make_trajectory(self):
        if isinstance(self.trajectory, CircleSpec):
            return CircleTrajectory(self.trajectory)
        return SplineTrajectory(self.trajectory)


def _pose_from_dict(d: dict) -> Pose:
    return Pose(np.asarray(d["rotation"], dtype=float).reshape(3, 3),
                np.asarray(d["translation"], dtype=float))


def scene_config_from_dict(d: dict) -> SceneConfig:
    d = dict(d)
    try:
        traj = dict(d.pop("trajectory"))
        kind = traj.pop("kind")
        if kind == "circle":
            trajectory = CircleSpec(**traj)
        elif kind == "waypoints":
            trajectory = WaypointSpec(**traj)
        else:
            raise ConfigError(f"unknown trajectory kind {kind!r}")
        planes = [PlaneSpec(**p) for p in d.pop("planes")]
        if "intrinsics" in d:
            d["intrinsics"] = CameraIntrinsics(**d.pop("intrinsics"))
        for key in ("cam_to_body", "lidar_to_body"):
            if key in d:
                d[key] = _pose_from_dict(d.pop(key))
        if "noise" in d:
            d["noise"] = NoiseSpec(**d.pop("noise"))
        return SceneConfig(planes=planes, trajectory=trajectory, **d)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"bad scene config: {e}") from None


def load_scene_config(path) -> SceneConfig:
    with open(path) as f:
        return scene_config_from_dict(json.load(f))


def box_room_config(**overrides) -> SceneConfig:
    """A 16 x 16 x 8 m room (six inward-facing planes) with a circular
    trajectory inside it. The default true IMU biases are nonzero so that
    raw dead reckoning drifts while the filter can estimate them."""
    half, height = 8.0, 8.0
    hz = height / 2.0
    planes = [
        PlaneSpec(center=[half, 0.0, hz], normal=[-1.0, 0.0, 0.0],
                  extent=(half, hz), texture_seed=1),
        PlaneSpec(center=[-half, 0.0, hz], normal=[1.0, 0.0, 0.0],
                  extent=(half, hz), texture_seed=2),
        PlaneSpec(center=[0.0, half, hz], normal=[0.0, -1.0, 0.0],
                  extent=(half, hz), texture_seed=3),
        PlaneSpec(center=[0.0, -half, hz], normal=[0.0, 1.0, 0.0],
                  extent=(half, hz), texture_seed=4),
        PlaneSpec(center=[0.0, 0.0, 0.0], normal=[0.0, 0.0, 1.0],
                  extent=(half, half), texture_seed=5),
        PlaneSpec(center=[0.0, 0.0, height], normal=[0.0, 0.0, -1.0],
                  extent=(half, half), texture_seed=6),
    ]
    base = dict(
        planes=planes,
        trajectory=CircleSpec(center=[0.0, 0.0, 1.2], radius=3.5, period=20.0),
        duration=30.0,
        true_accel_bias=np.array([0.02, -0.01, 0.015]),
        true_gyro_bias=np.array([0.002, -0.001, 0.0015]),
    )
    base.update(overrides)
    return SceneConfig(**base)


_WARP_CELLS = 12


def _bilinear_upsample(grid: np.ndarray, width: int, height: int) -> np.ndarray:
    """Stretch a small (rows, cols) grid over a (height, width) image."""
    rows, cols = grid.shape[0] - 1, grid.shape[1] - 1
    u = np.linspace(0.0, cols, width)
    v = np.linspace(0.0, rows, height)
    iu = np.minimum(u.astype(int), cols - 1)
    iv = np.minimum(v.astype(int), rows - 1)
    fu, fv = u - iu, v - iv
    g00 = grid[np.ix_(iv, iu)]
    g01 = grid[np.ix_(iv, iu + 1)]
    g10 = grid[np.ix_(iv + 1, iu)]
    g11 = grid[np.ix_(iv + 1, iu + 1)]
    return (g00 * (1 - fv)[:, None] * (1 - fu)[None, :]
            + g01 * (1 - fv)[:, None] * fu[None, :]
            + g10 * fv[:, None] * (1 - fu)[None, :]
            + g11 * fv[:, None] * fu[None, :])


def warp_field(rng: np.random.Generator, width: int, height: int,
               sigma: float) -> tuple:
    """Smooth per-frame pixel displacement field (the pixel noise model).

    A coarse Gaussian grid upsampled over the image: nearby pixels shift
    together while patches tens of pixels apart move almost
    independently, so observation errors decorrelate across features
    instead of acting as a single common shift.
    """
    coarse = rng.normal(0.0, 1.0, (2, _WARP_CELLS + 1, _WARP_CELLS + 1)) * sigma
    return (_bilinear_upsample(coarse[0], width, height),
            _bilinear_upsample(coarse[1], width, height))


def render_view(cam_pose: Pose, intr: CameraIntrinsics, width: int, height: int,
                textures: list, warp=None, background: float = 0.5,
                near: float = 0.05, rng=None) -> GrayImage:
    """Ray-cast the textured planes into an 8-bit image.

    `warp` is an optional (du, dv) pair of (height, width) displacement
    fields in pixels: the scene content that truly projects to p is
    drawn near p + δ(p), like shimmer in front of the lens.  `rng`, if
    given, dithers the shade before the 8-bit rounding: on these smooth
    textures a bare quantization boundary is a contour-shaped artifact
    that trackers lock onto with a systematic subpixel offset, while the
    dithered error is white and averages out (it also stands in for
    sensor shot noise).
    """
    v_px, u_px = np.mgrid[0:height, 0:width].astype(float)
    if warp is not None:
        u_px = u_px - warp[0]
        v_px = v_px - warp[1]
    rays = np.stack([(u_px.ravel() - intr.cx) / intr.fx,
                     (v_px.ravel() - intr.cy) / intr.fy,
                     np.ones(width * height)])
    d = cam_pose.rotation @ rays            # (3, N) in world
    o = cam_pose.translation
    depth = np.full(width * height, np.inf)
    shade = np.full(width * height, background)
    for tex in textures:
        p = tex.plane
        denom = p.normal @ d
        ok = np.abs(denom) > 1e-12
        t_hit = np.where(ok, ((p.center - o) @ p.normal) / np.where(ok, denom, 1.0),
                         np.inf)
        ok &= (t_hit > near) & (t_hit < depth)
        if not ok.any():
            continue
        pts = o[:, None] + d[:, ok] * t_hit[ok]
        rel = pts - p.center[:, None]
        s = tex.u @ rel
        t = tex.v @ rel
        inside = (np.abs(s) <= p.extent[0]) & (np.abs(t) <= p.extent[1])
        idx = np.flatnonzero(ok)[inside]
        shade[idx] = tex.sample(s[inside], t[inside])
        depth[idx] = t_hit[ok][inside]
    if rng is not None:
        shade = shade + (rng.random(shade.shape) - 0.5) / 255.0
    img = np.round(np.clip(shade, 0.0, 1.0) * 255.0).astype(np.uint8)
    return GrayImage.from_bytes(img.reshape(height, width))


def sample_scan(sensor_pose: Pose, planes: list, n_points: int,
                rng: np.random.Generator, range_sigma: float = 0.0) -> np.ndarray:
    """Points on front-facing rectangles, in the sensor frame.

    Back faces are culled: a rectangle only returns points when its
    normal points toward the sensor. Rooms are convex here, so no
    occlusion test is needed.
    """
    o = sensor_pose.translation
    per = [n_points // len(planes)] * len(planes)
    for i in range(n_points - sum(per)):
        per[i] += 1
    pts_w = []
    for plane, n in zip(planes, per):
        u, v = plane_basis(plane.normal)
        s = rng.uniform(-plane.extent[0], plane.extent[0], n)
        t = rng.uniform(-plane.extent[1], plane.extent[1], n)
        if (o - plane.center) @ plane.normal <= 0.0:
            continue  # back face
        p = plane.center[None, :] + s[:, None] * u[None, :] + t[:, None] * v[None, :]
        if range_sigma > 0.0:
            ray = p - o[None, :]
            dist = np.linalg.norm(ray, axis=1, keepdims=True)
            p = p + ray / np.maximum(dist, 1e-9) * rng.normal(
                0.0, range_sigma, (n, 1))
        pts_w.append(p)
    if not pts_w:
        return np.zeros((0, 3))
    pts_w = np.vstack(pts_w)
    # into the sensor frame
    return (sensor_pose.rotation.T @ (pts_w - o).T).T


def _stamps(duration: float, hz: float) -> np.ndarray:
    n = int(round(duration * hz))
    return np.arange(n + 1) / hz


def generate_scene(cfg: SceneConfig, seed: int) -> Dataset:
    """Deterministic synthetic dataset for a scene config and seed."""
    rng = np.random.default_rng(seed)
    traj = cfg.make_trajectory()
    textures = [PlaneTexture(p) for p in cfg.planes]

    imu_times = _stamps(cfg.duration, cfg.imu_hz)
    gt_poses = [traj.pose(t) for t in imu_times]
    accel_noise = rng.normal(0.0, 1.0, (len(imu_times), 3)) * cfg.noise.accel_sigma
    gyro_noise = rng.normal(0.0, 1.0, (len(imu_times), 3)) * cfg.noise.gyro_sigma
    imu = [ImuSample(float(t),
                     traj.accel_body(t, cfg.gravity) + cfg.true_accel_bias + na,
                     traj.omega_body(t) + cfg.true_gyro_bias + ng)
           for t, na, ng in zip(imu_times, accel_noise, gyro_noise)]

    images = []
    for t in _stamps(cfg.duration, cfg.cam_hz):
        warp = warp_field(rng, cfg.image_width, cfg.image_height,
                          cfg.noise.pixel_sigma)
        cam_pose = compose(cfg.cam_to_body, traj.pose(t))
        images.append((float(t), render_view(cam_pose, cfg.intrinsics,
                                             cfg.image_width, cfg.image_height,
                                             textures, warp, rng=rng)))

    scans = []
    lis = []
    for t in _stamps(cfg.duration, cfg.lidar_hz):
        body = traj.pose(t)
        lidar_pose = compose(cfg.lidar_to_body, body)
        scans.append((float(t), sample_scan(lidar_pose, cfg.planes,
                                            cfg.points_per_scan, rng,
                                            cfg.noise.range_sigma)))
        rot_n = rng.normal(0.0, 1.0, 3) * cfg.noise.lis_rot_sigma
        pos_n = rng.normal(0.0, 1.0, 3) * cfg.noise.lis_pos_sigma
        lis.append(Pose(body.rotation @ so3_exp(rot_n), body.translation + pos_n))

    lis_traj = Trajectory.from_poses(_stamps(cfg.duration, cfg.lidar_hz), lis)
    ds = Dataset(imu=imu, images=images, scans=scans, lis_poses=lis_traj,
                 ground_truth=Trajectory.from_poses(imu_times, gt_poses),
                 cam_to_body=cfg.cam_to_body, lidar_to_body=cfg.lidar_to_body,
                 intrinsics=cfg.intrinsics,
                 image_size=(cfg.image_width, cfg.image_height),
                 initial_velocity=traj.velocity(0.0),
                 true_accel_bias=cfg.true_accel_bias.copy(),
                 true_gyro_bias=cfg.true_gyro_bias.copy())
    validate(ds)
    return ds
