"""Dataset container and on-disk formats.

Layout of a dataset directory:

    imu.csv            t,ax,ay,az,gx,gy,gz  (header + rows)
    gt.txt             timestamp tx ty tz qx qy qz qw  (ground truth, IMU rate)
    lis.txt            same format, scan-registration poses at LiDAR rate
    calib.txt          key/value lines (intrinsics, extrinsics, initial state)
    images/<t>.pgm     binary P5, 8-bit
    scans/<t>.scan.csv x,y,z rows in the LiDAR frame

All floats print with 9 significant digits, LF line endings; quaternions
are (qx,qy,qz,qw) normalized with qw >= 0. Parsers fail loudly with the
file name and line number.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .esikf import ImuSample
from .frontend import GrayImage, read_pgm, write_pgm
from .geometry import CameraIntrinsics, Pose


class DatasetError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def canonical_quaternion(q: np.ndarray) -> np.ndarray:
    """Normalized (qx,qy,qz,qw) with a deterministic sign (qw >= 0)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    for c in (q[3], q[0], q[1], q[2]):
        if c > 0:
            return q
        if c < 0:
            return -q
    return q


@dataclass
class Trajectory:
    times: np.ndarray        # (N,)
    positions: np.ndarray    # (N, 3)
    quaternions: np.ndarray  # (N, 4) as (qx,qy,qz,qw)

    def __len__(self) -> int:
        return len(self.times)

    def pose(self, i: int) -> Pose:
        R = Rotation.from_quat(self.quaternions[i]).as_matrix()
        return Pose(R, self.positions[i].copy())

    @staticmethod
    def from_poses(times, poses) -> "Trajectory":
        times = np.asarray(times, dtype=float)
        positions = np.array([p.translation for p in poses])
        quats = np.array([canonical_quaternion(
            Rotation.from_matrix(p.rotation).as_quat()) for p in poses])
        return Trajectory(times, positions, quats)


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w", newline="\n") as f:
        for t, p, q in zip(traj.times, traj.positions, traj.quaternions):
            qc = canonical_quaternion(q)
            f.write(" ".join(_fmt(v) for v in (t, *p, *qc)) + "\n")


def read_trajectory(path) -> Trajectory:
    times, positions, quats = [], [], []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DatasetError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(s) for s in parts]
            except ValueError:
                raise DatasetError(f"{path}:{ln}: malformed number") from None
            if times and vals[0] <= times[-1]:
                raise DatasetError(f"{path}:{ln}: non-increasing timestamp {vals[0]}")
            times.append(vals[0])
            positions.append(vals[1:4])
            quats.append(vals[4:8])
    if not times:
        raise DatasetError(f"{path}: empty trajectory")
    return Trajectory(np.array(times), np.array(positions), np.array(quats))


@dataclass
class Dataset:
    imu: list                      # ImuSample
    images: list                   # (t, GrayImage)
    scans: list                    # (t, (N,3) array, LiDAR frame)
    lis_poses: Trajectory          # scan-registration poses (body in world)
    ground_truth: Trajectory
    cam_to_body: Pose
    lidar_to_body: Pose
    intrinsics: CameraIntrinsics
    image_size: tuple              # (width, height)
    initial_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    true_accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    true_gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _check_increasing(times, name):
    times = np.asarray(times, dtype=float)
    if len(times) == 0:
        raise DatasetError(f"stream missing: {name} has no entries")
    if np.any(np.diff(times) <= 0):
        k = int(np.argmax(np.diff(times) <= 0))
        raise DatasetError(f"{name}: non-increasing timestamp at index {k + 1}")
    return times


def validate(ds: Dataset) -> None:
    streams = {
        "imu": [s.t for s in ds.imu],
        "images": [t for t, _ in ds.images],
        "scans": [t for t, _ in ds.scans],
        "lis_poses": ds.lis_poses.times,
        "ground_truth": ds.ground_truth.times,
    }
    spans = {}
    for name, times in streams.items():
        t = _check_increasing(times, name)
        spans[name] = (t[0], t[-1])
    start = max(lo for lo, _ in spans.values())
    end = min(hi for _, hi in spans.values())
    if start > end:
        raise DatasetError(f"streams do not overlap: latest start {start} > "
                           f"earliest end {end}")


_POSE_KEYS = ("cam_to_body", "lidar_to_body")
_VEC_KEYS = ("initial_velocity", "true_accel_bias", "true_gyro_bias")
_SCALAR_KEYS = ("fx", "fy", "cx", "cy", "image_width", "image_height")


def _write_calib(path, ds: Dataset) -> None:
    intr = ds.intrinsics
    w, h = ds.image_size
    with open(path, "w", newline="\n") as f:
        for key, val in (("fx", intr.fx), ("fy", intr.fy),
                         ("cx", intr.cx), ("cy", intr.cy),
                         ("image_width", w), ("image_height", h)):
            f.write(f"{key} {_fmt(val)}\n")
        for key, pose in (("cam_to_body", ds.cam_to_body),
                          ("lidar_to_body", ds.lidar_to_body)):
            f.write(f"{key}_rotation "
                    + " ".join(_fmt(v) for v in pose.rotation.ravel()) + "\n")
            f.write(f"{key}_translation "
                    + " ".join(_fmt(v) for v in pose.translation) + "\n")
        for key in _VEC_KEYS:
            f.write(f"{key} " + " ".join(_fmt(v) for v in getattr(ds, key)) + "\n")


def _read_calib(path) -> dict:
    table = {}
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            key, *rest = line.split()
            try:
                table[key] = np.array([float(s) for s in rest])
            except ValueError:
                raise DatasetError(f"{path}:{ln}: malformed number") from None
    expected = list(_SCALAR_KEYS) + list(_VEC_KEYS) + [
        f"{k}_{part}" for k in _POSE_KEYS for part in ("rotation", "translation")]
    missing = [k for k in expected if k not in table]
    if missing:
        raise DatasetError(f"{path}: missing keys {missing}")
    return table


def export_dataset(ds: Dataset, out_dir) -> None:
    validate(ds)
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "scans"), exist_ok=True)

    with open(os.path.join(out_dir, "imu.csv"), "w", newline="\n") as f:
        f.write("t,ax,ay,az,gx,gy,gz\n")
        for s in ds.imu:
            f.write(",".join(_fmt(v) for v in (s.t, *s.accel, *s.gyro)) + "\n")

    write_trajectory(os.path.join(out_dir, "gt.txt"), ds.ground_truth)
    write_trajectory(os.path.join(out_dir, "lis.txt"), ds.lis_poses)
    _write_calib(os.path.join(out_dir, "calib.txt"), ds)

    for t, img in ds.images:
        write_pgm(img, os.path.join(out_dir, "images", f"{t:.6f}.pgm"))
    for t, pts in ds.scans:
        with open(os.path.join(out_dir, "scans", f"{t:.6f}.scan.csv"),
                  "w", newline="\n") as f:
            f.write("x,y,z\n")
            for row in np.asarray(pts, dtype=float).reshape(-1, 3):
                f.write(",".join(_fmt(v) for v in row) + "\n")


def _read_csv_rows(path, n_cols, header):
    rows = []
    with open(path) as f:
        first = f.readline().rstrip("\n")
        if first != header:
            raise DatasetError(f"{path}:1: expected header {header!r}, got {first!r}")
        for ln, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != n_cols:
                raise DatasetError(f"{path}:{ln}: expected {n_cols} fields, "
                                   f"got {len(parts)}")
            try:
                rows.append([float(s) for s in parts])
            except ValueError:
                raise DatasetError(f"{path}:{ln}: malformed number") from None
    return rows


def _stamped_files(dir_path, suffix, stream):
    if not os.path.isdir(dir_path):
        raise DatasetError(f"stream missing: no directory {dir_path}")
    found = []
    for name in os.listdir(dir_path):
        if not name.endswith(suffix):
            continue
        try:
            stamp = float(name[:-len(suffix)])
        except ValueError:
            raise DatasetError(f"{dir_path}: cannot parse timestamp "
                               f"from {name!r}") from None
        found.append((stamp, os.path.join(dir_path, name)))
    if not found:
        raise DatasetError(f"stream missing: {stream} directory {dir_path} is empty")
    found.sort(key=lambda kv: kv[0])
    return found


def ingest(data_dir) -> Dataset:
    """Parse a dataset directory, validating as it goes."""
    if not os.path.isdir(data_dir):
        raise DatasetError(f"no such dataset directory: {data_dir}")
    for fname in ("imu.csv", "gt.txt", "lis.txt", "calib.txt"):
        if not os.path.isfile(os.path.join(data_dir, fname)):
            raise DatasetError(f"stream missing: {fname} not found in {data_dir}")

    imu_rows = _read_csv_rows(os.path.join(data_dir, "imu.csv"), 7,
                              "t,ax,ay,az,gx,gy,gz")
    imu = [ImuSample(r[0], np.array(r[1:4]), np.array(r[4:7])) for r in imu_rows]

    gt = read_trajectory(os.path.join(data_dir, "gt.txt"))
    lis = read_trajectory(os.path.join(data_dir, "lis.txt"))

    table = _read_calib(os.path.join(data_dir, "calib.txt"))
    intr = CameraIntrinsics(float(table["fx"][0]), float(table["fy"][0]),
                            float(table["cx"][0]), float(table["cy"][0]))
    size = (int(table["image_width"][0]), int(table["image_height"][0]))
    poses = {k: Pose(table[f"{k}_rotation"].reshape(3, 3),
                     table[f"{k}_translation"]) for k in _POSE_KEYS}

    images = [(stamp, read_pgm(path)) for stamp, path
              in _stamped_files(os.path.join(data_dir, "images"), ".pgm", "images")]
    scans = []
    for stamp, path in _stamped_files(os.path.join(data_dir, "scans"),
                                      ".scan.csv", "scans"):
        rows = _read_csv_rows(path, 3, "x,y,z")
        scans.append((stamp, np.array(rows, dtype=float).reshape(-1, 3)))

    ds = Dataset(imu=imu, images=images, scans=scans, lis_poses=lis,
                 ground_truth=gt, cam_to_body=poses["cam_to_body"],
                 lidar_to_body=poses["lidar_to_body"], intrinsics=intr,
                 image_size=size,
                 initial_velocity=table["initial_velocity"],
                 true_accel_bias=table["true_accel_bias"],
                 true_gyro_bias=table["true_gyro_bias"])
    validate(ds)
    return ds
