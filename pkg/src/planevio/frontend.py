"""Image front-end: pyramids, Harris corners, LK tracking, RANSAC gating.

Images are grayscale float arrays in [0, 1] with pixel coordinates
(u, v) = (column, row).  The pyramid has exactly four levels; level 4
is full resolution and each lower level halves the dimensions, so a
full-resolution point maps to level 1 at 1/8 scale.  Tracking runs
coarse to fine with a refinement pass at every level; a level whose
patch would leave the image is skipped and only the full-resolution
attempt decides the final status.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import Pixel

PYRAMID_LEVELS = 4

# track statuses
TRACK_OK = "ok"
TRACK_DIVERGED = "diverged"
TRACK_OOB = "out_of_bounds"


@dataclass
class FrontendConfig:
    patch_half: int = 10          # 21x21 tracking patch
    max_iterations: int = 30
    convergence_px: float = 0.01
    harris_k: float = 0.04
    border_margin: int = 12       # corners closer to the border are discarded
    ransac_iterations: int = 500
    ransac_threshold_px: float = 1.0


@dataclass(frozen=True, eq=False)
class GrayImage:
    pixels: np.ndarray   # (h, w) float in [0, 1]

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=float)
        if p.ndim != 2:
            raise ValueError(f"expected 2-d image, got shape {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @staticmethod
    def from_bytes(raw: np.ndarray) -> "GrayImage":
        return GrayImage(np.asarray(raw, dtype=float) / 255.0)


def write_pgm(img: GrayImage, path) -> None:
    """Binary P5, maxval 255.  Quantizes intensities to 8 bits."""
    data = np.round(img.pixels * 255.0).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> GrayImage:
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: maxval must be 255, got {maxval}")
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, got {len(body)}")
    return GrayImage.from_bytes(np.frombuffer(body, dtype=np.uint8).reshape(h, w))


@dataclass(frozen=True, eq=False)
class Pyramid:
    """levels[0] is the coarsest (level 1), levels[-1] full resolution."""
    levels: tuple

    @property
    def full(self) -> GrayImage:
        return self.levels[-1]


def _downsample(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[0] // 2, a.shape[1] // 2
    t = a[:2 * h, :2 * w]
    return 0.25 * (t[0::2, 0::2] + t[1::2, 0::2] + t[0::2, 1::2] + t[1::2, 1::2])


def build_pyramid(img: GrayImage) -> Pyramid:
    if img.width < 32 or img.height < 32:
        raise ValueError(f"image {img.width}x{img.height} too small for "
                         f"{PYRAMID_LEVELS} pyramid levels")
    levels = [img]
    for _ in range(PYRAMID_LEVELS - 1):
        levels.append(GrayImage(_downsample(levels[-1].pixels)))
    return Pyramid(tuple(reversed(levels)))


def harris_detect(img: GrayImage, max_corners: int, min_dist: float,
                  cfg: FrontendConfig | None = None) -> list[Pixel]:
    """Strongest Harris corners, non-maximum suppressed at min_dist."""
    cfg = cfg or FrontendConfig()
    a = img.pixels
    gx = ndimage.sobel(a, axis=1, mode="nearest")
    gy = ndimage.sobel(a, axis=0, mode="nearest")
    ixx = ndimage.uniform_filter(gx * gx, size=3, mode="nearest")
    iyy = ndimage.uniform_filter(gy * gy, size=3, mode="nearest")
    ixy = ndimage.uniform_filter(gx * gy, size=3, mode="nearest")
    resp = ixx * iyy - ixy * ixy - cfg.harris_k * (ixx + iyy) ** 2

    m = max(cfg.border_margin, 1)
    inner = np.full(resp.shape, -np.inf)
    inner[m:-m, m:-m] = resp[m:-m, m:-m]
    if not np.isfinite(inner).any() or inner.max() <= 0.0:
        return []
    radius = max(int(np.ceil(min_dist)), 1)
    local_max = inner == ndimage.maximum_filter(inner, size=2 * radius + 1, mode="nearest")
    keep = local_max & (inner > 0.0) & (inner > inner.max() * 1e-6)
    vs, us = np.nonzero(keep)
    order = np.lexsort((us, vs, -inner[vs, us]))
    corners = []
    picked = np.empty((0, 2))
    for i in order[: max_corners * 8]:
        c = np.array([us[i], vs[i]], dtype=float)
        if len(picked) and np.min(np.hypot(*(picked - c).T)) < min_dist:
            continue
        picked = np.vstack([picked, c])
        corners.append(Pixel(float(c[0]), float(c[1])))
        if len(corners) == max_corners:
            break
    return corners


@dataclass
class TrackResult:
    point: Pixel
    status: str
    residual: float   # mean absolute intensity error over the patch; nan if unset


def _patch_inside(x: float, y: float, shape, half: int) -> bool:
    h, w = shape
    return (x - half >= 0.0 and y - half >= 0.0
            and x + half <= w - 1.0 - 1e-6 and y + half <= h - 1.0 - 1e-6)


def _sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    wx = xs - x0
    wy = ys - y0
    top = img[y0, x0] * (1.0 - wx) + img[y0, x0 + 1] * wx
    bot = img[y0 + 1, x0] * (1.0 - wx) + img[y0 + 1, x0 + 1] * wx
    return top * (1.0 - wy) + bot * wy


def _iterate(prev: np.ndarray, nxt: np.ndarray, grads_prev, grads_next,
             pt: np.ndarray, init: np.ndarray, cfg: FrontendConfig,
             warp: np.ndarray | None = None):
    """Single-level LK refinement; returns (point, status, residual).

    The descent direction uses the mean of the template gradient and the
    current-patch gradient: with one-sided gradients the converged point
    carries a subpixel bias that depends on the interpolation phase, and
    the symmetric form cancels it to first order.

    `warp` (2x2) maps current-patch offsets to template offsets.  A
    translation-only match under inter-frame rotation/zoom settles on a
    compromise point whose offset follows the velocity field — the same
    direction for every patch, so it never averages out over terms.
    Sampling the template through the predicted deformation removes it.
    """
    half = cfg.patch_half
    gx, gy = grads_prev
    gxn, gyn = grads_next
    off = np.arange(-half, half + 1, dtype=float)
    dx, dy = np.meshgrid(off, off)
    if warp is None:
        tdx, tdy = dx, dy
        w11, w12, w21, w22 = 1.0, 0.0, 0.0, 1.0
    else:
        (w11, w12), (w21, w22) = warp
        tdx = w11 * dx + w12 * dy
        tdy = w21 * dx + w22 * dy
        reach = half * max(abs(w11) + abs(w12), abs(w21) + abs(w22))
        h, w = prev.shape
        if not (pt[0] - reach >= 0 and pt[1] - reach >= 0
                and pt[0] + reach <= w - 1 - 1e-6 and pt[1] + reach <= h - 1 - 1e-6):
            return init.copy(), TRACK_OOB, float("nan")
    txs, tys = pt[0] + tdx, pt[1] + tdy
    template = _sample(prev, txs, tys)
    # chain rule: gradient of the warped template w.r.t. current offsets
    gtx = _sample(gx, txs, tys)
    gty = _sample(gy, txs, tys)
    px = w11 * gtx + w21 * gty
    py = w12 * gtx + w22 * gty
    if np.sum(px * px) * np.sum(py * py) - np.sum(px * py) ** 2 < 1e-18:
        return init.copy(), TRACK_DIVERGED, float("nan")   # textureless / 1-d

    cur = init.astype(float).copy()
    for _ in range(cfg.max_iterations):
        if not _patch_inside(cur[0], cur[1], nxt.shape, half):
            return cur, TRACK_OOB, float("nan")
        cxs, cys = cur[0] + dx, cur[1] + dy
        patch = _sample(nxt, cxs, cys)
        sx = 0.5 * (px + _sample(gxn, cxs, cys))
        sy = 0.5 * (py + _sample(gyn, cxs, cys))
        g11 = np.sum(sx * sx)
        g12 = np.sum(sx * sy)
        g22 = np.sum(sy * sy)
        det = g11 * g22 - g12 * g12
        if det < 1e-18:
            return cur, TRACK_DIVERGED, float("nan")
        err = template - patch
        b1 = np.sum(sx * err)
        b2 = np.sum(sy * err)
        step_x = (g22 * b1 - g12 * b2) / det
        step_y = (g11 * b2 - g12 * b1) / det
        cur[0] += step_x
        cur[1] += step_y
        if step_x * step_x + step_y * step_y < cfg.convergence_px ** 2:
            if not _patch_inside(cur[0], cur[1], nxt.shape, half):
                return cur, TRACK_OOB, float("nan")
            final = _sample(nxt, cur[0] + dx, cur[1] + dy)
            return cur, TRACK_OK, float(np.mean(np.abs(final - template)))
    return cur, TRACK_DIVERGED, float(np.mean(np.abs(patch - template)))


def lk_track_single(prev: GrayImage, nxt: GrayImage, pt: Pixel,
                    init: Pixel | None = None,
                    cfg: FrontendConfig | None = None) -> TrackResult:
    """Track one point between two images at a single scale."""
    cfg = cfg or FrontendConfig()
    p = pt.as_array()
    if not _patch_inside(p[0], p[1], prev.pixels.shape, cfg.patch_half):
        return TrackResult(pt, TRACK_OOB, float("nan"))
    gy, gx = np.gradient(prev.pixels)
    gyn, gxn = np.gradient(nxt.pixels)
    start = init.as_array() if init is not None else p
    out, status, res = _iterate(prev.pixels, nxt.pixels, (gx, gy), (gxn, gyn),
                                p, start, cfg)
    return TrackResult(Pixel(float(out[0]), float(out[1])), status, res)


def lk_track_pyramid(prev_pyr: Pyramid, next_pyr: Pyramid, pts: list[Pixel],
                     inits: list[Pixel] | None = None,
                     cfg: FrontendConfig | None = None,
                     warps: list | None = None) -> list[TrackResult]:
    """Coarse-to-fine tracking of many points.

    The level-1 start is the full-resolution initial guess scaled by
    1/8; each finer level doubles the running estimate and refines it.
    Levels where the template or the estimate violates the patch margin
    contribute no refinement; the full-resolution pass decides the
    returned status.  `warps[j]`, if given, is a 2x2 template deformation
    for point j (see _iterate); offsets rescale with the level, so the
    same matrix applies at every level.
    """
    cfg = cfg or FrontendConfig()
    n_levels = len(prev_pyr.levels)
    grads = [np.gradient(lvl.pixels) for lvl in prev_pyr.levels]
    grads_next = [np.gradient(lvl.pixels) for lvl in next_pyr.levels]
    results = []
    for j, pt in enumerate(pts):
        warp = warps[j] if warps is not None else None
        p_full = pt.as_array()
        start_full = inits[j].as_array() if inits is not None else p_full
        scale0 = 2.0 ** (n_levels - 1)
        cur = start_full / scale0
        status, residual = TRACK_OOB, float("nan")
        for k in range(n_levels):
            scale = 2.0 ** (n_levels - 1 - k)
            if k > 0:
                cur = cur * 2.0
            p_lvl = p_full / scale
            prev_lvl = prev_pyr.levels[k].pixels
            next_lvl = next_pyr.levels[k].pixels
            full_res = k == n_levels - 1
            if not _patch_inside(p_lvl[0], p_lvl[1], prev_lvl.shape, cfg.patch_half):
                if full_res:
                    status = TRACK_OOB
                continue
            if not _patch_inside(cur[0], cur[1], next_lvl.shape, cfg.patch_half):
                if full_res:
                    status = TRACK_OOB
                continue
            gy, gx = grads[k]
            gyn, gxn = grads_next[k]
            out, st, res = _iterate(prev_lvl, next_lvl, (gx, gy), (gxn, gyn),
                                    p_lvl, cur, cfg, warp=warp)
            if st == TRACK_OK:
                cur = out
            if full_res:
                status, residual = st, res
                if st == TRACK_OK:
                    cur = out
        results.append(TrackResult(Pixel(float(cur[0]), float(cur[1])), status, residual))
    return results


@dataclass
class RansacResult:
    inlier_mask: np.ndarray
    degenerate: bool   # too few pairs to estimate a model; mask is all-true


def _normalize_points(pts: np.ndarray):
    mean = pts.mean(axis=0)
    dist = np.mean(np.linalg.norm(pts - mean, axis=1))
    s = np.sqrt(2.0) / max(dist, 1e-12)
    T = np.array([[s, 0.0, -s * mean[0]],
                  [0.0, s, -s * mean[1]],
                  [0.0, 0.0, 1.0]])
    return (pts - mean) * s, T


def _eight_point(na: np.ndarray, nb: np.ndarray) -> np.ndarray:
    """Fundamental matrix from >= 8 normalized correspondences."""
    A = np.empty((len(na), 9))
    A[:, 0] = nb[:, 0] * na[:, 0]
    A[:, 1] = nb[:, 0] * na[:, 1]
    A[:, 2] = nb[:, 0]
    A[:, 3] = nb[:, 1] * na[:, 0]
    A[:, 4] = nb[:, 1] * na[:, 1]
    A[:, 5] = nb[:, 1]
    A[:, 6] = na[:, 0]
    A[:, 7] = na[:, 1]
    A[:, 8] = 1.0
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)
    u, s, vt2 = np.linalg.svd(F)
    s[2] = 0.0
    return u @ np.diag(s) @ vt2


def _symmetric_epipolar_distance(F: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ah = np.column_stack([a, np.ones(len(a))])
    bh = np.column_stack([b, np.ones(len(b))])
    lb = ah @ F.T          # epipolar lines in image b
    la = bh @ F            # and in image a
    num = np.abs(np.sum(bh * lb, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = num / np.hypot(lb[:, 0], lb[:, 1])
        d2 = num / np.hypot(la[:, 0], la[:, 1])
    d = np.sqrt(np.nan_to_num(d1, nan=np.inf) ** 2 + np.nan_to_num(d2, nan=np.inf) ** 2)
    return d


def ransac_filter(pts_a: np.ndarray, pts_b: np.ndarray, seed: int,
                  cfg: FrontendConfig | None = None) -> RansacResult:
    """Joint epipolar consistency gate over tracked correspondences.

    Runs a seeded normalized-8-point RANSAC; pairs whose symmetric
    epipolar distance to the best model is below the threshold are
    inliers.  With fewer than 8 pairs no model can be fit: everything
    is kept and the result is flagged degenerate.
    """
    cfg = cfg or FrontendConfig()
    a = np.asarray(pts_a, dtype=float).reshape(-1, 2)
    b = np.asarray(pts_b, dtype=float).reshape(-1, 2)
    if a.shape != b.shape:
        raise ValueError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    n = len(a)
    if n < 8:
        return RansacResult(np.ones(n, dtype=bool), True)
    na, Ta = _normalize_points(a)
    nb, Tb = _normalize_points(b)
    rng = np.random.default_rng(seed)
    best_mask = np.zeros(n, dtype=bool)
    best_count = -1
    needed = cfg.ransac_iterations
    for it in range(cfg.ransac_iterations):
        if it >= needed:
            break
        idx = rng.choice(n, size=8, replace=False)
        Fn = _eight_point(na[idx], nb[idx])
        F = Tb.T @ Fn @ Ta
        mask = _symmetric_epipolar_distance(F, a, b) < cfg.ransac_threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            # adaptive stop: iterations for 99.9% chance of one clean sample
            w = count / n
            if w >= 1.0:
                needed = it + 1
            elif w > 0.0:
                denom = math.log1p(-min(w ** 8, 1.0 - 1e-12))
                needed = min(needed, it + 1 + int(math.log(1e-3) / denom))
    return RansacResult(best_mask, False)
