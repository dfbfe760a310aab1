"""Absolute trajectory error against ground truth.

Two modes: `paper` takes the square root of the mean of the (unsquared)
position-error norms; `rmse` is the conventional root-mean-square. No
alignment transform is applied — estimate and ground truth share the
world frame by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MATCH_WINDOW_S = 0.010

MODE_PAPER = "paper"
MODE_RMSE = "rmse"


class MatchError(ValueError):
    """No estimate/ground-truth timestamp pairs within the match window."""


@dataclass
class EvalReport:
    mode: str
    ate: float
    errors: list          # (timestamp, position error) per matched pair
    trajectory_length: float
    matched: int


def match_timestamps(est_times: np.ndarray, gt_times: np.ndarray,
                     window: float = MATCH_WINDOW_S) -> list:
    """Nearest-neighbor index pairs (i_est, i_gt) within the window."""
    est_times = np.asarray(est_times, dtype=float)
    gt_times = np.asarray(gt_times, dtype=float)
    pairs = []
    idx = np.searchsorted(gt_times, est_times)
    for i, j in enumerate(idx):
        cands = [k for k in (j - 1, j) if 0 <= k < len(gt_times)]
        if not cands:
            continue
        k = min(cands, key=lambda k: abs(gt_times[k] - est_times[i]))
        if abs(gt_times[k] - est_times[i]) <= window:
            pairs.append((i, k))
    return pairs


def evaluate_ate(est_times, est_positions, gt_times, gt_positions,
                 mode: str = MODE_PAPER, window: float = MATCH_WINDOW_S) -> EvalReport:
    if mode not in (MODE_PAPER, MODE_RMSE):
        raise ValueError(f"unknown mode {mode!r}")
    est_positions = np.asarray(est_positions, dtype=float)
    gt_positions = np.asarray(gt_positions, dtype=float)
    pairs = match_timestamps(est_times, gt_times, window)
    if not pairs:
        raise MatchError("no matched timestamp pairs within "
                         f"{window * 1e3:.0f} ms")
    ei = [i for i, _ in pairs]
    gi = [j for _, j in pairs]
    norms = np.linalg.norm(est_positions[ei] - gt_positions[gi], axis=1)
    if mode == MODE_PAPER:
        ate = math.sqrt(float(np.mean(norms)))
    else:
        ate = math.sqrt(float(np.mean(norms ** 2)))
    gt_matched = gt_positions[gi]
    length = float(np.sum(np.linalg.norm(np.diff(gt_matched, axis=0), axis=1)))
    errors = [(float(np.asarray(est_times, dtype=float)[i]), float(n))
              for i, n in zip(ei, norms)]
    return EvalReport(mode=mode, ate=ate, errors=errors,
                      trajectory_length=length, matched=len(pairs))
