"""Navigation and visual-fidelity metrics.

ATE is anchored: predicted and ground-truth trajectories share the start
pose by construction, so no rigid alignment is applied before the RMSE.
Every emitted report states this convention in its header.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import Pose

SSIM_WINDOW = 8
PSNR_CAP = 99.0
_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2


def _positions(poses: list[Pose]) -> np.ndarray:
    return np.array([[p.x, p.y] for p in poses], dtype=np.float64)


def success_rate(final_poses: list[Pose], goal_positions: list[tuple[float, float]], avg_step_size: float) -> float:
    """Fraction of trajectories whose final distance to goal is strictly below
    the dataset's average step size."""
    if len(final_poses) != len(goal_positions):
        raise ValueError(f"{len(final_poses)} final poses vs {len(goal_positions)} goals")
    hits = sum(
        1
        for p, g in zip(final_poses, goal_positions)
        if math.hypot(p.x - g[0], p.y - g[1]) < avg_step_size
    )
    return hits / len(final_poses)


def ate(pred: list[Pose], gt: list[Pose]) -> float:
    """RMSE of per-index position distance over anchored trajectories."""
    if len(pred) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    if len(pred) < 2:
        raise ValueError("need at least two poses")
    d = _positions(pred) - _positions(gt)
    return float(np.sqrt((np.linalg.norm(d, axis=1) ** 2).mean()))


def rpe(pred: list[Pose], gt: list[Pose]) -> float:
    """RMSE of the difference between successive world-frame motion deltas."""
    if len(pred) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    if len(pred) < 2:
        raise ValueError("need at least two poses")
    dp = np.diff(_positions(pred), axis=0)
    dg = np.diff(_positions(gt), axis=0)
    err = np.linalg.norm(dp - dg, axis=1)
    return float(np.sqrt((err**2).mean()))


def pad_to_length(poses: list[Pose], n: int) -> list[Pose]:
    """Extend with the last pose; a stopped agent stays where it stopped."""
    return poses + [poses[-1]] * (n - len(poses))


# ---------------------------------------------------------------------------
# image metrics
# ---------------------------------------------------------------------------


def _window_sums(x: np.ndarray, k: int) -> np.ndarray:
    """Sum over every k x k window (valid positions), via an integral image."""
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity: uniform window, stride 1, per channel.

    Sample (n-1) covariance normalization, matching the common reference
    implementation at data range 255.
    """
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    n = window * window
    norm = n / (n - 1)
    vals = []
    for c in range(x.shape[2]):
        xc, yc = x[:, :, c], y[:, :, c]
        sx = _window_sums(xc, window)
        sy = _window_sums(yc, window)
        sxx = _window_sums(xc * xc, window)
        syy = _window_sums(yc * yc, window)
        sxy = _window_sums(xc * yc, window)
        mx, my = sx / n, sy / n
        vx = (sxx / n - mx * mx) * norm
        vy = (syy / n - my * my) * norm
        cov = (sxy / n - mx * my) * norm
        num = (2 * mx * my + _C1) * (2 * cov + _C2)
        den = (mx * mx + my * my + _C1) * (vx + vy + _C2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(255^2 / MSE), capped at 99 dB for identical images."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(((a.astype(np.float64) - b.astype(np.float64)) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(255.0**2 / mse), PSNR_CAP)
