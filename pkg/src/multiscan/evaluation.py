"""Trajectory evaluation: closed-form rigid alignment and translational error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from multiscan.geometry import Pose, matrix_to_rotvec


@dataclass
class ApeResult:
    rmse: float
    max_error: float
    n_pairs: int


def umeyama_alignment(source: np.ndarray, target: np.ndarray) -> Pose:
    """Least-squares rigid transform (no scale) mapping source onto target."""
    source = np.asarray(source, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(source) != len(target) or len(source) < 3:
        raise ValueError("need at least 3 paired points")
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    cross = (target - mu_t).T @ (source - mu_s) / len(source)
    u, _, vt = np.linalg.svd(cross)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        sign[2, 2] = -1.0
    rot = u @ sign @ vt
    return Pose(matrix_to_rotvec(rot), mu_t - rot @ mu_s)


def associate_timestamps(
    times_a: np.ndarray, times_b: np.ndarray, max_dt: float = 0.01
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-timestamp pairing within max_dt; returns index arrays."""
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    if len(times_a) == 0 or len(times_b) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    pos = np.searchsorted(times_b, times_a)
    lo = np.clip(pos - 1, 0, len(times_b) - 1)
    hi = np.clip(pos, 0, len(times_b) - 1)
    pick = np.where(
        np.abs(times_b[hi] - times_a) < np.abs(times_b[lo] - times_a), hi, lo
    )
    ok = np.abs(times_b[pick] - times_a) <= max_dt
    return np.nonzero(ok)[0], pick[ok]


def evaluate_ape(
    est_times: np.ndarray,
    est_poses: list[Pose],
    ref_times: np.ndarray,
    ref_poses: list[Pose],
    max_dt: float = 0.01,
) -> ApeResult:
    """Translational absolute pose error after rigid alignment.

    Estimate poses are paired to reference poses by nearest timestamp
    within max_dt, rigidly aligned onto the reference (closed form, no
    scale), and scored by the rms and maximum translation residual.
    """
    idx_est, idx_ref = associate_timestamps(est_times, ref_times, max_dt)
    if len(idx_est) < 3:
        raise ValueError(
            f"only {len(idx_est)} matched pose pairs within {max_dt}s; need at least 3"
        )
    p_est = np.stack([est_poses[i].trans for i in idx_est])
    p_ref = np.stack([ref_poses[i].trans for i in idx_ref])
    align = umeyama_alignment(p_est, p_ref)
    residual = align.apply(p_est) - p_ref
    norms = np.linalg.norm(residual, axis=1)
    return ApeResult(
        rmse=float(np.sqrt(np.mean(norms**2))),
        max_error=float(norms.max()),
        n_pairs=int(len(idx_est)),
    )
