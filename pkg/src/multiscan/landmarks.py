"""Dual-resolution voxelization and per-voxel Gaussian landmark statistics.

A landmark is the point set of one voxel cell, summarized by its mean and
covariance. Cells are laid out twice, once coarse and once fine, so a point
can contribute to up to two landmarks. Covariances use 1/n normalization,
which makes the per-landmark quadratic cost at the statistics' own points
exactly 3 (trace identity) and gives a strong analytic test hook.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# voxel index packing: each shifted index must fit in 20 bits
_PACK_OFFSET = 1 << 19
_PACK_LIMIT = 1 << 20

COARSE = "coarse"
FINE = "fine"

DEFAULT_COARSE_SIZE = 2.0
DEFAULT_FINE_SIZE = 0.5
DEFAULT_N_MIN = 5
DEFAULT_EPSILON = 1e-4


class VoxelKey(NamedTuple):
    ix: int
    iy: int
    iz: int
    level: str


@dataclass(frozen=True)
class VoxelConfig:
    """Grid parameters shared by every landmark-based optimization."""

    coarse_size: float = DEFAULT_COARSE_SIZE
    fine_size: float = DEFAULT_FINE_SIZE
    n_min: int = DEFAULT_N_MIN
    epsilon: float = DEFAULT_EPSILON


@dataclass
class Landmark:
    """One voxel cell's point set with frozen Gaussian statistics.

    members holds (cloud id, point index) pairs; fixed map points use
    cloud id -1. weight is 1/n so dense cells do not dominate the cost.
    """

    key: VoxelKey
    members: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    inv_cov: np.ndarray
    weight: float
    split_id: int = 0

    @property
    def count(self) -> int:
        return len(self.members)


def voxel_cell_indices(points: np.ndarray, cell_size: float) -> np.ndarray:
    """Integer cell index per point, floor division anchored at the origin."""
    return np.floor(np.asarray(points, dtype=float) / cell_size).astype(np.int64)


def pack_cell_indices(idx3: np.ndarray) -> np.ndarray:
    """Pack (N, 3) cell indices into sortable int64 ids."""
    shifted = idx3 + _PACK_OFFSET
    if shifted.size and (shifted.min() < 0 or shifted.max() >= _PACK_LIMIT):
        raise ValueError("voxel index out of packable range (scene too large?)")
    return (shifted[:, 0] << 40) | (shifted[:, 1] << 20) | shifted[:, 2]


def landmark_stats(members: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Arithmetic mean and biased (1/n) covariance of a point set."""
    members = np.asarray(members, dtype=float).reshape(-1, 3)
    if len(members) < 2:
        raise ValueError("landmark statistics need at least 2 points")
    mean = members.mean(axis=0)
    centered = members - mean
    cov = centered.T @ centered / len(members)
    return mean, 0.5 * (cov + cov.T)


def regularized_inverse(cov: np.ndarray, epsilon: float) -> np.ndarray:
    """(cov + epsilon * I)^-1, symmetrized. epsilon > 0 guarantees SPD."""
    inv = np.linalg.inv(np.asarray(cov, dtype=float) + epsilon * np.eye(3))
    return 0.5 * (inv + inv.T)


def _grouped_mean_cov(points: np.ndarray, gid: np.ndarray, n_groups: int):
    """Vectorized per-group mean and 1/n covariance (two-pass, stable)."""
    counts = np.bincount(gid, minlength=n_groups).astype(float)
    sums = np.stack([np.bincount(gid, weights=points[:, d], minlength=n_groups) for d in range(3)], axis=1)
    means = sums / counts[:, None]
    centered = points - means[gid]
    covs = np.empty((n_groups, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(gid, weights=centered[:, a] * centered[:, b], minlength=n_groups)
            covs[:, a, b] = s / counts
            covs[:, b, a] = covs[:, a, b]
    return means, covs, counts


def _level_groups(points: np.ndarray, cell_size: float, n_min: int):
    """Sort points into cells; return member rows/gid for cells with > n_min points.

    Yields (rows, member_gid, group_cells, group_counts) where rows indexes
    into points, member_gid maps each row to a retained group, and
    group_cells holds the (ix, iy, iz) of each retained group.
    """
    idx3 = voxel_cell_indices(points, cell_size)
    packed = pack_cell_indices(idx3)
    order = np.argsort(packed, kind="stable")
    _, starts, counts = np.unique(packed[order], return_index=True, return_counts=True)
    keep = counts > n_min
    group_of_pos = np.repeat(np.arange(len(counts)), counts)
    pos_keep = keep[group_of_pos]
    rows = order[pos_keep]
    new_gid = np.cumsum(keep) - 1
    member_gid = new_gid[group_of_pos[pos_keep]]
    group_cells = idx3[order[starts[keep]]]
    return rows, member_gid, group_cells, counts[keep]


def dual_grid_groups(
    points: np.ndarray,
    coarse_size: float = DEFAULT_COARSE_SIZE,
    fine_size: float = DEFAULT_FINE_SIZE,
    n_min: int = DEFAULT_N_MIN,
    epsilon: float = DEFAULT_EPSILON,
):
    """Array form of the dual voxelization: one dict of flat arrays.

    Returns None when no cell exceeds n_min. Keys: member_row (into the
    input points, all retained groups concatenated), member_group, counts,
    means, covs, inv_covs, cells (ix iy iz per group), levels.
    """
    if not coarse_size > fine_size > 0.0:
        raise ValueError("require coarse_size > fine_size > 0")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    all_rows, all_gid, all_cells, all_counts, levels = [], [], [], [], []
    base = 0
    if len(points):
        for level, size in ((COARSE, coarse_size), (FINE, fine_size)):
            rows, gid, cells, counts = _level_groups(points, size, n_min)
            if len(counts) == 0:
                continue
            all_rows.append(rows)
            all_gid.append(gid + base)
            all_cells.append(cells)
            all_counts.append(counts)
            levels.extend([level] * len(counts))
            base += len(counts)
    if base == 0:
        return None
    member_row = np.concatenate(all_rows)
    member_group = np.concatenate(all_gid)
    counts = np.concatenate(all_counts)
    means, covs, _ = _grouped_mean_cov(points[member_row], member_group, base)
    inv_covs = np.linalg.inv(covs + epsilon * np.eye(3))
    inv_covs = 0.5 * (inv_covs + inv_covs.transpose(0, 2, 1))
    return {
        "member_row": member_row,
        "member_group": member_group,
        "counts": counts,
        "means": means,
        "covs": covs,
        "inv_covs": inv_covs,
        "cells": np.vstack(all_cells),
        "levels": levels,
    }


def voxelize_dual(
    points: np.ndarray,
    coarse_size: float = DEFAULT_COARSE_SIZE,
    fine_size: float = DEFAULT_FINE_SIZE,
    n_min: int = DEFAULT_N_MIN,
    owners: np.ndarray | None = None,
    epsilon: float = DEFAULT_EPSILON,
) -> list[Landmark]:
    """Bin points into coarse and fine grids; landmarks need > n_min members.

    owners gives the (cloud id, point index) identity of each input point;
    when omitted, all points belong to cloud 0 with their flat index.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if owners is None:
        owners = np.stack([np.zeros(len(points), dtype=np.int64), np.arange(len(points), dtype=np.int64)], axis=1)
    else:
        owners = np.asarray(owners, dtype=np.int64).reshape(-1, 2)
        if len(owners) != len(points):
            raise ValueError("owners length must match point count")
    groups = dual_grid_groups(points, coarse_size, fine_size, n_min, epsilon)
    if groups is None:
        return []
    landmarks: list[Landmark] = []
    member_chunks = np.split(groups["member_row"], np.cumsum(groups["counts"])[:-1])
    for g, chunk in enumerate(member_chunks):
        cell = groups["cells"][g]
        landmarks.append(
            Landmark(
                key=VoxelKey(int(cell[0]), int(cell[1]), int(cell[2]), groups["levels"][g]),
                members=owners[chunk],
                mean=groups["means"][g],
                cov=groups["covs"][g],
                inv_cov=groups["inv_covs"][g],
                weight=1.0 / groups["counts"][g],
            )
        )
    return landmarks


def split_by_normals(
    landmark: Landmark,
    member_points: np.ndarray,
    normals: np.ndarray,
    planarities: np.ndarray,
    planarity_min: float,
    n_min: int = DEFAULT_N_MIN,
    epsilon: float = DEFAULT_EPSILON,
) -> list[Landmark]:
    """Split a planar landmark whose member normals point both ways.

    Thin structures scanned from both sides (walls, signs) collapse front
    and back surfaces into one voxel. If the members are planar on average
    and their normals fall into two opposing clusters, the set is
    partitioned by the sign of the dot product with the dominant normal
    and each half gets fresh statistics. Both halves must keep more than
    n_min members, otherwise the original landmark is returned unchanged.

    member_points, normals and planarities are per-member arrays aligned
    with landmark.members.
    """
    member_points = np.asarray(member_points, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    planarities = np.asarray(planarities, dtype=float).reshape(-1)
    if not (len(member_points) == len(normals) == len(planarities) == landmark.count):
        raise ValueError("per-member attribute length mismatch")
    if planarities.mean() < planarity_min:
        return [landmark]
    # dominant direction: principal eigenvector of the normal scatter,
    # sign-invariant so +n and -n vote for the same axis
    scatter = normals.T @ normals
    _, vecs = np.linalg.eigh(scatter)
    dominant = vecs[:, -1]
    side = normals @ dominant >= 0.0
    n_pos, n_neg = int(side.sum()), int((~side).sum())
    if n_pos == 0 or n_neg == 0:
        return [landmark]
    mean_pos = normals[side].mean(axis=0)
    mean_neg = normals[~side].mean(axis=0)
    if mean_pos @ mean_neg >= 0.0:
        return [landmark]
    if min(n_pos, n_neg) <= n_min:
        return [landmark]
    # first member stays in split 0 so the outcome does not depend on the
    # eigenvector's arbitrary sign
    if not side[0]:
        side = ~side
    halves = []
    for split_id, mask in ((0, side), (1, ~side)):
        mean, cov = landmark_stats(member_points[mask])
        halves.append(
            Landmark(
                key=landmark.key,
                members=landmark.members[mask],
                mean=mean,
                cov=cov,
                inv_cov=regularized_inverse(cov, epsilon),
                weight=1.0 / int(mask.sum()),
                split_id=split_id,
            )
        )
    return halves
