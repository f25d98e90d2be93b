"""Point-cloud curation geometry: voxelization, label propagation, asset
fitting, dynamic-point removal, and occupancy resampling along shifted
ego paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    GridSpec,
    LabelSchema,
    OrientedBox,
    PanopticVoxelGrid,
    Se3Pose,
    SemanticOccupancyGrid,
)


@dataclass(frozen=True)
class LabeledPointCloud:
    """N x 3 points with one panoptic label each."""

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(points) != len(labels):
            raise ValueError("points and labels length mismatch")
        if points.size and not np.all(np.isfinite(points)):
            raise ValueError("non-finite point coordinates")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class EgoShift:
    """Rigid change of the ego frame; maps old-frame coords to new-frame."""

    transform: Se3Pose


def voxelize_majority(
    cloud: LabeledPointCloud, spec: GridSpec, schema: LabelSchema
) -> PanopticVoxelGrid:
    """Majority-vote voxelization in a compacted label space.

    Each voxel takes the most frequent panoptic label among the points
    inside it; ties break toward the smaller label. Votes are counted
    over (occupied voxel, distinct label) pairs only, so memory stays
    O(occupied voxels x distinct labels). Points outside the grid are
    dropped; voxels without points stay free.
    """
    labels = np.full(spec.dims, PanopticVoxelGrid.FREE_LABEL, dtype=np.int64)
    if len(cloud):
        idx = spec.world_to_index(cloud.points)
        keep = spec.index_in_bounds(idx)
        idx, pts_labels = idx[keep], cloud.labels[keep]
        if len(idx):
            dims = np.asarray(spec.dims)
            flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
            # compact both axes of the vote table
            vox_ids, vox_inv = np.unique(flat, return_inverse=True)
            lab_ids, lab_inv = np.unique(pts_labels, return_inverse=True)
            counts = np.zeros((len(vox_ids), len(lab_ids)), dtype=np.int64)
            np.add.at(counts, (vox_inv, lab_inv), 1)
            # lab_ids is sorted, argmax returns the first max: smaller label wins ties
            winners = lab_ids[np.argmax(counts, axis=1)]
            labels.reshape(-1)[vox_ids] = winners
    grid = PanopticVoxelGrid(spec, labels)
    grid.validate(schema)
    return grid


def knn_propagate(
    labeled: LabeledPointCloud, query: np.ndarray, k: int
) -> np.ndarray:
    """Majority label of the k nearest labeled points per query point.

    Majority ties break toward the nearest tied member's label, then
    toward the smaller label; k is clamped to the labeled-set size.
    """
    if len(labeled) == 0:
        raise ValueError("empty labeled set")
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    k = min(k, len(labeled))
    tree = cKDTree(labeled.points)
    dist, idx = tree.query(query, k=k)
    if k == 1:
        return labeled.labels[np.atleast_1d(idx)]
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)
    out = np.empty(len(query), dtype=np.int64)
    for qi in range(len(query)):
        neigh_lab = labeled.labels[idx[qi]]
        values, inv, counts = np.unique(
            neigh_lab, return_inverse=True, return_counts=True
        )
        min_dist = np.full(len(values), np.inf)
        np.minimum.at(min_dist, inv, dist[qi])
        tied = counts == counts.max()
        cand_lab, cand_dist = values[tied], min_dist[tied]
        out[qi] = cand_lab[np.lexsort((cand_lab, cand_dist))[0]]
    return out


def fit_asset_to_box(asset: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Anisotropically scale a canonical asset to a box and pose it.

    The asset's axis-aligned extents are scaled to exactly
    (width, length, height), its bounding-box midpoint moves to the box
    center, and the whole cloud rotates by the box yaw.
    """
    asset = np.asarray(asset, dtype=np.float64).reshape(-1, 3)
    if len(asset) == 0:
        raise ValueError("empty asset")
    lo, hi = asset.min(axis=0), asset.max(axis=0)
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValueError("asset has zero extent along an axis")
    scale = np.asarray(box.size, dtype=np.float64) / extent
    local = (asset - (lo + hi) / 2.0) * scale
    return box.pose().apply(local)


def remove_points_in_boxes(
    cloud: LabeledPointCloud, boxes: Sequence[OrientedBox]
) -> LabeledPointCloud:
    """Drop every point inside any box (boundary inclusive), keeping order."""
    if len(cloud) == 0 or not boxes:
        return cloud
    inside = np.zeros(len(cloud), dtype=bool)
    for box in boxes:
        inside |= box.contains(cloud.points)
    return LabeledPointCloud(cloud.points[~inside], cloud.labels[~inside])


def resample_occupancy(
    grid: SemanticOccupancyGrid, shift: EgoShift, schema: LabelSchema
) -> SemanticOccupancyGrid:
    """Resample the grid under an ego-frame change (nearest-neighbor labels).

    Output voxel centers are pulled back through the inverse transform
    and read the containing input voxel; samples leaving the grid
    become free.
    """
    spec = grid.spec
    xs, ys, zs = np.meshgrid(
        np.arange(spec.dims[0]), np.arange(spec.dims[1]), np.arange(spec.dims[2]),
        indexing="ij",
    )
    centers = spec.index_to_center(np.stack([xs, ys, zs], axis=-1).reshape(-1, 3))
    src = spec.world_to_index(shift.transform.inverse().apply(centers))
    ok = spec.index_in_bounds(src)
    out = np.full(spec.num_voxels, schema.free_class, dtype=grid.labels.dtype)
    src_ok = src[ok]
    out[ok] = grid.labels[src_ok[:, 0], src_ok[:, 1], src_ok[:, 2]]
    return SemanticOccupancyGrid(spec, out.reshape(spec.dims))
