"""Core data model: label schema, voxel grids, BEV layouts, poses, boxes.

Conventions used throughout the package:

* Grid labels are stored as a dense (X, Y, Z) array in C order, so the
  flat serialization order is x-major / y-middle / z-minor.
* Semantic class ids are 0-based and contiguous; the free/empty class is
  by convention the last index. Panoptic class codes ``s`` live in their
  own 1..17 range and map to semantic ids through :class:`LabelSchema`.
* An oriented box's ``size = (width, length, height)`` maps to the box
  frame axes (x, y, z); ``yaw`` rotates the box frame about world +z.
* BEV layouts are ego-centered: cell (i, j) covers the same metric
  footprint as grid column (i, j) when widths/resolutions agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

# Panoptic code arithmetic: code = s * 1000 + i
INSTANCE_BASE = 1000
PANOPTIC_CLASS_MIN = 1
PANOPTIC_CLASS_MAX = 17  # the free/empty code in the panoptic scheme
INSTANCE_MAX = INSTANCE_BASE - 1


def _default_layout_channel_map(num_classes: int) -> dict[int, int]:
    """Agent classes 1..10 -> channels 0..9, map classes 11..15 -> 10..14."""
    table = {c: c - 1 for c in range(1, 11)}
    table.update({c: c - 1 for c in range(11, 16) if c < num_classes})
    return table


@dataclass(frozen=True)
class LabelSchema:
    """Semantic/panoptic label conventions for one dataset configuration.

    ``thing_classes`` and ``stuff_classes`` are panoptic class codes
    (things carry instance ids, stuff is always instance 0). The free
    code 17 maps to ``free_class`` internally; codes 1..16 map to the
    same-valued semantic id.
    """

    num_classes: int = 21
    free_class: int = 20
    thing_classes: frozenset[int] = frozenset(range(1, 11))
    stuff_classes: frozenset[int] = frozenset(range(11, 17))
    layout_channel_map: Mapping[int, int] = field(
        default_factory=lambda: _default_layout_channel_map(21)
    )

    def __post_init__(self):
        if not (0 <= self.free_class < self.num_classes):
            raise ValueError("free_class outside the semantic id range")
        if self.thing_classes & self.stuff_classes:
            raise ValueError("thing and stuff class sets overlap")
        for cls, ch in self.layout_channel_map.items():
            if not (0 <= cls < self.num_classes):
                raise ValueError(f"layout-mapped class {cls} out of range")
            if ch < 0:
                raise ValueError(f"negative layout channel for class {cls}")

    @property
    def num_layout_channels(self) -> int:
        if not self.layout_channel_map:
            return 0
        return max(self.layout_channel_map.values()) + 1

    def agent_channels(self) -> list[int]:
        """Layout channels fed by thing (agent) classes, sorted."""
        chans = {
            ch
            for cls, ch in self.layout_channel_map.items()
            if cls in self.thing_classes
        }
        return sorted(chans)

    def is_stuff_or_free(self, s: int) -> bool:
        return s in self.stuff_classes or s == PANOPTIC_CLASS_MAX

    def panoptic_class_to_semantic(self, s: np.ndarray | int):
        """Map panoptic class codes (1..17) to semantic ids; 17 -> free."""
        s_arr = np.asarray(s)
        out = np.where(s_arr == PANOPTIC_CLASS_MAX, self.free_class, s_arr)
        return out if isinstance(s, np.ndarray) else int(out)

    @classmethod
    def toy(cls, num_classes: int = 6) -> "LabelSchema":
        """Small schema for procedural datasets: 2 agents + 2 stuff + free."""
        return cls(
            num_classes=num_classes,
            free_class=num_classes - 1,
            thing_classes=frozenset({1, 2}),
            stuff_classes=frozenset({3, 4}),
            layout_channel_map={1: 0, 2: 1, 3: 2, 4: 3},
        )


def panoptic_encode(s: int, i: int) -> int:
    """Pack (class code, instance id) into a single panoptic label."""
    if not (PANOPTIC_CLASS_MIN <= s <= PANOPTIC_CLASS_MAX):
        raise ValueError(f"class code {s} outside [1, {PANOPTIC_CLASS_MAX}]")
    if not (0 <= i <= INSTANCE_MAX):
        raise ValueError(f"instance id {i} outside [0, {INSTANCE_MAX}]")
    if i != 0 and (s >= 11):  # stuff and free carry instance 0
        raise ValueError(f"non-thing class {s} with nonzero instance {i}")
    return s * INSTANCE_BASE + i


def panoptic_decode(label: int) -> tuple[int, int]:
    """Inverse of :func:`panoptic_encode`."""
    lo = PANOPTIC_CLASS_MIN * INSTANCE_BASE
    hi = PANOPTIC_CLASS_MAX * INSTANCE_BASE + INSTANCE_MAX
    if not (lo <= label <= hi):
        raise ValueError(f"panoptic label {label} outside [{lo}, {hi}]")
    return label // INSTANCE_BASE, label % INSTANCE_BASE


def panoptic_decode_array(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    return labels // INSTANCE_BASE, labels % INSTANCE_BASE


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a dense ego-centered voxel grid."""

    dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    voxel_size: float

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ValueError("grid dims must be positive")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")

    @property
    def num_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Voxel indices containing each point (may fall outside the grid)."""
        p = np.asarray(points, dtype=np.float64)
        return np.floor((p - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)

    def index_in_bounds(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def index_to_center(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + (idx + 0.5) * self.voxel_size

    def centers_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """World xy coordinates of column centers, each shaped (X, Y)."""
        xs = self.origin[0] + (np.arange(self.dims[0]) + 0.5) * self.voxel_size
        ys = self.origin[1] + (np.arange(self.dims[1]) + 0.5) * self.voxel_size
        return np.meshgrid(xs, ys, indexing="ij")

    @classmethod
    def standard(cls) -> "GridSpec":
        """256 x 256 x 25 at 0.4 m over [-51.2, 51.2] x [-51.2, 51.2] x [-5, 5] m."""
        return cls(dims=(256, 256, 25), origin=(-51.2, -51.2, -5.0), voxel_size=0.4)


class SemanticOccupancyGrid:
    """Dense voxel grid of semantic class ids."""

    def __init__(self, spec: GridSpec, labels: np.ndarray):
        labels = np.asarray(labels)
        if labels.shape != tuple(spec.dims):
            raise ValueError(f"labels shape {labels.shape} != dims {spec.dims}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be integer-typed")
        self.spec = spec
        self.labels = labels

    def validate(self, schema: LabelSchema) -> None:
        if self.labels.size and int(self.labels.max()) >= schema.num_classes:
            raise ValueError("label exceeds schema.num_classes")
        if self.labels.size and int(self.labels.min()) < 0:
            raise ValueError("negative label")

    @classmethod
    def full_free(cls, spec: GridSpec, schema: LabelSchema) -> "SemanticOccupancyGrid":
        return cls(spec, np.full(spec.dims, schema.free_class, dtype=np.uint8))

    def copy(self) -> "SemanticOccupancyGrid":
        return SemanticOccupancyGrid(self.spec, self.labels.copy())


class PanopticVoxelGrid:
    """Dense voxel grid of packed panoptic labels (free voxels hold 17000)."""

    FREE_LABEL = PANOPTIC_CLASS_MAX * INSTANCE_BASE

    def __init__(self, spec: GridSpec, labels: np.ndarray):
        labels = np.asarray(labels)
        if labels.shape != tuple(spec.dims):
            raise ValueError(f"labels shape {labels.shape} != dims {spec.dims}")
        self.spec = spec
        self.labels = labels

    def validate(self, schema: LabelSchema) -> None:
        s, i = panoptic_decode_array(self.labels)
        if self.labels.size == 0:
            return
        if s.min() < PANOPTIC_CLASS_MIN or s.max() > PANOPTIC_CLASS_MAX:
            raise ValueError("panoptic class code out of range")
        nonthing = np.isin(s, sorted(schema.stuff_classes)) | (s == PANOPTIC_CLASS_MAX)
        if np.any(i[nonthing] != 0):
            raise ValueError("stuff/free voxel with nonzero instance id")

    def to_semantic(self, schema: LabelSchema) -> SemanticOccupancyGrid:
        s, _ = panoptic_decode_array(self.labels)
        sem = schema.panoptic_class_to_semantic(s)
        dtype = np.uint8 if schema.num_classes <= 255 else np.uint16
        return SemanticOccupancyGrid(self.spec, sem.astype(dtype))


# ---------------------------------------------------------------------------
# Poses and boxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Se3Pose:
    """Rigid transform: x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation 3-vector")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Se3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t: Sequence[float]) -> "Se3Pose":
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_yaw(cls, yaw: float, t: Sequence[float] = (0.0, 0.0, 0.0)) -> "Se3Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(r, np.asarray(t, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Se3Pose") -> "Se3Pose":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return Se3Pose(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Se3Pose":
        rt = self.rotation.T
        return Se3Pose(rt, -rt @ self.translation)


@dataclass(frozen=True)
class OrientedBox:
    """Yaw-oriented 3D box; size = (width, length, height) on box axes (x, y, z)."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: int = 0
    instance_id: int = 0

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError("box size components must be positive")

    def pose(self) -> Se3Pose:
        return Se3Pose.from_yaw(self.yaw, self.center)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Inclusive containment test (boundary counts as inside)."""
        local = self.pose().inverse().apply(points)
        half = np.asarray(self.size, dtype=np.float64) / 2.0
        return np.all(np.abs(local) <= half, axis=-1)

    def footprint(self) -> np.ndarray:
        """4x2 world-frame xy corners of the box footprint, CCW."""
        hw, hl = self.size[0] / 2.0, self.size[1] / 2.0
        corners = np.array([[hw, hl], [-hw, hl], [-hw, -hl], [hw, -hl]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return corners @ rot.T + np.asarray(self.center[:2])


# ---------------------------------------------------------------------------
# BEV layouts
# ---------------------------------------------------------------------------


class BevLayout:
    """Ego-centered multi-hot raster; bits[i, j] is a channel bitmask."""

    MAX_CHANNELS = 16

    def __init__(self, width: int, height: int, resolution: float,
                 channels: int, bits: np.ndarray | None = None):
        if channels > self.MAX_CHANNELS:
            raise ValueError("at most 16 channels fit the per-cell bitmask")
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.width = int(width)
        self.height = int(height)
        self.resolution = float(resolution)
        self.channels = int(channels)
        if bits is None:
            bits = np.zeros((self.width, self.height), dtype=np.uint16)
        bits = np.asarray(bits, dtype=np.uint16)
        if bits.shape != (self.width, self.height):
            raise ValueError("bits shape mismatch")
        self.bits = bits

    @property
    def origin_xy(self) -> tuple[float, float]:
        return (-self.width * self.resolution / 2.0,
                -self.height * self.resolution / 2.0)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        ox, oy = self.origin_xy
        xs = ox + (np.arange(self.width) + 0.5) * self.resolution
        ys = oy + (np.arange(self.height) + 0.5) * self.resolution
        return np.meshgrid(xs, ys, indexing="ij")

    def channel_mask(self, channel: int) -> np.ndarray:
        if not (0 <= channel < self.channels):
            raise ValueError(f"channel {channel} out of range")
        return (self.bits & np.uint16(1 << channel)) != 0

    def channel_planes(self) -> np.ndarray:
        """Boolean (channels, W, H) view of the bitmask raster."""
        shifts = np.arange(self.channels, dtype=np.uint16)
        return ((self.bits[None, :, :] >> shifts[:, None, None]) & 1).astype(bool)

    def copy(self) -> "BevLayout":
        return BevLayout(self.width, self.height, self.resolution,
                         self.channels, self.bits.copy())

    def matches_grid(self, spec: GridSpec, tol: float = 1e-6) -> bool:
        # tol absorbs float32 header rounding of on-disk resolutions
        return (self.width == spec.dims[0] and self.height == spec.dims[1]
                and abs(self.resolution - spec.voxel_size) <= tol)


def points_in_polygon(points_xy: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd crossing test, vectorized over query points.

    points_xy: (..., 2); polygon: (V, 2) with V >= 3.
    """
    poly = np.asarray(polygon, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[0] < 3 or poly.shape[1] != 2:
        raise ValueError("polygon needs at least 3 (x, y) vertices")
    pts = np.asarray(points_xy, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    inside = np.zeros(x.shape, dtype=bool)
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < np.where(crosses, xint, 0.0))
        x0, y0 = x1, y1
    return inside


def layout_rasterize(
    boxes: Sequence[OrientedBox],
    polygons: Sequence[tuple[int, np.ndarray]],
    width: int,
    height: int,
    resolution: float,
    channels: int,
    schema: LabelSchema,
) -> BevLayout:
    """Rasterize footprints into a multi-hot layout.

    A cell's bit is set when its center lies inside the footprint
    (inclusive boundaries for boxes, even-odd rule for polygons). Boxes
    route to channels through ``schema.layout_channel_map``; unmapped
    classes are skipped. Polygons carry their channel explicitly.
    """
    layout = BevLayout(width, height, resolution, channels)
    cx, cy = layout.cell_centers()
    centers = np.stack([cx, cy], axis=-1)

    def set_channel(mask: np.ndarray, channel: int) -> None:
        if not (0 <= channel < channels):
            raise ValueError(f"channel {channel} out of range")
        layout.bits[mask] |= np.uint16(1 << channel)

    for box in boxes:
        channel = schema.layout_channel_map.get(box.class_id)
        if channel is None:
            continue
        local = centers - np.asarray(box.center[:2])
        c, s = np.cos(box.yaw), np.sin(box.yaw)
        bx = local[..., 0] * c + local[..., 1] * s
        by = -local[..., 0] * s + local[..., 1] * c
        mask = (np.abs(bx) <= box.size[0] / 2.0) & (np.abs(by) <= box.size[1] / 2.0)
        set_channel(mask, channel)

    for channel, poly in polygons:
        set_channel(points_in_polygon(centers, poly), channel)

    return layout


@dataclass(frozen=True)
class OverwriteRule:
    """Relabel ground-band voxels under flagged layout cells.

    ``mask`` is "full" (every flagged cell, for thin dividers) or "edge"
    (flagged cells whose 4-neighborhood contains an unflagged cell, for
    area classes).
    """

    channel: int
    new_class: int
    mask: str = "full"

    def __post_init__(self):
        if self.mask not in ("full", "edge"):
            raise ValueError("mask must be 'full' or 'edge'")


GROUND_BAND_Z = 2  # voxels with z index < GROUND_BAND_Z form the ground band


def _edge_cells(flagged: np.ndarray) -> np.ndarray:
    """Flagged cells with an unflagged 4-neighbor (out of raster = unflagged)."""
    padded = np.pad(flagged, 1, mode="constant", constant_values=False)
    n4 = (
        padded[:-2, 1:-1] & padded[2:, 1:-1]
        & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return flagged & ~n4


def layout_overwrite(
    grid: SemanticOccupancyGrid,
    layout: BevLayout,
    rules: Sequence[OverwriteRule],
) -> SemanticOccupancyGrid:
    """Stamp map structure from the layout into the grid's ground band."""
    if not layout.matches_grid(grid.spec):
        raise ValueError("grid and layout footprints do not match")
    out = grid.copy()
    zband = min(GROUND_BAND_Z, grid.spec.dims[2])
    for rule in rules:
        flagged = layout.channel_mask(rule.channel)
        cells = flagged if rule.mask == "full" else _edge_cells(flagged)
        out.labels[cells, :zband] = rule.new_class
    return out


def bev_topdown_project(grid: SemanticOccupancyGrid, schema: LabelSchema) -> np.ndarray:
    """(X, Y) map of the lowest-z non-free class per column (free if none)."""
    occupied = grid.labels != schema.free_class
    any_occ = occupied.any(axis=2)
    first_z = occupied.argmax(axis=2)
    xi, yi = np.indices(any_occ.shape)
    out = grid.labels[xi, yi, first_z].astype(np.int64)
    out[~any_occ] = schema.free_class
    return out
