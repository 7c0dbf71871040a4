"""
SGS Core - canonical scene types, grid/room conventions and label bookkeeping.

Conventions:
    - X runs along the grid width w, Y along the height h (both horizontal),
      Z points up through the d layers
    - The floor is the z=0 layer; the floor center is the corner shared by
      voxels around index (w/2, h/2, 0), which is the room-coordinate origin
    - Voxel (i, j, k) spans [(i - w/2)γ, (i + 1 - w/2)γ] x [(j - h/2)γ, ...] x [kγ, (k + 1)γ]
    - The last probability channel (index C) is "empty"

All types are immutable after construction: arrays are stored as read-only views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sgs.errors import ConfigurationError, DataError, SizeViolationError

# Floor for every cross-entropy log term
LOG_CLAMP = 1e-7

# Probability vectors must sum to one within this tolerance
PROB_ATOL = 1e-6

EMPTY_NAME = "empty"

# Object classes of the scene categories the method was trained on
LABEL_PRESETS: dict[str, tuple[str, ...]] = {
    "structured3d-bedroom": (
        "cabinet", "bed", "chair", "picture", "desk",
        "curtain", "television", "nightstand", "lamp",
    ),
    "structured3d-livingroom": (
        "cabinet", "chair", "sofa", "table", "picture", "shelves",
        "curtain", "lamp", "pillow", "refrigerator", "television",
    ),
    "structured3d-kitchen": (
        "cabinet", "picture", "curtain", "refrigerator", "lamp",
    ),
    "matterport3d-bedroom": (
        "bed", "pillow", "nightstand", "chair", "picture", "lamp", "curtain", "table",
    ),
    "nyuv2-bedroom": (
        "cabinet", "bed", "chair", "desk", "shelves", "curtain",
        "pillow", "television", "nightstand", "lamp",
    ),
}


def _readonly(array: np.ndarray) -> np.ndarray:
    view = array.view()
    view.flags.writeable = False
    return view


# =============================================================================
# Label space and grid
# =============================================================================

@dataclass(frozen=True)
class LabelSpace:
    """Ordered object classes; channel C is the implicit "empty" label."""

    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        names = tuple(self.class_names)
        object.__setattr__(self, "class_names", names)
        if not names:
            raise ConfigurationError("A label space needs at least one object class")
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Duplicate class names in label space: {names}")
        if EMPTY_NAME in names:
            raise ConfigurationError(f"{EMPTY_NAME!r} is reserved for the empty channel")

    @classmethod
    def preset(cls, name: str) -> LabelSpace:
        if name not in LABEL_PRESETS:
            raise ConfigurationError(
                f"Unknown label preset {name!r}. Available: {', '.join(sorted(LABEL_PRESETS))}"
            )
        return cls(LABEL_PRESETS[name])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def empty_index(self) -> int:
        return len(self.class_names)

    @property
    def num_channels(self) -> int:
        return len(self.class_names) + 1

    def index(self, name: str) -> int:
        if name == EMPTY_NAME:
            return self.empty_index
        try:
            return self.class_names.index(name)
        except ValueError:
            raise DataError(f"Unknown class {name!r}") from None

    def name(self, index: int) -> str:
        if index == self.empty_index:
            return EMPTY_NAME
        return self.class_names[index]


@dataclass(frozen=True)
class GridSpec:
    """Voxel counts and physical stride; the grid extent caps the room size."""

    w: int = 32
    h: int = 32
    d: int = 16
    gamma: float = 0.2

    def __post_init__(self) -> None:
        if min(self.w, self.h, self.d) < 2:
            raise ConfigurationError(f"Grid dimensions must be >= 2, got {self.shape}")
        if not self.gamma > 0:
            raise ConfigurationError(f"Voxel stride must be positive, got {self.gamma}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.w, self.h, self.d)

    @property
    def num_voxels(self) -> int:
        return self.w * self.h * self.d

    @property
    def extent(self) -> tuple[float, float, float]:
        return (self.w * self.gamma, self.h * self.gamma, self.d * self.gamma)

    @property
    def origin(self) -> np.ndarray:
        """Room coordinates of the corner of voxel (0, 0, 0)."""
        return np.array([-self.w * self.gamma / 2, -self.h * self.gamma / 2, 0.0])

    @property
    def diagonal(self) -> float:
        return math.sqrt(sum(e * e for e in self.extent))

    def voxel_centers(self) -> np.ndarray:
        """Room-coordinate centers, shape w x h x d x 3."""
        i, j, k = np.meshgrid(
            np.arange(self.w), np.arange(self.h), np.arange(self.d), indexing="ij"
        )
        idx = np.stack([i, j, k], axis=-1).astype(np.float64)
        return self.origin + (idx + 0.5) * self.gamma

    def point_to_index(self, points: np.ndarray) -> np.ndarray:
        """Integer voxel indices of room-coordinate points (may lie outside the grid)."""
        return np.floor((np.asarray(points, dtype=np.float64) - self.origin) / self.gamma).astype(np.int64)

    def inside(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        return np.all((indices >= 0) & (indices < np.array(self.shape)), axis=-1)


@dataclass(frozen=True)
class RoomSpec:
    """Axis-aligned room size ψ = (R_x, R_y, R_z) in meters."""

    size_psi: tuple[float, float, float]

    def __post_init__(self) -> None:
        object.__setattr__(self, "size_psi", tuple(float(s) for s in self.size_psi))
        if len(self.size_psi) != 3:
            raise ConfigurationError(f"Room size needs three components, got {self.size_psi}")

    def check(self, grid: GridSpec) -> None:
        for axis, (size, extent) in enumerate(zip(self.size_psi, grid.extent)):
            if not size > 0:
                raise SizeViolationError(f"Room size along axis {'xyz'[axis]} must be positive, got {size}")
            if size > extent + 1e-9:
                raise SizeViolationError(
                    f"Room size {size:.3f} m along {'xyz'[axis]} exceeds grid extent {extent:.3f} m"
                )

    @property
    def center(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.size_psi[2] / 2])


# =============================================================================
# Volumes
# =============================================================================

@dataclass(frozen=True, eq=False)
class SemanticVolume:
    """Per-voxel probability vectors (p_0 .. p_{C-1}, p_e), shape w x h x d x (C+1)."""

    grid: GridSpec
    labels: LabelSpace
    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        expected = (*self.grid.shape, self.labels.num_channels)
        if probs.shape != expected:
            raise ConfigurationError(f"Volume shape {probs.shape} does not match grid/labels {expected}")
        object.__setattr__(self, "probs", _readonly(probs))

    @classmethod
    def empty(cls, grid: GridSpec, labels: LabelSpace) -> SemanticVolume:
        probs = np.zeros((*grid.shape, labels.num_channels))
        probs[..., labels.empty_index] = 1.0
        return cls(grid, labels, probs)

    @property
    def empty_probs(self) -> np.ndarray:
        return self.probs[..., self.labels.empty_index]

    @property
    def occupancy(self) -> np.ndarray:
        return 1.0 - self.empty_probs

    def validate(self, atol: float = PROB_ATOL) -> None:
        """Raise DataError unless every voxel holds a probability vector."""
        check_probabilities(self.probs, atol)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Decoded integer labels in 0..C, where C means empty."""

    grid: GridSpec
    ids: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids)
        if ids.shape != self.grid.shape:
            raise ConfigurationError(f"Label volume shape {ids.shape} does not match grid {self.grid.shape}")
        if ids.size and (ids.min() < 0 or ids.max() > self.num_classes):
            raise DataError(f"Label ids must lie in 0..{self.num_classes}")
        object.__setattr__(self, "ids", _readonly(ids.astype(np.int64)))

    @property
    def empty_index(self) -> int:
        return self.num_classes


@dataclass(frozen=True, eq=False)
class RoomMaskVolume:
    """Binary volume: 1 inside the room box, 0 outside."""

    grid: GridSpec
    mask: np.ndarray

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != self.grid.shape:
            raise ConfigurationError(f"Mask shape {mask.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "mask", _readonly(mask))

    @property
    def centroid(self) -> np.ndarray:
        """Room-coordinate centroid of the inside voxels."""
        centers = self.grid.voxel_centers()[self.mask]
        if not len(centers):
            return np.array([0.0, 0.0, self.grid.extent[2] / 2])
        return centers.mean(axis=0)


def check_probabilities(probs: np.ndarray, atol: float = PROB_ATOL) -> None:
    probs = np.asarray(probs)
    if not np.all(np.isfinite(probs)):
        raise DataError("Probabilities contain non-finite values")
    if probs.size and (probs.min() < -atol or probs.max() > 1 + atol):
        raise DataError("Probabilities must lie in [0, 1]")
    sums = probs.sum(axis=-1)
    worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    if worst > atol:
        raise DataError(f"Probability vectors must sum to 1 (worst deviation {worst:.3g})")


# =============================================================================
# Operations
# =============================================================================

def make_room_mask(room: RoomSpec, grid: GridSpec) -> RoomMaskVolume:
    """Mark voxels whose center lies in the room box centered on the floor center."""
    room.check(grid)
    centers = grid.voxel_centers()
    rx, ry, rz = room.size_psi
    inside = (
        (np.abs(centers[..., 0]) <= rx / 2)
        & (np.abs(centers[..., 1]) <= ry / 2)
        & (centers[..., 2] >= 0)
        & (centers[..., 2] <= rz)
    )
    return RoomMaskVolume(grid, inside)


def label_argmax(volume: SemanticVolume) -> LabelVolume:
    """Most probable label per voxel; np.argmax keeps the lowest index on ties."""
    return LabelVolume(volume.grid, np.argmax(volume.probs, axis=-1), volume.labels.num_classes)


def one_hot(labels: LabelVolume, label_space: LabelSpace) -> SemanticVolume:
    if labels.num_classes != label_space.num_classes:
        raise ConfigurationError(
            f"Label volume has {labels.num_classes} classes, label space has {label_space.num_classes}"
        )
    probs = np.eye(label_space.num_channels)[labels.ids]
    return SemanticVolume(labels.grid, label_space, probs)


def mask_empty_penalty(volume: SemanticVolume, mask: RoomMaskVolume) -> float:
    """Mean −log p_e over voxels outside the room; 0 when the room fills the grid."""
    if volume.grid != mask.grid:
        raise ConfigurationError("Volume and mask must share a grid")
    outside = ~mask.mask
    count = int(outside.sum())
    if count == 0:
        return 0.0
    p_e = np.maximum(volume.empty_probs[outside], LOG_CLAMP)
    return float(-np.log(p_e).sum() / count)
