"""
SGS Assembly - generated volume to a placed scene.

    label_argmax -> extract_instances -> filter_instances -> retrieve -> SceneDescription

Retrieval cost for an instance and a candidate (entry, φ):
    chamfer(instance voxel centers, entry points rotated by φ, scaled to fit
            and centered on the instance box) + λ * collision IoU

Object database on disk:
    db/index.json                 {"labels": [...], "entries": ["bed-000", ...]}
    db/bed-000.json               {"id", "class", "voxel_size", "size", "shape"}
    db/bed-000.voxels.npy         bool occupancy, canonical orientation
    db/bed-000.points.npy         n x 3 canonical points (meters, centered)
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sgs.core import GridSpec, LabelSpace, LabelVolume, RoomSpec, SemanticVolume, label_argmax
from sgs.errors import ConfigurationError, DataError
from sgs.writer import ContainerWriter

log = logging.getLogger(__name__)

INDEX_FILE = "index.json"
RETRIEVAL_MODES = ("shape", "bbox")

_NEIGHBORS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


# =============================================================================
# Instances
# =============================================================================

@dataclass(frozen=True, eq=False)
class InstanceVolume:
    """Face-connected voxels of one class; voxels sorted lexicographically."""

    class_id: int
    voxels: np.ndarray      # n x 3 (i, j, k)
    grid: GridSpec

    @property
    def bbox_min(self) -> np.ndarray:
        return self.voxels.min(axis=0)

    @property
    def bbox_max(self) -> np.ndarray:
        return self.voxels.max(axis=0)

    @property
    def extent(self) -> np.ndarray:
        """Bounding-box size in meters."""
        return (self.bbox_max - self.bbox_min + 1) * self.grid.gamma

    @property
    def center(self) -> np.ndarray:
        return self.grid.origin + (self.bbox_min + self.bbox_max + 1) / 2 * self.grid.gamma

    @property
    def points(self) -> np.ndarray:
        return self.grid.origin + (self.voxels + 0.5) * self.grid.gamma

    def __len__(self) -> int:
        return len(self.voxels)


def extract_instances(labels: LabelVolume) -> list[InstanceVolume]:
    """6-connected components of equal non-empty labels, ordered by smallest member voxel."""
    ids = labels.ids
    shape = ids.shape
    seen = np.zeros(shape, dtype=bool)
    seen[ids == labels.empty_index] = True
    instances = []
    for start in zip(*np.nonzero(~seen)):
        if seen[start]:
            continue
        cls = ids[start]
        seen[start] = True
        queue = deque([start])
        members = []
        while queue:
            voxel = queue.popleft()
            members.append(voxel)
            for di, dj, dk in _NEIGHBORS:
                n = (voxel[0] + di, voxel[1] + dj, voxel[2] + dk)
                if 0 <= n[0] < shape[0] and 0 <= n[1] < shape[1] and 0 <= n[2] < shape[2]:
                    if not seen[n] and ids[n] == cls:
                        seen[n] = True
                        queue.append(n)
        voxels = np.array(sorted(members), dtype=np.int64)
        instances.append(InstanceVolume(int(cls), voxels, labels.grid))
    return instances


# =============================================================================
# Object database
# =============================================================================

@dataclass(frozen=True, eq=False)
class ObjectEntry:
    """A canonical shape: occupancy at `voxel_size`, centered points, physical size."""

    id: str
    class_name: str
    occupancy: np.ndarray
    voxel_size: float
    points: np.ndarray

    def __post_init__(self) -> None:
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.ndim != 3 or not occ.any():
            raise DataError(f"Object {self.id!r} needs a non-empty 3-D occupancy")
        if len(self.points) == 0:
            raise DataError(f"Object {self.id!r} has no points")
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 3))

    @property
    def size(self) -> np.ndarray:
        return np.array(self.occupancy.shape, dtype=np.float64) * self.voxel_size

    def header(self) -> dict:
        return {
            "id": self.id,
            "class": self.class_name,
            "voxel_size": self.voxel_size,
            "size": self.size.tolist(),
            "shape": list(self.occupancy.shape),
        }


def _surface(occupancy: np.ndarray) -> np.ndarray:
    """Occupied voxels with at least one empty face neighbor."""
    padded = np.pad(occupancy, 1)
    interior = occupancy.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return occupancy & ~interior


def build_entry(
    entry_id: str,
    class_name: str,
    occupancy: np.ndarray,
    voxel_size: float,
    points_per_entry: int = 512,
    rng: np.random.Generator | None = None,
) -> ObjectEntry:
    """Database entry from an occupancy template; points are surface-voxel centers, seeded subsample."""
    occupancy = np.asarray(occupancy, dtype=bool)
    surface = np.argwhere(_surface(occupancy))
    if len(surface) > points_per_entry:
        rng = rng or np.random.default_rng(0)
        surface = surface[np.sort(rng.choice(len(surface), points_per_entry, replace=False))]
    size = np.array(occupancy.shape) * voxel_size
    points = (surface + 0.5) * voxel_size - size / 2
    return ObjectEntry(entry_id, class_name, occupancy, voxel_size, points)


class ObjectDatabase:
    """Class-tagged shapes; per-class minimal sizes drive the outlier filter."""

    def __init__(self, entries: list[ObjectEntry], labels: LabelSpace) -> None:
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise DataError("Object database ids must be unique")
        for entry in entries:
            labels.index(entry.class_name)
        self.entries = sorted(entries, key=lambda e: e.id)
        self.labels = labels

    def __len__(self) -> int:
        return len(self.entries)

    def by_class(self, class_id: int) -> list[ObjectEntry]:
        name = self.labels.name(class_id)
        return [e for e in self.entries if e.class_name == name]

    def entry(self, entry_id: str) -> ObjectEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise DataError(f"No database entry {entry_id!r}")

    def min_size(self, class_id: int) -> np.ndarray:
        """Componentwise minimum size over the class's entries."""
        entries = self.by_class(class_id)
        if not entries:
            raise DataError(f"No database entries for class {self.labels.name(class_id)!r}")
        return np.min([e.size for e in entries], axis=0)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for entry in self.entries:
            np.save(directory / f"{entry.id}.voxels.npy", entry.occupancy)
            np.save(directory / f"{entry.id}.points.npy", entry.points)
            ContainerWriter.write_bytes(
                json.dumps(entry.header(), indent=2).encode("utf-8"), directory / f"{entry.id}.json"
            )
        index = {"labels": list(self.labels.class_names), "entries": [e.id for e in self.entries]}
        ContainerWriter.write_bytes(json.dumps(index, indent=2).encode("utf-8"), directory / INDEX_FILE)

    @classmethod
    def load(cls, directory: str | Path, labels: LabelSpace | None = None) -> ObjectDatabase:
        directory = Path(directory)
        try:
            index = json.loads((directory / INDEX_FILE).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"{directory} is not an object database (missing {INDEX_FILE})") from None
        except json.JSONDecodeError as e:
            raise DataError(f"{directory / INDEX_FILE} is not valid JSON: {e}") from e
        stored = LabelSpace(tuple(index["labels"]))
        if labels is not None and labels != stored:
            raise ConfigurationError("Object database label space does not match the config")
        entries = []
        for entry_id in index["entries"]:
            header = json.loads((directory / f"{entry_id}.json").read_text(encoding="utf-8"))
            occupancy = np.load(directory / f"{entry_id}.voxels.npy", allow_pickle=False)
            points = np.load(directory / f"{entry_id}.points.npy", allow_pickle=False)
            if list(occupancy.shape) != header["shape"]:
                raise DataError(f"{entry_id}: occupancy shape does not match its header")
            entries.append(ObjectEntry(header["id"], header["class"], occupancy, float(header["voxel_size"]), points))
        return cls(entries, stored)


# =============================================================================
# Filtering
# =============================================================================

def filter_instances(instances: list[InstanceVolume], db: ObjectDatabase) -> tuple[list[InstanceVolume], int]:
    """Drop instances smaller than the class minimum on every axis; returns (kept, dropped count)."""
    kept = []
    dropped = 0
    for instance in instances:
        if not db.by_class(instance.class_id):
            raise DataError(f"Class {db.labels.name(instance.class_id)!r} has no database entries")
        if np.all(instance.extent < db.min_size(instance.class_id) - 1e-9):
            dropped += 1
        else:
            kept.append(instance)
    if dropped:
        log.info("filtered %d of %d instances below class minimum size", dropped, len(instances))
    return kept, dropped


# =============================================================================
# Chamfer distance
# =============================================================================

def _pair_distances(q: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Euclidean distances from q (... x 3) to points, component-wise so every path rounds alike."""
    dx = q[..., 0] - points[..., 0]
    dy = q[..., 1] - points[..., 1]
    dz = q[..., 2] - points[..., 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def nearest_distances_brute(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _pair_distances(a[:, None, :], b[None, :, :]).min(axis=1)


def nearest_distances(a: np.ndarray, b: np.ndarray, cell: float | None = None) -> np.ndarray:
    """Exact nearest-neighbor distance from each point of a to b, via uniform grid buckets.

    Buckets are visited in rings of increasing Chebyshev cell distance; once
    the best distance found is within the lower bound of the next ring the
    search stops.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if cell is None:
        span = float(np.max(np.ptp(b, axis=0))) if len(b) > 1 else 0.0
        cell = span / max(1.0, round(len(b) ** (1 / 3))) if span > 0 else 1.0
    keys = np.floor(b / cell).astype(np.int64)
    unique, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(unique) + 1))
    members = [order[bounds[u]:bounds[u + 1]] for u in range(len(unique))]

    out = np.empty(len(a))
    for n, q in enumerate(a):
        qk = np.floor(q / cell).astype(np.int64)
        ring = np.max(np.abs(unique - qk), axis=1)
        levels = np.unique(ring)
        best = math.inf
        for i, r in enumerate(levels):
            cand = np.concatenate([members[u] for u in np.nonzero(ring == r)[0]])
            best = min(best, float(_pair_distances(q, b[cand]).min()))
            if i + 1 < len(levels) and best <= (levels[i + 1] - 1) * cell:
                break
        out[n] = best
    return out


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Mean nearest distance a -> b plus mean nearest distance b -> a (meters)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if not len(a) or not len(b):
        raise DataError("Chamfer distance needs two non-empty point sets")
    return float(nearest_distances(a, b).mean() + nearest_distances(b, a).mean())


def chamfer_brute(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if not len(a) or not len(b):
        raise DataError("Chamfer distance needs two non-empty point sets")
    return float(nearest_distances_brute(a, b).mean() + nearest_distances_brute(b, a).mean())


# =============================================================================
# Placement geometry
# =============================================================================

def rot_z(phi_deg: float) -> np.ndarray:
    a = math.radians(phi_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotated_extent(size: np.ndarray, phi_deg: float) -> np.ndarray:
    """Axis-aligned size of a box of `size` after yaw φ."""
    return np.abs(rot_z(phi_deg)) @ np.asarray(size, dtype=np.float64)


def fit_scale(entry: ObjectEntry, phi_deg: float, extent: np.ndarray) -> float:
    """Uniform scale making the rotated entry box fit inside `extent`."""
    return float(np.min(np.asarray(extent) / rotated_extent(entry.size, phi_deg)))


def place_points(entry: ObjectEntry, phi_deg: float, translation: np.ndarray, scale: float = 1.0) -> np.ndarray:
    return (entry.points * scale) @ rot_z(phi_deg).T + np.asarray(translation, dtype=np.float64)


def place_voxels(
    entry: ObjectEntry,
    phi_deg: float,
    translation: np.ndarray,
    grid: GridSpec,
    scale: float = 1.0,
) -> np.ndarray:
    """Flat ids of grid voxels whose centers fall inside the placed entry's occupancy."""
    half = rotated_extent(entry.size * scale, phi_deg) / 2
    t = np.asarray(translation, dtype=np.float64)
    lo = np.maximum(grid.point_to_index(t - half), 0)
    hi = np.minimum(grid.point_to_index(t + half), np.array(grid.shape) - 1)
    if np.any(hi < lo):
        return np.zeros(0, dtype=np.int64)
    axes = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
    idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    centers = grid.origin + (idx + 0.5) * grid.gamma
    local = ((centers - t) @ rot_z(phi_deg)) / scale + entry.size / 2
    cell = np.floor(local / entry.voxel_size).astype(np.int64)
    inside = np.all((cell >= 0) & (cell < np.array(entry.occupancy.shape)), axis=1)
    hit = np.zeros(len(idx), dtype=bool)
    hit[inside] = entry.occupancy[tuple(cell[inside].T)]
    return np.ravel_multi_index(idx[hit].T, grid.shape)


def foreign_voxels(labels: LabelVolume, self_class: int) -> np.ndarray:
    ids = labels.ids.reshape(-1)
    return np.nonzero((ids != self_class) & (ids != labels.empty_index))[0]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.union1d(a, b)
    if not len(union):
        return 0.0
    return len(np.intersect1d(a, b)) / len(union)


def collision_penalty(
    entry: ObjectEntry,
    phi_deg: float,
    translation: np.ndarray,
    labels: LabelVolume,
    self_class: int,
    scale: float = 1.0,
    margin: int | None = None,
) -> float:
    """IoU of the placed entry's voxels with scene voxels of every other class.

    With `margin`, only foreign voxels within `margin` voxels of the
    placement's bounding box take part.
    """
    placed = place_voxels(entry, phi_deg, translation, labels.grid, scale)
    foreign = foreign_voxels(labels, self_class)
    if margin is not None and len(foreign):
        grid = labels.grid
        half = rotated_extent(entry.size * scale, phi_deg) / 2
        t = np.asarray(translation, dtype=np.float64)
        lo = grid.point_to_index(t - half) - margin
        hi = grid.point_to_index(t + half) + margin
        ijk = np.stack(np.unravel_index(foreign, grid.shape), axis=1)
        foreign = foreign[np.all((ijk >= lo) & (ijk <= hi), axis=1)]
    return iou(placed, foreign)


# =============================================================================
# Retrieval
# =============================================================================

@dataclass(frozen=True)
class Retrieval:
    entry_id: str
    phi: float
    cost: float
    scale: float
    shape_term: float
    collision: float


def candidate_cost(
    instance: InstanceVolume,
    entry: ObjectEntry,
    phi: float,
    labels: LabelVolume,
    lam: float = 1.0,
    mode: str = "shape",
    margin: int | None = None,
) -> Retrieval:
    scale = fit_scale(entry, phi, instance.extent)
    if mode == "shape":
        shape_term = chamfer(instance.points, place_points(entry, phi, instance.center, scale))
    else:
        shape_term = float(np.abs(instance.extent - rotated_extent(entry.size, phi)).sum())
    collision = collision_penalty(entry, phi, instance.center, labels, instance.class_id, scale, margin)
    return Retrieval(entry.id, float(phi), shape_term + lam * collision, scale, shape_term, collision)


def retrieve(
    instance: InstanceVolume,
    db: ObjectDatabase,
    labels: LabelVolume,
    rotations=(0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0),
    lam: float = 1.0,
    mode: str = "shape",
    margin: int | None = None,
) -> Retrieval:
    """Exhaustive argmin over same-class entries x rotations; ties keep the lowest (id, φ)."""
    if mode not in RETRIEVAL_MODES:
        raise ConfigurationError(f"retrieval mode must be one of {RETRIEVAL_MODES}, got {mode!r}")
    entries = db.by_class(instance.class_id)
    if not entries:
        raise DataError(f"No database entries for class {db.labels.name(instance.class_id)!r}")
    best: Retrieval | None = None
    for entry in entries:
        for phi in sorted(float(r) for r in rotations):
            result = candidate_cost(instance, entry, phi, labels, lam, mode, margin)
            if best is None or result.cost < best.cost:
                best = result
    return best


# =============================================================================
# Scene assembly
# =============================================================================

@dataclass(frozen=True)
class Placement:
    entry_id: str
    class_name: str
    rotation_deg: float
    translation: tuple[float, float, float]
    scale: float = 1.0
    cost: float = 0.0

    def to_dict(self) -> dict:
        return {
            "entry": self.entry_id,
            "class": self.class_name,
            "rotation_deg": self.rotation_deg,
            "translation": list(self.translation),
            "scale": self.scale,
            "cost": self.cost,
        }


@dataclass
class SceneDescription:
    room: RoomSpec
    placements: list[Placement] = field(default_factory=list)
    unresolved: list[dict] = field(default_factory=list)
    dropped: int = 0

    def to_dict(self) -> dict:
        return {
            "room": list(self.room.size_psi),
            "placements": [p.to_dict() for p in self.placements],
            "unresolved": self.unresolved,
            "dropped": self.dropped,
        }


def assemble(
    volume: SemanticVolume | LabelVolume,
    db: ObjectDatabase,
    retrieval,
    room: RoomSpec | None = None,
    threads: int = 1,
) -> SceneDescription:
    """Replace every surviving instance by its best database entry; `retrieval` is a RetrievalConfig."""
    labels = label_argmax(volume) if isinstance(volume, SemanticVolume) else volume
    room = room or RoomSpec(labels.grid.extent)
    instances = extract_instances(labels)
    resolvable = [i for i in instances if db.by_class(i.class_id)]
    unresolved = [
        {"class": db.labels.name(i.class_id), "center": i.center.tolist(), "voxels": len(i)}
        for i in instances if not db.by_class(i.class_id)
    ]
    kept, dropped = filter_instances(resolvable, db)

    def work(instance: InstanceVolume) -> Retrieval:
        return retrieve(instance, db, labels, retrieval.rotations_deg, retrieval.lam,
                        retrieval.mode, retrieval.collision_margin)

    if threads > 1 and len(kept) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, kept))
    else:
        results = [work(i) for i in kept]

    placements = [
        Placement(r.entry_id, db.labels.name(i.class_id), r.phi,
                  tuple(float(x) for x in i.center), r.scale, r.cost)
        for i, r in zip(kept, results)
    ]
    if unresolved:
        log.warning("%d instances have no retrievable class", len(unresolved))
    return SceneDescription(room, placements, unresolved, dropped)
