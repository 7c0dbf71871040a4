"""
SGS Synth - procedural rooms standing in for artist-modeled scene datasets.

A scene is a room box on the grid with axis-aligned box or L-shaped blobs:
    - per-class instance counts drawn from a prior
    - wall-affine classes (beds, pictures, curtains, ...) sit flush to a wall
    - no two objects overlap; everything stays inside the room mask
    - a placement that fails `max_retries` times regenerates the whole scene
      from a fresh sub-seed

From scenes the module derives training pools (cameras near a wall looking
across the room, rendered at training size), ingestion manifests (larger raw
frames + poses) and an object database of box / L-shaped templates per class.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sgs.assembly import ObjectDatabase, build_entry
from sgs.core import (
    GridSpec,
    LabelSpace,
    LabelVolume,
    RoomSpec,
    SemanticVolume,
    label_argmax,
    make_room_mask,
    one_hot,
)
from sgs.errors import ConfigurationError
from sgs.ingestion import Pool, view_angle, write_pool
from sgs.projection import Camera, render_view
from sgs.reader import ContainerReader
from sgs.writer import ContainerWriter

log = logging.getLogger(__name__)

RAW_EMPTY_ID = 255
WALL_INSET = 0.25
MAX_REGENERATIONS = 20


@dataclass(frozen=True)
class ClassPrior:
    """Placement prior of one class; sizes and elevation in meters."""

    name: str
    counts: tuple[float, ...] = (0.5, 0.5)          # P(0 instances), P(1), ...
    size_min: tuple[float, float, float] = (0.4, 0.4, 0.4)
    size_max: tuple[float, float, float] = (0.8, 0.8, 0.8)
    wall: bool = False
    elevation: tuple[float, float] = (0.0, 0.0)
    shape: str = "box"                               # box | L

    def __post_init__(self) -> None:
        if abs(sum(self.counts) - 1.0) > 1e-6 or min(self.counts) < 0:
            raise ConfigurationError(f"Count prior of {self.name!r} is not a distribution")
        if any(lo > hi for lo, hi in zip(self.size_min, self.size_max)):
            raise ConfigurationError(f"Size range of {self.name!r} is inverted")
        if self.shape not in ("box", "L"):
            raise ConfigurationError(f"Unknown shape {self.shape!r} for {self.name!r}")


DEFAULT_PRIORS: dict[str, ClassPrior] = {
    p.name: p for p in (
        ClassPrior("bed", (0.1, 0.85, 0.05), (1.4, 1.8, 0.4), (1.8, 2.2, 0.8), wall=True),
        ClassPrior("nightstand", (0.3, 0.4, 0.3), (0.4, 0.4, 0.4), (0.6, 0.6, 0.6), wall=True),
        ClassPrior("lamp", (0.4, 0.5, 0.1), (0.4, 0.4, 0.8), (0.4, 0.4, 1.6)),
        ClassPrior("chair", (0.5, 0.3, 0.2), (0.4, 0.4, 0.8), (0.6, 0.6, 1.0), shape="L"),
        ClassPrior("desk", (0.6, 0.4), (1.0, 0.6, 0.8), (1.4, 0.8, 0.8), wall=True),
        ClassPrior("cabinet", (0.4, 0.5, 0.1), (0.6, 0.4, 0.8), (1.2, 0.6, 2.0), wall=True),
        ClassPrior("picture", (0.5, 0.4, 0.1), (0.4, 0.2, 0.4), (1.0, 0.2, 0.8), wall=True, elevation=(1.2, 1.6)),
        ClassPrior("curtain", (0.5, 0.5), (1.2, 0.2, 2.0), (2.0, 0.2, 2.4), wall=True),
        ClassPrior("television", (0.6, 0.4), (0.8, 0.2, 0.4), (1.2, 0.2, 0.8), wall=True, elevation=(0.8, 1.2)),
        ClassPrior("sofa", (0.2, 0.7, 0.1), (1.6, 0.8, 0.8), (2.2, 1.0, 0.8), wall=True, shape="L"),
        ClassPrior("table", (0.3, 0.7), (0.8, 0.6, 0.4), (1.4, 1.0, 0.8)),
        ClassPrior("shelves", (0.6, 0.4), (0.8, 0.4, 1.2), (1.2, 0.4, 2.0), wall=True),
        ClassPrior("pillow", (0.5, 0.3, 0.2), (0.4, 0.4, 0.4), (0.6, 0.6, 0.4)),
        ClassPrior("refrigerator", (0.7, 0.3), (0.8, 0.8, 1.6), (1.0, 0.8, 2.0), wall=True),
    )
}


@dataclass(frozen=True)
class SyntheticSceneSpec:
    priors: tuple[ClassPrior, ...]
    room_size_range: tuple[float, float] = (0.6, 1.0)     # fraction of grid extent, x and y
    room_height_range: tuple[float, float] = (0.8, 1.0)   # fraction of grid extent, z
    max_retries: int = 50

    @classmethod
    def default(cls, labels: LabelSpace) -> SyntheticSceneSpec:
        priors = tuple(DEFAULT_PRIORS.get(name, ClassPrior(name)) for name in labels.class_names)
        return cls(priors)

    def validate(self, labels: LabelSpace) -> None:
        names = [p.name for p in self.priors]
        if sorted(names) != sorted(labels.class_names):
            raise ConfigurationError("Synthetic priors must cover exactly the label space classes")
        lo, hi = self.room_size_range
        if not 0 < lo <= hi <= 1:
            raise ConfigurationError(f"room_size_range must satisfy 0 < lo <= hi <= 1, got {self.room_size_range}")


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    volume: SemanticVolume
    room: RoomSpec
    classes: frozenset[int]
    regenerations: int = 0

    @property
    def labels(self) -> LabelVolume:
        return label_argmax(self.volume)


# =============================================================================
# Scenes
# =============================================================================

def _template(size: np.ndarray, shape: str) -> np.ndarray:
    occ = np.ones(tuple(int(s) for s in size), dtype=bool)
    sx, sy, sz = occ.shape
    if shape == "L" and sx >= 2 and sy >= 2 and sz >= 2:
        occ[sx // 2:, sy // 2:, sz // 2:] = False
    return occ


def _room_box(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive voxel index bounds of the room."""
    idx = np.argwhere(mask)
    return idx.min(axis=0), idx.max(axis=0)


def _try_place(
    prior: ClassPrior,
    grid: GridSpec,
    lo: np.ndarray,
    hi: np.ndarray,
    occupied: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray] | None:
    """One placement attempt: (occupancy template, min corner) or None on collision."""
    room = hi - lo + 1
    size_m = rng.uniform(prior.size_min, prior.size_max)
    size = np.clip(np.ceil(size_m / grid.gamma - 1e-9).astype(np.int64), 1, None)
    if rng.random() < 0.5:
        size[[0, 1]] = size[[1, 0]]
    size = np.minimum(size, room)
    z0 = lo[2] + int(round(rng.uniform(*prior.elevation) / grid.gamma))
    z0 = min(z0, hi[2] - size[2] + 1)
    corner = np.array([0, 0, z0])
    if prior.wall:
        side = int(rng.integers(4))
        axis, along = (0, 1) if side < 2 else (1, 0)
        if size[axis] > size[along]:
            size[[0, 1]] = size[[1, 0]]    # thin side against the wall
            size = np.minimum(size, room)
        corner[axis] = lo[axis] if side % 2 == 0 else hi[axis] - size[axis] + 1
        corner[along] = int(rng.integers(lo[along], hi[along] - size[along] + 2))
    else:
        for axis in (0, 1):
            corner[axis] = int(rng.integers(lo[axis], hi[axis] - size[axis] + 2))
    template = _template(size, prior.shape)
    window = tuple(slice(c, c + s) for c, s in zip(corner, size))
    if np.any(occupied[window] & template):
        return None
    return template, corner


def _generate(spec: SyntheticSceneSpec, grid: GridSpec, labels: LabelSpace, rng: np.random.Generator):
    extent = np.array(grid.extent)
    fractions = np.concatenate([
        rng.uniform(*spec.room_size_range, size=2), rng.uniform(*spec.room_height_range, size=1)
    ])
    # whole voxels, x/y parity matching the grid so the centered room box is exactly the mask
    dims = np.array(grid.shape)
    voxels = np.maximum(np.round(fractions * dims), 1).astype(np.int64)
    voxels[:2] -= (dims[:2] - voxels[:2]) % 2
    voxels[:2] = np.where(voxels[:2] < 1, 2 - dims[:2] % 2, voxels[:2])
    size = voxels * grid.gamma
    room = RoomSpec(tuple(float(s) for s in np.minimum(size, extent)))
    mask = make_room_mask(room, grid).mask
    lo, hi = _room_box(mask)
    ids = np.full(grid.shape, labels.empty_index, dtype=np.int64)
    occupied = np.zeros(grid.shape, dtype=bool)
    for prior in spec.priors:
        cls = labels.index(prior.name)
        count = int(rng.choice(len(prior.counts), p=np.asarray(prior.counts) / sum(prior.counts)))
        for _ in range(count):
            for _ in range(spec.max_retries):
                placed = _try_place(prior, grid, lo, hi, occupied, rng)
                if placed is not None:
                    break
            else:
                return None
            template, corner = placed
            window = tuple(slice(c, c + s) for c, s in zip(corner, template.shape))
            occupied[window] |= template
            ids[window] = np.where(template, cls, ids[window])
    return room, ids


def synth_scenes(
    spec: SyntheticSceneSpec,
    n: int,
    grid: GridSpec,
    labels: LabelSpace,
    rng: np.random.Generator,
) -> list[SyntheticScene]:
    """`n` procedural one-hot scenes; deterministic under the generator's state."""
    spec.validate(labels)
    scenes = []
    for _ in range(n):
        regenerations = 0
        while True:
            sub = np.random.default_rng(int(rng.integers(0, 2**63 - 1)))
            result = _generate(spec, grid, labels, sub)
            if result is not None:
                break
            regenerations += 1
            if regenerations > MAX_REGENERATIONS:
                raise ConfigurationError("Synthetic priors do not fit the room; placement keeps failing")
        room, ids = result
        volume = one_hot(LabelVolume(grid, ids, labels.num_classes), labels)
        classes = frozenset(int(c) for c in np.unique(ids) if c != labels.empty_index)
        scenes.append(SyntheticScene(volume, room, classes, regenerations))
    regenerated = sum(s.regenerations for s in scenes)
    if regenerated:
        log.info("synth: %d scene regenerations over %d scenes", regenerated, n)
    return scenes


# =============================================================================
# Cameras and pools
# =============================================================================

def wall_cameras(
    scene: SyntheticScene,
    grid: GridSpec,
    count: int,
    rng: np.random.Generator,
    size: tuple[int, int] = (32, 18),
    hfov_deg: float = 110.0,
    max_angle: float = 45.0,
    far_depth: float | None = None,
) -> list[Camera]:
    """Cameras just inside a random wall, aimed across the room within `max_angle` of its center."""
    far = far_depth or grid.diagonal
    rx, ry, rz = scene.room.size_psi
    center = make_room_mask(scene.room, grid).centroid
    cams = []
    while len(cams) < count:
        side = int(rng.integers(4))
        lateral = rng.uniform(-0.3, 0.3)
        height = min(rng.uniform(1.2, 1.8), rz - 0.1)
        if side < 2:
            x = (rx / 2 - WALL_INSET) * (-1 if side == 0 else 1)
            eye = np.array([x, lateral * ry, height])
        else:
            y = (ry / 2 - WALL_INSET) * (-1 if side == 2 else 1)
            eye = np.array([lateral * rx, y, height])
        to_center = center - eye
        yaw = math.radians(rng.uniform(-0.5, 0.5) * max_angle)
        c, s = math.cos(yaw), math.sin(yaw)
        direction = np.array([c * to_center[0] - s * to_center[1], s * to_center[0] + c * to_center[1], to_center[2]])
        rotation = Camera.look_at(eye, eye + direction)
        camera = Camera.from_fov(size[0], size[1], hfov_deg, rotation, eye, far)
        if view_angle(camera, center) <= max_angle:
            cams.append(camera)
    return cams


def synth_pool(
    scenes: list[SyntheticScene],
    grid: GridSpec,
    views_per_scene: int,
    rng: np.random.Generator,
    size: tuple[int, int] = (32, 18),
    hfov_deg: float = 110.0,
    out_dir: str | Path | None = None,
    config_hash: bytes | None = None,
) -> Pool:
    """Render every scene from `views_per_scene` wall cameras at training size."""
    images, names, sizes, records = [], [], [], []
    for number, scene in enumerate(scenes):
        name = f"synth-{number:05d}"
        for camera in wall_cameras(scene, grid, views_per_scene, rng, size, hfov_deg):
            image = render_view(scene.volume, camera)
            records.append({
                "file": f"{len(images):05d}.sgsi",
                "scene": name,
                "room_size": list(scene.room.size_psi),
                "camera": camera.to_record(),
            })
            images.append(image)
            names.append(name)
            sizes.append(scene.room.size_psi)
    if out_dir is not None:
        write_pool(images, records, out_dir, config_hash)
    return Pool(images, names, sizes)


def synth_manifest(
    scenes: list[SyntheticScene],
    grid: GridSpec,
    views_per_scene: int,
    rng: np.random.Generator,
    out_dir: str | Path,
    frame_size: tuple[int, int] = (64, 36),
    hfov_deg: float = 110.0,
    with_poses: bool = True,
) -> Path:
    """Raw .npz frames (depth + class ids, 255 = empty) and a manifest.jsonl ready for ingestion."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    lines = []
    frame = 0
    for number, scene in enumerate(scenes):
        center = make_room_mask(scene.room, grid).centroid
        for camera in wall_cameras(scene, grid, views_per_scene, rng, frame_size, hfov_deg):
            image = render_view(scene.volume, camera)
            ids = image.argmax()
            raw = np.where(ids == image.empty_index, RAW_EMPTY_ID, ids)
            depth = np.where(ids == image.empty_index, np.inf, image.depth)
            path = out_dir / "frames" / f"{frame:05d}.npz"
            np.savez(path, depth=depth, labels=raw)
            record = camera.to_record()
            lines.append(json.dumps({
                "path": f"frames/{frame:05d}.npz",
                "pose": record["pose"] if with_poses else None,
                "intrinsics": record["intrinsics"],
                "size": record["size"],
                "far_depth": camera.far_depth,
                "scene": f"synth-{number:05d}",
                "room_size": list(scene.room.size_psi),
                "room_center": center.tolist(),
            }, sort_keys=True))
            frame += 1
    manifest = out_dir / "manifest.jsonl"
    ContainerWriter.write_bytes("".join(line + "\n" for line in lines).encode("utf-8"), manifest)
    return manifest


def write_scenes(scenes: list[SyntheticScene], out_dir: str | Path, config_hash: bytes | None = None) -> None:
    """Ground-truth label volumes (NNNNN.sgsl) plus scenes.jsonl with room sizes and classes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for number, scene in enumerate(scenes):
        name = f"{number:05d}.sgsl"
        ContainerWriter.write_labels(scene.labels, out_dir / name, config_hash)
        lines.append(json.dumps({
            "file": name,
            "room_size": list(scene.room.size_psi),
            "classes": sorted(scene.classes),
        }))
    ContainerWriter.write_bytes("".join(line + "\n" for line in lines).encode("utf-8"), out_dir / "scenes.jsonl")


# =============================================================================
# Object database
# =============================================================================

def synth_database(
    labels: LabelSpace,
    gamma: float,
    spec: SyntheticSceneSpec | None = None,
    entries_per_class: int = 3,
    points_per_entry: int = 512,
    rng: np.random.Generator | None = None,
) -> ObjectDatabase:
    """Box and L-shaped templates spanning each class's size prior, voxelized at `gamma`."""
    spec = spec or SyntheticSceneSpec.default(labels)
    rng = rng or np.random.default_rng(0)
    entries = []
    for prior in spec.priors:
        lo = np.asarray(prior.size_min)
        hi = np.asarray(prior.size_max)
        for k in range(entries_per_class):
            t = k / max(1, entries_per_class - 1)
            size = np.maximum(np.ceil((lo + t * (hi - lo)) / gamma - 1e-9), 1).astype(np.int64)
            shape = "L" if (prior.shape == "L") != (k % 2 == 1) else "box"
            entries.append(build_entry(
                f"{prior.name}-{k:03d}", prior.name, _template(size, shape), gamma, points_per_entry, rng,
            ))
    return ObjectDatabase(entries, labels)


def read_scenes(directory: str | Path, labels: LabelSpace) -> list[tuple[LabelVolume, RoomSpec | None]]:
    """Scene sets written by `write_scenes`, or any directory of .sgsl / .sgsv containers."""
    directory = Path(directory)
    index = directory / "scenes.jsonl"
    scenes: list[tuple[LabelVolume, RoomSpec | None]] = []
    if index.exists():
        for line in index.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            volume, _ = ContainerReader.read_labels(directory / record["file"])
            size = record.get("room_size")
            scenes.append((volume, RoomSpec(tuple(size)) if size else None))
        return scenes
    for path in sorted(directory.iterdir()):
        if path.suffix == ".sgsl":
            scenes.append((ContainerReader.read_labels(path)[0], None))
        elif path.suffix == ".sgsv":
            scenes.append((label_argmax(ContainerReader.read_volume(path, labels)[0]), None))
    return scenes
