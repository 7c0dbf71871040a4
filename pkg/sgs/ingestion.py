"""
SGS Ingestion - raw semantic-segmented depth images to the training pool.

Per image:
    load frame        .npz (depth + raw label ids) or .sgsi (semantic image)
    remap labels      raw id -> target class, or dropped (rendered as empty)
    resolve pose      manifest pose, else a vertical wall fitted by RANSAC
    angle filter      keep views whose optical axis is within max_angle of
                      the direction toward the room center
    downsample        backproject -> voxelize -> re-render at out_size

Manifest (one JSON object per line):
    {"path": "frames/0001.npz", "pose": [16 floats] | null,
     "intrinsics": [fx, fy, cx, cy], "size": [w, h], "far_depth": 9.6,
     "scene": "room-17", "room_size": [4.0, 3.6, 2.8], "room_center": [0, 0, 1.4],
     "gravity": [roll_deg, pitch_deg]}
Only "path" is required; relative paths resolve against the manifest directory.

Remap table: {"<raw id>": "<class name>" | "drop", ...}
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from sgs.core import GridSpec, LabelSpace, RoomSpec, SemanticVolume, make_room_mask
from sgs.errors import ConfigurationError, DataError, EstimationFailedError, SGSError
from sgs.projection import Camera, SemanticDepthImage, render_view
from sgs.reader import ContainerReader
from sgs.writer import ContainerWriter

log = logging.getLogger(__name__)

# Points move this far past the visible surface so they land inside the hit voxel
BACKPROJECT_NUDGE = 1e-7

DEFAULT_CAMERA_HEIGHT = 1.5
DROP = "drop"


# =============================================================================
# Types
# =============================================================================

@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    points: np.ndarray      # n x 3, room coordinates (meters)
    class_ids: np.ndarray   # n, in 0..C-1
    skipped: int = 0        # pixels skipped for non-finite depth

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if len(points) != len(ids):
            raise DataError(f"{len(points)} points but {len(ids)} class ids")
        if not np.all(np.isfinite(points)):
            raise DataError("Point coordinates must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "class_ids", ids)

    def __len__(self) -> int:
        return len(self.class_ids)


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    pose: tuple[float, ...] | None = None
    intrinsics: tuple[float, float, float, float] | None = None
    size: tuple[int, int] | None = None
    far_depth: float | None = None
    scene: str | None = None
    room_size: tuple[float, float, float] | None = None
    room_center: tuple[float, float, float] | None = None
    gravity: tuple[float, float] | None = None

    @classmethod
    def from_record(cls, record: dict, base: Path) -> ManifestEntry:
        if not isinstance(record, dict) or "path" not in record:
            raise DataError("Manifest records must be objects with a 'path'")
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(record) - known)
        if unknown:
            raise DataError(f"Unknown manifest fields: {', '.join(unknown)}")

        def floats(key: str, n: int) -> tuple[float, ...] | None:
            value = record.get(key)
            if value is None:
                return None
            if not isinstance(value, list) or len(value) != n:
                raise DataError(f"Manifest field {key!r} needs {n} numbers")
            return tuple(float(v) for v in value)

        path = Path(record["path"])
        size = record.get("size")
        return cls(
            path=path if path.is_absolute() else base / path,
            pose=floats("pose", 16),
            intrinsics=floats("intrinsics", 4),
            size=tuple(int(v) for v in size) if size is not None else None,
            far_depth=float(record["far_depth"]) if record.get("far_depth") is not None else None,
            scene=str(record["scene"]) if record.get("scene") is not None else None,
            room_size=floats("room_size", 3),
            room_center=floats("room_center", 3),
            gravity=floats("gravity", 2),
        )

    def camera(self, default_far: float) -> Camera | None:
        """Camera from the record alone; None unless pose, intrinsics and size are all present."""
        if self.pose is None or self.intrinsics is None or self.size is None:
            return None
        pose = np.asarray(self.pose).reshape(4, 4)
        fx, fy, cx, cy = self.intrinsics
        return Camera(fx, fy, cx, cy, self.size[0], self.size[1], pose[:3, :3], pose[:3, 3],
                      self.far_depth or default_far)


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    label_remap: dict[int, int] = field(default_factory=dict)   # raw id -> class index (C = dropped)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class IngestReport:
    """Pool bookkeeping: images, scenes and classes, plus every exclusion reason."""

    images: int = 0
    scenes: int = 0
    classes: int = 0
    entries: int = 0
    filtered: int = 0
    failed: int = 0
    skipped_entries: int = 0
    skipped_pixels: int = 0
    dropped_points: int = 0
    unmapped_pixels: int = 0
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# =============================================================================
# Loading
# =============================================================================

def load_remap(path: str | Path, labels: LabelSpace) -> dict[int, int]:
    try:
        table = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"Remap table {path} is not valid JSON: {e}") from e
    if not isinstance(table, dict):
        raise DataError("Remap table must map raw label ids to class names")
    remap = {}
    for raw, target in table.items():
        try:
            raw_id = int(raw)
        except ValueError:
            raise DataError(f"Remap key {raw!r} is not an integer label id") from None
        remap[raw_id] = labels.empty_index if target == DROP else labels.index(target)
    return remap


def load_manifest(path: str | Path, remap: dict[int, int] | None = None) -> DatasetManifest:
    path = Path(path)
    entries = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{number}: invalid JSON: {e}") from e
        entries.append(ManifestEntry.from_record(record, path.parent))
    return DatasetManifest(tuple(entries), dict(remap or {}))


def remap_image(raw: np.ndarray, remap: dict[int, int], labels: LabelSpace) -> tuple[np.ndarray, int]:
    """Map raw ids to class indices; dropped and unknown ids become empty. Returns (ids, unmapped count)."""
    raw = np.asarray(raw, dtype=np.int64)
    if not remap:
        out = np.where((raw >= 0) & (raw < labels.num_classes), raw, labels.empty_index)
        return out, 0
    keys = np.array(sorted(remap), dtype=np.int64)
    values = np.array([remap[k] for k in keys], dtype=np.int64)
    pos = np.clip(np.searchsorted(keys, raw), 0, len(keys) - 1)
    known = keys[pos] == raw
    out = np.where(known, values[pos], labels.empty_index)
    return out, int((~known).sum())


def semantic_image(depth: np.ndarray, ids: np.ndarray, camera: Camera, num_channels: int) -> SemanticDepthImage:
    """One-hot image from a depth map and class ids (num_channels - 1 means empty)."""
    empty = num_channels - 1
    depth = np.asarray(depth, dtype=np.float64)
    ids = np.where(np.isfinite(depth) & (depth > 0), ids, empty)
    depth = np.where(ids == empty, camera.far_depth, np.minimum(depth, camera.far_depth))
    return SemanticDepthImage(depth, np.eye(num_channels)[ids], camera)


# =============================================================================
# Back-projection and voxelization
# =============================================================================

def backproject(image: SemanticDepthImage) -> LabeledPointCloud:
    """One room-coordinate point per pixel whose argmax class is not empty."""
    ids = image.argmax()
    depth = image.depth
    finite = np.isfinite(depth)
    keep = (ids != image.empty_index) & finite
    skipped = int(((ids != image.empty_index) & ~finite).sum())
    directions = image.camera.ray_directions()[keep]
    points = image.camera.translation + (depth[keep] + BACKPROJECT_NUDGE)[:, None] * directions
    return LabeledPointCloud(points, ids[keep], skipped)


def count_outside(cloud: LabeledPointCloud, grid: GridSpec) -> int:
    return int((~grid.inside(grid.point_to_index(cloud.points))).sum())


def voxelize(cloud: LabeledPointCloud, grid: GridSpec, labels: LabelSpace) -> SemanticVolume:
    """Majority vote per voxel; ties keep the lowest class index; points outside the grid are dropped."""
    counts = np.zeros((grid.num_voxels, labels.num_classes), dtype=np.int64)
    if len(cloud):
        idx = grid.point_to_index(cloud.points)
        inside = grid.inside(idx)
        if not inside.all():
            log.debug("voxelize: dropped %d points outside the grid", int((~inside).sum()))
        flat = np.ravel_multi_index(idx[inside].T, grid.shape)
        np.add.at(counts, (flat, cloud.class_ids[inside]), 1)
    ids = np.where(counts.any(axis=1), np.argmax(counts, axis=1), labels.empty_index)
    probs = np.eye(labels.num_channels)[ids].reshape(*grid.shape, labels.num_channels)
    return SemanticVolume(grid, labels, probs)


def _generic_labels(num_classes: int) -> LabelSpace:
    return LabelSpace(tuple(f"class{i}" for i in range(num_classes)))


def downsample_to_training(
    image: SemanticDepthImage,
    grid: GridSpec,
    out_size: tuple[int, int] = (32, 18),
    labels: LabelSpace | None = None,
) -> SemanticDepthImage:
    labels = labels or _generic_labels(image.num_channels - 1)
    volume = voxelize(backproject(image), grid, labels)
    return render_view(volume, image.camera.resized(*out_size))


# =============================================================================
# Pose estimation and view filtering
# =============================================================================

def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def level_rotation(roll_deg: float = 0.0, pitch_deg: float = 0.0) -> np.ndarray:
    """Camera-to-room rotation looking along +X, with gravity from roll and pitch."""
    base = Camera.look_at(np.zeros(3), np.array([1.0, 0.0, 0.0]))
    roll, pitch = math.radians(roll_deg), math.radians(pitch_deg)
    # pitch tilts the optical axis down (about camera x), roll spins about the optical axis
    rx = np.array([[1, 0, 0], [0, math.cos(pitch), math.sin(pitch)], [0, -math.sin(pitch), math.cos(pitch)]])
    rz = np.array([[math.cos(roll), -math.sin(roll), 0], [math.sin(roll), math.cos(roll), 0], [0, 0, 1]])
    return base @ rx @ rz


def _remove_yaw(rotation: np.ndarray) -> np.ndarray:
    forward = rotation[:, 2]
    return _rot_z(-math.atan2(forward[1], forward[0])) @ rotation


def fit_vertical_plane(
    points: np.ndarray,
    threshold: float = 0.05,
    iterations: int = 200,
    seed: int = 0,
) -> tuple[np.ndarray, float, int]:
    """RANSAC line fit in the horizontal plane, refined by least squares.

    Returns (unit horizontal normal pointing away from the origin, distance, inliers).
    """
    xy = np.asarray(points, dtype=np.float64)[:, :2]
    if len(xy) < 2:
        raise EstimationFailedError("Need at least two wall points")
    rng = np.random.default_rng(seed)
    best = None
    best_count = 0
    for _ in range(iterations):
        i, j = rng.choice(len(xy), size=2, replace=False)
        direction = xy[j] - xy[i]
        norm = np.linalg.norm(direction)
        if norm < 1e-6:
            continue
        normal = np.array([-direction[1], direction[0]]) / norm
        inliers = np.abs((xy - xy[i]) @ normal) < threshold
        count = int(inliers.sum())
        if count > best_count:
            best, best_count = inliers, count
    if best is None or best_count < 3:
        raise EstimationFailedError("RANSAC found no supported vertical plane")

    inlier_xy = xy[best]
    mean = inlier_xy.mean(axis=0)
    eigvals, eigvecs = np.linalg.eigh(np.cov((inlier_xy - mean).T))
    if eigvals[-1] < 1e-12:
        raise EstimationFailedError("Wall inliers are degenerate (no horizontal extent)")
    normal = eigvecs[:, 0]
    distance = float(normal @ mean)
    if distance < 0:
        normal, distance = -normal, -distance
    if distance < 1e-6:
        raise EstimationFailedError("Fitted wall passes through the camera")
    return normal, distance, best_count


def _estimate_from_mask(
    depth: np.ndarray,
    mask: np.ndarray,
    camera: Camera,
    gravity: np.ndarray,
    wall_y: float,
    camera_height: float,
    threshold: float,
    iterations: int,
    min_pixels: int,
    seed: int,
) -> Camera:
    valid = mask & np.isfinite(depth) & (depth > 0)
    if int(valid.sum()) < min_pixels:
        raise EstimationFailedError(f"Only {int(valid.sum())} wall pixels (need {min_pixels})")
    level = _remove_yaw(gravity)
    rays = camera.with_pose(level, np.zeros(3)).ray_directions()[valid]
    points = depth[valid][:, None] * rays
    normal, distance, _ = fit_vertical_plane(points, threshold, iterations, seed)
    # yaw that turns the camera-to-wall normal into +Y
    theta = math.pi / 2 - math.atan2(normal[1], normal[0])
    rotation = _rot_z(theta) @ level
    translation = np.array([0.0, wall_y - distance, camera_height])
    return camera.with_pose(rotation, translation)


def estimate_pose_from_wall(
    image: SemanticDepthImage,
    wall_class: int,
    wall_y: float = GridSpec().extent[1] / 2,
    camera_height: float | None = None,
    threshold: float = 0.05,
    iterations: int = 200,
    min_pixels: int = 50,
    seed: int = 0,
) -> Camera:
    """Camera facing the +Y wall at wall_y.

    Roll and pitch come from the image camera's rotation (its yaw is ignored);
    the lateral offset along the wall is unobservable, so x is 0.
    """
    if camera_height is None:
        camera_height = float(image.camera.translation[2]) or DEFAULT_CAMERA_HEIGHT
    mask = image.argmax() == wall_class
    return _estimate_from_mask(
        image.depth, mask, image.camera, image.camera.rotation, wall_y,
        camera_height, threshold, iterations, min_pixels, seed,
    )


def view_angle(camera: Camera, room_center: np.ndarray) -> float:
    """Degrees between the optical axis and the ray toward the room center."""
    to_center = np.asarray(room_center, dtype=np.float64) - camera.translation
    norm = np.linalg.norm(to_center)
    if norm < 1e-12:
        return 0.0
    cosine = float(np.clip(camera.optical_axis @ to_center / norm, -1.0, 1.0))
    return math.degrees(math.acos(cosine))


def room_center_for(entry: ManifestEntry, grid: GridSpec) -> np.ndarray:
    """Recorded center, else the room mask centroid (the whole grid when no size is known)."""
    if entry.room_center is not None:
        return np.array(entry.room_center)
    size = entry.room_size or grid.extent
    return make_room_mask(RoomSpec(size), grid).centroid


def filter_by_view_angle(manifest: DatasetManifest, max_angle: float = 45.0, grid: GridSpec | None = None) -> DatasetManifest:
    """Keep entries whose view angle is <= max_angle.

    Entries without a complete camera record are kept here; their angle is
    checked once a pose has been estimated.
    """
    grid = grid or GridSpec()
    kept = []
    for entry in manifest.entries:
        camera = entry.camera(grid.diagonal)
        if camera is None or view_angle(camera, room_center_for(entry, grid)) <= max_angle:
            kept.append(entry)
    return replace(manifest, entries=tuple(kept))


# =============================================================================
# Pipeline
# =============================================================================

@dataclass
class _Outcome:
    image: SemanticDepthImage | None = None
    status: str = "ok"          # ok | filtered | failed | skipped
    skipped_pixels: int = 0
    dropped_points: int = 0
    unmapped_pixels: int = 0
    message: str = ""


def _load_frame(entry: ManifestEntry, labels: LabelSpace, remap: dict[int, int], far: float):
    """(depth, target ids, raw ids, camera without pose or None, unmapped count)."""
    if not entry.path.exists():
        raise DataError(f"Missing image file {entry.path}")
    if entry.path.suffix == ".sgsi":
        image, _ = ContainerReader.read_image(entry.path)
        if image.num_channels != labels.num_channels:
            raise DataError(f"{entry.path}: {image.num_channels - 1} classes, expected {labels.num_classes}")
        ids = image.argmax()
        return image.depth, ids, ids, image.camera, 0
    try:
        with np.load(entry.path) as data:
            depth = np.asarray(data["depth"], dtype=np.float64)
            raw = np.asarray(data["labels"], dtype=np.int64)
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"{entry.path}: unreadable frame ({e})") from e
    if depth.shape != raw.shape or depth.ndim != 2:
        raise DataError(f"{entry.path}: depth {depth.shape} and labels {raw.shape} must be equal 2-D shapes")
    if entry.intrinsics is None:
        raise DataError(f"{entry.path}: manifest entry has no intrinsics")
    ids, unmapped = remap_image(raw, remap, labels)
    fx, fy, cx, cy = entry.intrinsics
    height, width = depth.shape
    camera = Camera(fx, fy, cx, cy, width, height, np.eye(3), np.zeros(3), entry.far_depth or far)
    return depth, ids, raw, camera, unmapped


def ingest_entry(
    entry: ManifestEntry,
    remap: dict[int, int],
    labels: LabelSpace,
    grid: GridSpec,
    ingest,
    far_depth: float | None = None,
) -> _Outcome:
    """Process one manifest entry; `ingest` is an IngestConfig."""
    far = far_depth or grid.diagonal
    depth, ids, raw, camera, unmapped = _load_frame(entry, labels, remap, far)
    if entry.far_depth:
        camera = Camera(camera.fx, camera.fy, camera.cx, camera.cy, camera.width, camera.height,
                        camera.rotation, camera.translation, entry.far_depth)

    if entry.pose is not None:
        pose = np.asarray(entry.pose).reshape(4, 4)
        camera = camera.with_pose(pose[:3, :3], pose[:3, 3])
    elif entry.path.suffix != ".sgsi" or ingest.wall_label is not None:
        if ingest.wall_label is None:
            raise DataError(f"{entry.path}: no pose and no ingest.wall_label to estimate one")
        gravity = level_rotation(*(entry.gravity or (0.0, 0.0)))
        size = entry.room_size or grid.extent
        try:
            camera = _estimate_from_mask(
                depth, raw == ingest.wall_label, camera, gravity, size[1] / 2,
                DEFAULT_CAMERA_HEIGHT, ingest.ransac_threshold, ingest.ransac_iterations,
                ingest.min_wall_pixels, 0,
            )
        except EstimationFailedError as e:
            log.info("pose estimation failed for %s: %s", entry.path, e)
            return _Outcome(status="failed", message=str(e), unmapped_pixels=unmapped)

    angle = view_angle(camera, room_center_for(entry, grid))
    if angle > ingest.max_angle:
        log.debug("filtered %s: view angle %.1f > %.1f", entry.path, angle, ingest.max_angle)
        return _Outcome(status="filtered", unmapped_pixels=unmapped)

    full = semantic_image(depth, ids, camera, labels.num_channels)
    cloud = backproject(full)
    volume = voxelize(cloud, grid, labels)
    image = render_view(volume, camera.resized(*ingest.out_size))
    return _Outcome(
        image=image,
        skipped_pixels=int((~np.isfinite(depth)).sum()),
        dropped_points=count_outside(cloud, grid),
        unmapped_pixels=unmapped,
    )


def ingest_manifest(
    manifest: DatasetManifest,
    labels: LabelSpace,
    grid: GridSpec,
    ingest,
    out_dir: str | Path | None = None,
    threads: int = 1,
    far_depth: float | None = None,
    config_hash: bytes | None = None,
) -> tuple[list[SemanticDepthImage], IngestReport]:
    """Fan out over entries; results merge in manifest order.

    With out_dir, each kept image is written as NNNNN.sgsi and described by a
    line of pool.jsonl (file, scene, room size, camera record).
    """
    report = IngestReport(entries=len(manifest.entries))
    manifest = filter_by_view_angle(manifest, ingest.max_angle, grid)
    report.filtered = report.entries - len(manifest.entries)

    def work(entry: ManifestEntry) -> _Outcome:
        try:
            return ingest_entry(entry, manifest.label_remap, labels, grid, ingest, far_depth)
        except SGSError as e:
            if not ingest.skip_bad:
                raise
            log.warning("skipping %s: %s", entry.path, e)
            return _Outcome(status="skipped", message=str(e))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(work, manifest.entries))
    else:
        outcomes = [work(e) for e in manifest.entries]

    images: list[SemanticDepthImage] = []
    scenes: set[str] = set()
    present = np.zeros(labels.num_classes, dtype=bool)
    records = []
    for entry, outcome in zip(manifest.entries, outcomes):
        report.skipped_pixels += outcome.skipped_pixels
        report.dropped_points += outcome.dropped_points
        report.unmapped_pixels += outcome.unmapped_pixels
        if outcome.status == "filtered":
            report.filtered += 1
        elif outcome.status == "failed":
            report.failed += 1
        elif outcome.status == "skipped":
            report.skipped_entries += 1
        if outcome.image is None:
            continue
        image = outcome.image
        name = f"{len(images):05d}.sgsi"
        images.append(image)
        if entry.scene is not None:
            scenes.add(entry.scene)
        ids = image.argmax()
        present |= np.isin(np.arange(labels.num_classes), ids)
        records.append({
            "file": name,
            "scene": entry.scene,
            "room_size": list(entry.room_size) if entry.room_size else None,
            "camera": image.camera.to_record(),
        })

    report.images = len(images)
    report.scenes = len(scenes)
    report.class_names = [labels.name(i) for i in np.nonzero(present)[0]]
    report.classes = len(report.class_names)

    if out_dir is not None:
        write_pool(images, records, out_dir, config_hash)
        ContainerWriter.write_bytes(
            json.dumps(report.to_dict(), indent=2, sort_keys=True).encode("utf-8"), Path(out_dir) / "report.json"
        )
    log.info("ingested %d images (%d filtered, %d failed, %d skipped)",
             report.images, report.filtered, report.failed, report.skipped_entries)
    return images, report


# =============================================================================
# Training pool on disk
# =============================================================================

POOL_INDEX = "pool.jsonl"


@dataclass
class Pool:
    """Ingested training images with per-image scene tags and room sizes."""

    images: list[SemanticDepthImage]
    scenes: list[str | None]
    room_sizes: list[tuple[float, float, float] | None]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def cameras(self) -> list[Camera]:
        return [image.camera for image in self.images]


def write_pool(
    images: list[SemanticDepthImage],
    records: list[dict],
    out_dir: str | Path,
    config_hash: bytes | None = None,
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for image, record in zip(images, records):
        ContainerWriter.write_image(image, out_dir / record["file"], config_hash)
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    ContainerWriter.write_bytes(lines.encode("utf-8"), out_dir / POOL_INDEX)


def load_pool(pool_dir: str | Path, labels: LabelSpace | None = None) -> Pool:
    pool_dir = Path(pool_dir)
    index = pool_dir / POOL_INDEX
    if not index.exists():
        raise DataError(f"{pool_dir} is not a training pool (missing {POOL_INDEX})")
    images, scenes, sizes = [], [], []
    for line in index.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        image, _ = ContainerReader.read_image(pool_dir / record["file"])
        if labels is not None and image.num_channels != labels.num_channels:
            raise ConfigurationError(
                f"Pool image has {image.num_channels - 1} classes, config has {labels.num_classes}"
            )
        images.append(image)
        scenes.append(record.get("scene"))
        size = record.get("room_size")
        sizes.append(tuple(size) if size else None)
    return Pool(images, scenes, sizes)
