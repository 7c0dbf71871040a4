"""
SGS Analytics - scene statistics used to pick the view configuration and to
judge generated scenes.

    cooccurrence         C x C map: entry (a, b) = scenes with a and b / scenes with a
    view_config_study    co-occurrence difference of random view combinations
                         vs. ground-truth scenes, over (view count x coverage)
    depth_distribution   normalized histogram of non-escape pixel depths, plus W1

Panoramas are class-visibility strips: for each whole-degree azimuth around
the room center (eye height 1.5 m), the number of rays whose first hit is
each class. A view of coverage c starting at azimuth a sees the columns
a .. a + c - 1; a class is present when at least `presence_pixels` rays see it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from sgs.core import GridSpec, LabelSpace, LabelVolume, RoomSpec, SemanticVolume, label_argmax
from sgs.errors import ConfigurationError, DataError
from sgs.projection import Camera, SemanticDepthImage, bundle_for

log = logging.getLogger(__name__)

DENOMINATORS = ("appears", "alone")
EYE_HEIGHT = 1.5
FULL_TURN = 360
PANORAMA_VFOV_DEG = 60.0
HEATMAP_CLAMP = 1.5e-2
RIG_DIRECTIONS = ((1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0))


# =============================================================================
# Co-occurrence
# =============================================================================

@dataclass(frozen=True, eq=False)
class CooccurrenceMap:
    """Rows and columns follow the label space's class order."""

    matrix: np.ndarray
    labels: LabelSpace

    def to_rows(self) -> list[list[float]]:
        return [[float(x) for x in row] for row in self.matrix]


def _class_index(item, labels: LabelSpace) -> int:
    index = labels.index(item) if isinstance(item, str) else int(item)
    if not 0 <= index < labels.num_classes:
        raise DataError(f"Class {item!r} is not an object class of the label space")
    return index


def presence_matrix(scenes: list, labels: LabelSpace) -> np.ndarray:
    """Boolean scenes x C matrix from class-presence sets (names or indices)."""
    out = np.zeros((len(scenes), labels.num_classes), dtype=bool)
    for s, scene in enumerate(scenes):
        for item in scene:
            out[s, _class_index(item, labels)] = True
    return out


def cooccurrence(scenes: list, labels: LabelSpace, denominator: str = "appears") -> CooccurrenceMap:
    """
    Scene-level conditional co-presence.

    denominator="appears": (a, b) = |a and b| / |a|
    denominator="alone":   (a, b) = |a and b| / |a is the only class|, capped at 1
    Rows with a zero denominator are zero; the diagonal is 1 for present classes.
    """
    if denominator not in DENOMINATORS:
        raise ConfigurationError(f"denominator must be one of {DENOMINATORS}, got {denominator!r}")
    present = presence_matrix(scenes, labels).astype(np.float64)
    together = present.T @ present
    if denominator == "appears":
        denom = present.sum(axis=0)
    else:
        alone = present.sum(axis=1) == 1
        denom = present[alone].sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        matrix = np.where(denom[:, None] > 0, together / np.maximum(denom[:, None], 1.0), 0.0)
    matrix = np.minimum(matrix, 1.0)
    np.fill_diagonal(matrix, (present.sum(axis=0) > 0).astype(np.float64))
    return CooccurrenceMap(matrix, labels)


def cooccurrence_diff(gt: CooccurrenceMap, approx: CooccurrenceMap) -> float:
    """Mean absolute entrywise difference."""
    if gt.labels != approx.labels:
        raise ConfigurationError("Co-occurrence maps use different label spaces")
    return float(np.mean(np.abs(gt.matrix - approx.matrix)))


def clamp_heatmap(values: np.ndarray, clamp: float = HEATMAP_CLAMP) -> np.ndarray:
    return np.minimum(np.asarray(values, dtype=np.float64), clamp)


# =============================================================================
# Class presence
# =============================================================================

def presence_set(image: SemanticDepthImage, presence_pixels: int = 4) -> frozenset[int]:
    """Object classes that are the argmax of at least `presence_pixels` pixels."""
    counts = np.bincount(image.argmax().ravel(), minlength=image.num_channels)
    return frozenset(int(c) for c in np.nonzero(counts[:-1] >= presence_pixels)[0])


def combination_presence(images: list[SemanticDepthImage], presence_pixels: int = 4) -> frozenset[int]:
    out: frozenset[int] = frozenset()
    for image in images:
        out |= presence_set(image, presence_pixels)
    return out


def scene_classes(volume: SemanticVolume | LabelVolume) -> frozenset[int]:
    """Object classes present anywhere in a scene volume."""
    labels = label_argmax(volume) if isinstance(volume, SemanticVolume) else volume
    ids = np.unique(labels.ids)
    return frozenset(int(i) for i in ids if i != labels.empty_index)


# =============================================================================
# Panoramas and the view-configuration study
# =============================================================================

@dataclass(frozen=True, eq=False)
class Panorama:
    """counts[a, c]: rays at azimuth column a (degrees) whose first hit has class c; C+1 columns."""

    counts: np.ndarray

    def view_counts(self, start_deg: int, coverage_deg: float) -> np.ndarray:
        width = min(FULL_TURN, int(round(coverage_deg)))
        columns = (start_deg + np.arange(width)) % FULL_TURN
        return self.counts[columns].sum(axis=0)

    def view_presence(self, start_deg: int, coverage_deg: float, presence_pixels: int = 4) -> frozenset[int]:
        counts = self.view_counts(start_deg, coverage_deg)[:-1]
        return frozenset(int(c) for c in np.nonzero(counts >= presence_pixels)[0])


def panorama_camera(azimuth_deg: float, rows: int, height: float, far_depth: float) -> Camera:
    """One-pixel-wide strip looking along `azimuth_deg` from (0, 0, height)."""
    eye = np.array([0.0, 0.0, height])
    a = math.radians(azimuth_deg + 0.5)
    target = eye + np.array([math.cos(a), math.sin(a), 0.0])
    fy = (rows / 2) / math.tan(math.radians(PANORAMA_VFOV_DEG) / 2)
    fx = 0.5 / math.tan(math.radians(0.5))
    return Camera(fx, fy, 0.5, rows / 2, 1, rows, Camera.look_at(eye, target), eye, far_depth)


def first_hit_labels(labels: LabelVolume, camera: Camera) -> np.ndarray:
    """Per-pixel label of the first non-empty voxel along each ray; empty index on escape."""
    bundle = bundle_for(labels.grid, camera)
    flat = np.concatenate([labels.ids.reshape(-1), [labels.empty_index]])
    along = flat[bundle.index]
    hit = along != labels.empty_index
    first = np.argmax(hit, axis=1)
    out = np.where(hit.any(axis=1), along[np.arange(len(along)), first], labels.empty_index)
    return out.reshape(camera.height, camera.width)


def render_panorama(
    volume: SemanticVolume | LabelVolume,
    room: RoomSpec | None = None,
    rows: int = 9,
    height: float = EYE_HEIGHT,
) -> Panorama:
    labels = label_argmax(volume) if isinstance(volume, SemanticVolume) else volume
    grid = labels.grid
    if room is not None and room.size_psi[2] < height:
        height = room.size_psi[2] / 2
    counts = np.zeros((FULL_TURN, labels.num_classes + 1), dtype=np.int64)
    for azimuth in range(FULL_TURN):
        camera = panorama_camera(azimuth, rows, height, grid.diagonal)
        hits = first_hit_labels(labels, camera).ravel()
        counts[azimuth] = np.bincount(hits, minlength=labels.num_classes + 1)
    return Panorama(counts)


@dataclass
class ViewConfigReport:
    """differences[i, j]: co-occurrence difference at view_counts[i] views of coverages[j] degrees."""

    differences: np.ndarray
    view_counts: tuple[int, ...]
    coverages: tuple[float, ...]
    clamp: float = HEATMAP_CLAMP

    def cell(self, views: int, coverage: float) -> float:
        return float(self.differences[self.view_counts.index(views), self.coverages.index(coverage)])

    def clamped(self) -> np.ndarray:
        return clamp_heatmap(self.differences, self.clamp)

    def to_dict(self) -> dict:
        return {
            "view_counts": list(self.view_counts),
            "coverages": list(self.coverages),
            "differences": self.differences.tolist(),
            "clamp": self.clamp,
        }


def view_config_study(
    gt_scenes: list[tuple[frozenset, Panorama]],
    labels: LabelSpace,
    view_counts=(1, 2, 4, 6, 8),
    coverages=(45.0, 70.0, 90.0, 110.0, 130.0, 180.0),
    samples: int = 2000,
    rng: np.random.Generator | None = None,
    presence_pixels: int = 4,
    denominator: str = "appears",
    single_scene: bool = False,
) -> ViewConfigReport:
    """
    For every (count, coverage) cell draw `samples` combinations of `count`
    views, each from a random scene (or all from one scene with
    `single_scene`) at a random whole-degree azimuth, and compare the
    co-occurrence map of the combinations' presence sets with the map of
    the ground-truth scene sets.
    """
    if not gt_scenes:
        raise DataError("The view study needs at least one ground-truth scene")
    rng = rng or np.random.default_rng(0)
    gt_map = cooccurrence([s for s, _ in gt_scenes], labels, denominator)
    view_counts, coverages = tuple(int(v) for v in view_counts), tuple(float(c) for c in coverages)
    seeds = rng.integers(0, 2**63 - 1, size=(len(view_counts), len(coverages)))
    diffs = np.zeros((len(view_counts), len(coverages)))
    for i, count in enumerate(view_counts):
        for j, coverage in enumerate(coverages):
            cell_rng = np.random.default_rng(int(seeds[i, j]))
            combos = []
            for _ in range(samples):
                if single_scene:
                    scenes = np.full(count, cell_rng.integers(len(gt_scenes)))
                else:
                    scenes = cell_rng.integers(len(gt_scenes), size=count)
                starts = cell_rng.integers(FULL_TURN, size=count)
                seen: frozenset[int] = frozenset()
                for s, a in zip(scenes, starts):
                    seen |= gt_scenes[int(s)][1].view_presence(int(a), coverage, presence_pixels)
                combos.append(seen)
            diffs[i, j] = cooccurrence_diff(gt_map, cooccurrence(combos, labels, denominator))
            log.debug("view study: %d views x %.0f deg -> %.5f", count, coverage, diffs[i, j])
    return ViewConfigReport(diffs, view_counts, coverages)


# =============================================================================
# Depth distribution
# =============================================================================

@dataclass(frozen=True, eq=False)
class DepthHistogram:
    """Normalized bin masses over equal-width bins `edges` (meters)."""

    mass: np.ndarray
    edges: np.ndarray

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])


def non_escape_depths(image: SemanticDepthImage) -> np.ndarray:
    """Depths of pixels whose escape (empty-channel) probability is below 1/2."""
    return image.depth[image.semantics[..., -1] < 0.5]


def depth_distribution(
    images: list[SemanticDepthImage],
    bins: int = 32,
    max_depth: float | None = None,
) -> DepthHistogram:
    if not images:
        raise DataError("depth_distribution needs at least one image")
    if max_depth is None:
        max_depth = max(image.camera.far_depth for image in images)
    edges = np.linspace(0.0, max_depth, bins + 1)
    depths = np.concatenate([non_escape_depths(image) for image in images])
    counts, _ = np.histogram(np.clip(depths, 0.0, max_depth), bins=edges)
    total = counts.sum()
    mass = counts / total if total else np.zeros(bins)
    return DepthHistogram(mass.astype(np.float64), edges)


def wasserstein1(a: DepthHistogram, b: DepthHistogram) -> float:
    """Earth mover's distance between two histograms on the same bins (meters)."""
    if a.edges.shape != b.edges.shape or not np.allclose(a.edges, b.edges):
        raise ConfigurationError("Histograms must share bin edges")
    return float(np.sum(np.abs(np.cumsum(a.mass) - np.cumsum(b.mass))) * a.width)


def center_rig(
    grid: GridSpec,
    room: RoomSpec | None = None,
    size: tuple[int, int] = (32, 18),
    hfov_deg: float = 110.0,
    far_depth: float | None = None,
) -> list[Camera]:
    """Four cameras at the room center, 1.5 m up, looking along +X, -X, +Y, -Y."""
    height = EYE_HEIGHT
    if room is not None:
        height = min(height, room.size_psi[2] / 2)
    eye = np.array([0.0, 0.0, height])
    far = far_depth or grid.diagonal
    cams = []
    for dx, dy in RIG_DIRECTIONS:
        rotation = Camera.look_at(eye, eye + np.array([dx, dy, 0.0]))
        cams.append(Camera.from_fov(size[0], size[1], hfov_deg, rotation, eye, far))
    return cams
