"""
SGS Projection - differentiable depth + semantic rendering of semantic volumes.

Pipeline per pixel:
    traverse      exact voxel walk (3D DDA) of the pixel-center ray, near to far
    terminate     ray-stopping probabilities from voxel occupancies
                  q_i = o_i * prod_{j<i} (1 - o_j),  q_escape = prod_i (1 - o_i)
    render_pixel  depth = sum q_i d_i + q_escape * far_depth
                  sem_c = sum_i T_i p_c,i  (T_i = prod_{j<i} p_e,j, the occupancy-
                  conditioned class mass q_i p_c,i / o_i with o_i cancelled)
                  sem_empty = q_escape

render_view/render_backward run the same recurrences vectorized over every
pixel of a camera using a RayBundle: all traces of one camera padded to a
common length with a sentinel voxel that is always empty.

Backward uses suffix recurrences instead of divisions, so occupancies of
exactly 0 or 1 are handled without clamps:
    Q_{L-1} = g_depth * far + g_empty
    Q_{k-1} = e_k Q_k + (1 - e_k) g_depth d_k + sum_c g_c p_c,k
    dL/de_k = T_k (Q_k - g_depth d_k),   dL/dp_c,k = T_k g_c
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from sgs.core import GridSpec, SemanticVolume
from sgs.errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

SEMANTIC_MODES = ("normalized", "raw")

# Pixels per gradient buffer; fixed so results do not depend on the worker count
GRADIENT_CHUNK = 256

# Each bundle holds pixels x max-trace-length indices and depths (~1 MB at 32x18 on 32x32x16)
MAX_CACHED_BUNDLES = 256


# =============================================================================
# Camera
# =============================================================================

@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera; pose maps camera coordinates (x right, y down, z forward) to room coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    far_depth: float

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not self.far_depth > 0:
            raise ConfigurationError(f"far_depth must be positive, got {self.far_depth}")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"Image size must be positive, got {self.width}x{self.height}")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > 1e-6:
            raise ConfigurationError("Camera rotation is not orthonormal")
        if not np.all(np.isfinite(translation)):
            raise ConfigurationError("Camera translation must be finite")

    @classmethod
    def from_fov(
        cls,
        width: int,
        height: int,
        hfov_deg: float,
        rotation: np.ndarray,
        translation: np.ndarray,
        far_depth: float,
    ) -> Camera:
        f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, rotation, translation, far_depth)

    @staticmethod
    def look_at(eye: np.ndarray, target: np.ndarray, up: tuple[float, float, float] = (0.0, 0.0, 1.0)) -> np.ndarray:
        """Rotation whose forward axis points from eye to target."""
        forward = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ConfigurationError("look_at: forward direction is parallel to up")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return np.column_stack([right, down, forward])

    @property
    def hfov_deg(self) -> float:
        return math.degrees(2 * math.atan((self.width / 2) / self.fx))

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    def key(self) -> tuple:
        """Hashable identity used to cache ray bundles."""
        return (
            self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.far_depth,
            *self.rotation.ravel().tolist(), *self.translation.tolist(),
        )

    def pixel_direction(self, u: int, v: int) -> np.ndarray:
        """Unit room-coordinate direction of the ray through the center of pixel (u, v)."""
        d_cam = np.array([(u + 0.5 - self.cx) / self.fx, (v + 0.5 - self.cy) / self.fy, 1.0])
        d = self.rotation @ d_cam
        return d / np.linalg.norm(d)

    def ray_directions(self) -> np.ndarray:
        """Unit directions for every pixel, shape height x width x 3."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        d = d_cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def resized(self, width: int, height: int) -> Camera:
        """Same pose, intrinsics scaled proportionally to a new resolution."""
        sx, sy = width / self.width, height / self.height
        return Camera(
            self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height,
            self.rotation, self.translation, self.far_depth,
        )

    def with_pose(self, rotation: np.ndarray, translation: np.ndarray) -> Camera:
        return Camera(
            self.fx, self.fy, self.cx, self.cy, self.width, self.height,
            rotation, translation, self.far_depth,
        )

    def to_record(self) -> dict:
        pose = np.eye(4)
        pose[:3, :3] = self.rotation
        pose[:3, 3] = self.translation
        return {
            "intrinsics": [self.fx, self.fy, self.cx, self.cy],
            "size": [self.width, self.height],
            "pose": pose.ravel().tolist(),
            "far_depth": self.far_depth,
        }

    @classmethod
    def from_record(cls, record: dict) -> Camera:
        try:
            fx, fy, cx, cy = (float(x) for x in record["intrinsics"])
            width, height = (int(x) for x in record["size"])
            pose = np.asarray(record["pose"], dtype=np.float64).reshape(4, 4)
            far = float(record["far_depth"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed camera record: {e}") from e
        return cls(fx, fy, cx, cy, width, height, pose[:3, :3], pose[:3, 3], far)


# =============================================================================
# Per-ray types
# =============================================================================

@dataclass(frozen=True, eq=False)
class RayTrace:
    """Voxels a ray crosses, near to far, with the ray depth at which each is entered."""

    voxel_indices: np.ndarray   # n x 3 integer (i, j, k)
    entry_depths: np.ndarray    # n, strictly increasing

    def __len__(self) -> int:
        return len(self.entry_depths)


@dataclass(frozen=True, eq=False)
class TerminationDistribution:
    q: np.ndarray
    q_escape: float


@dataclass(frozen=True, eq=False)
class SemanticDepthImage:
    """Depth (meters along the ray) plus per-pixel class probabilities, height x width."""

    depth: np.ndarray
    semantics: np.ndarray
    camera: Camera

    def __post_init__(self) -> None:
        depth = np.asarray(self.depth, dtype=np.float64)
        semantics = np.asarray(self.semantics, dtype=np.float64)
        expected = (self.camera.height, self.camera.width)
        if depth.shape != expected or semantics.shape[:2] != expected or semantics.ndim != 3:
            raise ConfigurationError(
                f"Image arrays {depth.shape}/{semantics.shape} do not match camera {expected}"
            )
        for name, arr in (("depth", depth), ("semantics", semantics)):
            view = arr.view()
            view.flags.writeable = False
            object.__setattr__(self, name, view)

    @property
    def num_channels(self) -> int:
        return self.semantics.shape[-1]

    @property
    def empty_index(self) -> int:
        return self.semantics.shape[-1] - 1

    def argmax(self) -> np.ndarray:
        return np.argmax(self.semantics, axis=-1)

    def validate(self, atol: float = 1e-5) -> None:
        sums = self.semantics.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > atol:
            raise DataError("Pixel semantic vectors must sum to 1")
        if np.any(self.depth < 0) or np.any(self.depth > self.camera.far_depth * (1 + 1e-6)):
            raise DataError("Pixel depths must lie in [0, far_depth]")


# =============================================================================
# Traversal
# =============================================================================

def _dda(grid: GridSpec, origin: np.ndarray, direction: np.ndarray, far_depth: float) -> tuple[list, list]:
    """Amanatides-Woo walk; simultaneous boundary crossings step X, then Y, then Z at once."""
    lo = grid.origin
    hi = lo + np.array(grid.extent)
    shape = grid.shape

    t_near, t_far = 0.0, far_depth
    for axis in range(3):
        o, d = origin[axis], direction[axis]
        if d == 0.0:
            if o < lo[axis] or o > hi[axis]:
                return [], []
            continue
        t0 = (lo[axis] - o) / d
        t1 = (hi[axis] - o) / d
        if t0 > t1:
            t0, t1 = t1, t0
        t_near = max(t_near, t0)
        t_far = min(t_far, t1)
    if t_near >= t_far:
        return [], []

    entry = origin + t_near * direction
    idx = [min(max(int(math.floor((entry[a] - lo[a]) / grid.gamma)), 0), shape[a] - 1) for a in range(3)]
    step = [0, 0, 0]
    t_max = [math.inf, math.inf, math.inf]
    t_delta = [math.inf, math.inf, math.inf]
    for axis in range(3):
        d = direction[axis]
        if d > 0:
            step[axis] = 1
            boundary = lo[axis] + (idx[axis] + 1) * grid.gamma
        elif d < 0:
            step[axis] = -1
            boundary = lo[axis] + idx[axis] * grid.gamma
        else:
            continue
        t_max[axis] = (boundary - origin[axis]) / d
        t_delta[axis] = grid.gamma / abs(d)

    voxels: list[tuple[int, int, int]] = []
    depths: list[float] = []
    t = t_near
    while t < t_far:
        voxels.append((idx[0], idx[1], idx[2]))
        depths.append(t)
        t_next = min(t_max)
        if t_next == math.inf:
            break
        # tied crossings step together: a ray through an edge or corner skips the
        # voxels it only touches, so entry depths stay strictly increasing
        for axis in range(3):
            if t_max[axis] == t_next:
                idx[axis] += step[axis]
                t_max[axis] += t_delta[axis]
        if not all(0 <= idx[a] < shape[a] for a in range(3)):
            break
        t = t_next
    return voxels, depths


def traverse(grid: GridSpec, camera: Camera, pixel: tuple[int, int]) -> RayTrace:
    """Voxels intersected by the central ray of `pixel` = (u, v), truncated at grid exit or far_depth."""
    u, v = pixel
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ConfigurationError(f"Pixel {pixel} outside a {camera.width}x{camera.height} image")
    voxels, depths = _dda(grid, camera.translation, camera.pixel_direction(u, v), camera.far_depth)
    return RayTrace(
        np.array(voxels, dtype=np.int64).reshape(-1, 3),
        np.array(depths, dtype=np.float64),
    )


# =============================================================================
# Single-ray DRC (reference path)
# =============================================================================

def terminate(volume: SemanticVolume, trace: RayTrace) -> TerminationDistribution:
    if len(trace) == 0:
        return TerminationDistribution(np.zeros(0), 1.0)
    i, j, k = trace.voxel_indices.T
    e = volume.empty_probs[i, j, k]
    transmittance = np.concatenate([[1.0], np.cumprod(e)])
    q = transmittance[:-1] * (1.0 - e)
    return TerminationDistribution(q, float(transmittance[-1]))


def render_pixel(
    volume: SemanticVolume,
    trace: RayTrace,
    far_depth: float,
    semantic_mode: str = "normalized",
) -> tuple[float, np.ndarray]:
    term = terminate(volume, trace)
    sem = np.zeros(volume.labels.num_channels)
    sem[-1] = term.q_escape
    depth = term.q_escape * far_depth
    if len(trace):
        i, j, k = trace.voxel_indices.T
        p = volume.probs[i, j, k]
        depth += float(np.dot(term.q, trace.entry_depths))
        if semantic_mode == "raw":
            sem[:-1] = term.q @ p[:, :-1]
        else:
            transmittance = np.concatenate([[1.0], np.cumprod(p[:-1, -1])])
            sem[:-1] = transmittance @ p[:, :-1]
    return float(depth), sem


# =============================================================================
# Vectorized rendering over ray bundles
# =============================================================================

@dataclass(frozen=True, eq=False)
class RayBundle:
    """Every pixel trace of one camera, padded to a common length.

    index: P x L flat voxel ids (C order over w x h x d); padding uses the
           sentinel id grid.num_voxels, which always reads as empty
    depth: P x L entry depths (0 in padding)
    """

    grid: GridSpec
    camera: Camera
    index: np.ndarray
    depth: np.ndarray

    @property
    def num_pixels(self) -> int:
        return self.index.shape[0]

    @classmethod
    def build(cls, grid: GridSpec, camera: Camera) -> RayBundle:
        traces = []
        directions = camera.ray_directions()
        for v in range(camera.height):
            for u in range(camera.width):
                traces.append(_dda(grid, camera.translation, directions[v, u], camera.far_depth))
        longest = max((len(d) for _, d in traces), default=0)
        longest = max(longest, 1)
        index = np.full((len(traces), longest), grid.num_voxels, dtype=np.int64)
        depth = np.zeros((len(traces), longest))
        for p, (voxels, depths) in enumerate(traces):
            if voxels:
                ijk = np.array(voxels, dtype=np.int64)
                index[p, :len(voxels)] = np.ravel_multi_index(ijk.T, grid.shape)
                depth[p, :len(depths)] = depths
        index.flags.writeable = False
        depth.flags.writeable = False
        return cls(grid, camera, index, depth)


_bundle_cache: OrderedDict[tuple, RayBundle] = OrderedDict()


def bundle_for(grid: GridSpec, camera: Camera) -> RayBundle:
    """Cached RayBundle; traces depend only on grid and camera, never on the volume."""
    key = (grid, camera.key())
    bundle = _bundle_cache.get(key)
    if bundle is None:
        bundle = RayBundle.build(grid, camera)
        _bundle_cache[key] = bundle
        if len(_bundle_cache) > MAX_CACHED_BUNDLES:
            _bundle_cache.popitem(last=False)
    else:
        _bundle_cache.move_to_end(key)
    return bundle


def _extended(probs: np.ndarray) -> np.ndarray:
    """Flatten to (V + 1) x (C + 1) with a trailing always-empty sentinel row."""
    channels = probs.shape[-1]
    flat = probs.reshape(-1, channels)
    sentinel = np.zeros((1, channels))
    sentinel[0, -1] = 1.0
    return np.concatenate([flat, sentinel], axis=0)


def _check_mode(semantic_mode: str) -> None:
    if semantic_mode not in SEMANTIC_MODES:
        raise ConfigurationError(f"semantic_mode must be one of {SEMANTIC_MODES}, got {semantic_mode!r}")


def render_bundle(
    probs: np.ndarray,
    bundle: RayBundle,
    semantic_mode: str = "normalized",
) -> tuple[np.ndarray, np.ndarray]:
    """Render flat per-pixel depth (P,) and semantics (P x (C+1)) from a w x h x d x (C+1) array."""
    _check_mode(semantic_mode)
    p = _extended(probs)[bundle.index]
    e = p[..., -1]
    transmittance = np.cumprod(np.concatenate([np.ones((e.shape[0], 1)), e], axis=1), axis=1)
    t_before = transmittance[:, :-1]
    q_escape = transmittance[:, -1]
    q = t_before * (1.0 - e)

    far = bundle.camera.far_depth
    depth = np.sum(q * bundle.depth, axis=1) + q_escape * far
    weights = q if semantic_mode == "raw" else t_before
    sem = np.empty((p.shape[0], p.shape[-1]))
    sem[:, :-1] = np.einsum("pl,plc->pc", weights, p[..., :-1])
    sem[:, -1] = q_escape
    return depth, sem


def _backward_chunk(
    p: np.ndarray,
    depth: np.ndarray,
    far: float,
    g_depth: np.ndarray,
    g_sem: np.ndarray,
    semantic_mode: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradients for a chunk of rays: (d/dp_class: P x L x C, d/dp_empty: P x L)."""
    e = p[..., -1]
    length = e.shape[1]
    transmittance = np.cumprod(np.concatenate([np.ones((e.shape[0], 1)), e[:, :-1]], axis=1), axis=1)
    g_cls = g_sem[:, :-1]
    class_term = np.einsum("pc,plc->pl", g_cls, p[..., :-1])

    grad_e = np.empty_like(e)
    q_suffix = g_depth * far + g_sem[:, -1]
    for k in range(length - 1, -1, -1):
        e_k = e[:, k]
        if semantic_mode == "raw":
            grad_e[:, k] = transmittance[:, k] * (q_suffix - g_depth * depth[:, k] - class_term[:, k])
            q_suffix = e_k * q_suffix + (1.0 - e_k) * (g_depth * depth[:, k] + class_term[:, k])
        else:
            grad_e[:, k] = transmittance[:, k] * (q_suffix - g_depth * depth[:, k])
            q_suffix = e_k * q_suffix + (1.0 - e_k) * g_depth * depth[:, k] + class_term[:, k]

    weight = transmittance * (1.0 - e) if semantic_mode == "raw" else transmittance
    grad_cls = weight[..., None] * g_cls[:, None, :]
    return grad_cls, grad_e


def render_bundle_backward(
    probs: np.ndarray,
    bundle: RayBundle,
    g_depth: np.ndarray,
    g_sem: np.ndarray,
    semantic_mode: str = "normalized",
    threads: int = 1,
) -> np.ndarray:
    """Adjoint of render_bundle: gradient w.r.t. probs given per-pixel gradients."""
    _check_mode(semantic_mode)
    g_depth = np.asarray(g_depth, dtype=np.float64).reshape(-1)
    g_sem = np.asarray(g_sem, dtype=np.float64).reshape(bundle.num_pixels, -1)
    if g_depth.shape[0] != bundle.num_pixels or g_sem.shape[1] != probs.shape[-1]:
        raise ConfigurationError("Adjoint shapes do not match the rendered image")

    ext = _extended(probs)
    channels = probs.shape[-1]
    starts = list(range(0, bundle.num_pixels, GRADIENT_CHUNK))

    def work(start: int) -> np.ndarray:
        stop = start + GRADIENT_CHUNK
        index = bundle.index[start:stop]
        grad_cls, grad_e = _backward_chunk(
            ext[index], bundle.depth[start:stop], bundle.camera.far_depth,
            g_depth[start:stop], g_sem[start:stop], semantic_mode,
        )
        buffer = np.zeros((ext.shape[0], channels))
        flat = index.reshape(-1)
        np.add.at(buffer[:, :-1], flat, grad_cls.reshape(-1, channels - 1))
        np.add.at(buffer[:, -1], flat, grad_e.reshape(-1))
        return buffer

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            buffers = list(pool.map(work, starts))
    else:
        buffers = [work(s) for s in starts]

    total = np.zeros((ext.shape[0], channels))
    for buffer in buffers:  # fixed reduction order
        total += buffer
    return total[:-1].reshape(probs.shape)


# =============================================================================
# Image-level API
# =============================================================================

def render_view(
    volume: SemanticVolume,
    camera: Camera,
    semantic_mode: str = "normalized",
) -> SemanticDepthImage:
    bundle = bundle_for(volume.grid, camera)
    depth, sem = render_bundle(volume.probs, bundle, semantic_mode)
    return SemanticDepthImage(
        depth.reshape(camera.height, camera.width),
        sem.reshape(camera.height, camera.width, -1),
        camera,
    )


def render_backward(
    volume: SemanticVolume,
    camera: Camera,
    g_depth: np.ndarray,
    g_sem: np.ndarray,
    semantic_mode: str = "normalized",
    threads: int = 1,
) -> np.ndarray:
    """Per-voxel gradient (w x h x d x (C+1)) of a scalar loss given its image-space gradients."""
    g_depth = np.asarray(g_depth)
    g_sem = np.asarray(g_sem)
    if g_depth.shape != (camera.height, camera.width) or g_sem.shape[:2] != (camera.height, camera.width):
        raise ConfigurationError("Adjoint shapes do not match the rendered image")
    bundle = bundle_for(volume.grid, camera)
    return render_bundle_backward(volume.probs, bundle, g_depth, g_sem, semantic_mode, threads)


def first_hit_depth(volume: SemanticVolume, camera: Camera) -> np.ndarray:
    """Depth of the first voxel whose argmax is not empty; far_depth when the ray escapes."""
    bundle = bundle_for(volume.grid, camera)
    labels = np.argmax(volume.probs, axis=-1).reshape(-1)
    labels = np.concatenate([labels, [volume.labels.empty_index]])
    hit = labels[bundle.index] != volume.labels.empty_index
    out = np.full(bundle.num_pixels, camera.far_depth)
    any_hit = hit.any(axis=1)
    first = np.argmax(hit, axis=1)
    rows = np.nonzero(any_hit)[0]
    out[rows] = bundle.depth[rows, first[rows]]
    return out.reshape(camera.height, camera.width)
