"""
Ingestion Tests - label remapping, manifests, back-projection, pose recovery and the pool.
"""

import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from sgs.config import IngestConfig
from sgs.core import GridSpec, LabelSpace, LabelVolume, SemanticVolume, one_hot
from sgs.errors import ConfigurationError, DataError, EstimationFailedError
from sgs.ingestion import (
    DatasetManifest,
    LabeledPointCloud,
    ManifestEntry,
    backproject,
    downsample_to_training,
    estimate_pose_from_wall,
    filter_by_view_angle,
    fit_vertical_plane,
    ingest_manifest,
    load_manifest,
    load_pool,
    load_remap,
    remap_image,
    semantic_image,
    view_angle,
    voxelize,
)
from sgs.projection import Camera, render_view


LABELS = LabelSpace(("bed", "desk", "wall"))
GRID = GridSpec(8, 8, 4, 0.5)


def camera_at(eye, target, width=8, height=6, hfov=70.0, far=None):
    eye = np.asarray(eye, dtype=np.float64)
    rot = Camera.look_at(eye, np.asarray(target, dtype=np.float64))
    return Camera.from_fov(width, height, hfov, rot, eye, far or GRID.diagonal)


def block_scene(grid=GRID):
    """A wall along +Y, a bed block and a desk block."""
    ids = np.full(grid.shape, LABELS.empty_index)
    ids[:, -1, :] = LABELS.index("wall")
    ids[1:4, 4:6, 0:2] = LABELS.index("bed")
    ids[5:7, 1:3, 0:3] = LABELS.index("desk")
    return one_hot(LabelVolume(grid, ids, LABELS.num_classes), LABELS)


def write_frame(path, image):
    """Raw frame as a dataset would ship it: inf depth and id 255 where nothing is hit."""
    ids = image.argmax()
    empty = ids == LABELS.empty_index
    depth = np.where(empty, np.inf, image.depth)
    raw = np.where(empty, 255, ids + 10)
    np.savez(path, depth=depth, labels=raw)


RAW_REMAP = {"10": "bed", "11": "desk", "12": "wall", "255": "drop"}


# =============================================================================
# Remapping and manifests
# =============================================================================

class TestRemap:

    def test_remap_table(self):
        remap = {10: 0, 11: 1}
        ids, unmapped = remap_image(np.array([[10, 11], [99, 10]]), remap, LABELS)
        assert ids.tolist() == [[0, 1], [3, 0]]
        assert unmapped == 1

    def test_identity_without_table(self):
        ids, unmapped = remap_image(np.array([0, 2, 7, -1]), {}, LABELS)
        assert ids.tolist() == [0, 2, 3, 3]
        assert unmapped == 0

    def test_load_remap(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "remap.json"
            path.write_text(json.dumps(RAW_REMAP))
            assert load_remap(path, LABELS) == {10: 0, 11: 1, 12: 2, 255: 3}

    def test_load_remap_bad_key(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "remap.json"
            path.write_text(json.dumps({"ten": "bed"}))
            with pytest.raises(DataError, match="not an integer"):
                load_remap(path, LABELS)


class TestManifest:

    def test_relative_paths(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "manifest.jsonl"
            path.write_text('{"path": "frames/0.npz", "scene": "a"}\n\n{"path": "/abs/1.npz"}\n')
            manifest = load_manifest(path)
            assert len(manifest) == 2
            assert manifest.entries[0].path == Path(tmp) / "frames" / "0.npz"
            assert manifest.entries[0].scene == "a"
            assert manifest.entries[1].path == Path("/abs/1.npz")

    def test_invalid_json_names_line(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "manifest.jsonl"
            path.write_text('{"path": "a.npz"}\n{oops\n')
            with pytest.raises(DataError, match=":2:"):
                load_manifest(path)

    def test_unknown_field(self):
        with pytest.raises(DataError, match="Unknown manifest fields"):
            ManifestEntry.from_record({"path": "a.npz", "colour": "red"}, Path("."))

    def test_bad_pose_length(self):
        with pytest.raises(DataError, match="pose"):
            ManifestEntry.from_record({"path": "a.npz", "pose": [1, 2, 3]}, Path("."))

    def test_camera_needs_full_record(self):
        cam = camera_at([0, -1, 1], [0, 0, 1])
        entry = ManifestEntry.from_record({"path": "a.npz", **cam.to_record()}, Path("."))
        assert entry.camera(10.0).key() == cam.key()
        assert ManifestEntry(Path("a.npz"), intrinsics=(1, 1, 1, 1)).camera(10.0) is None


# =============================================================================
# Back-projection and voxelization
# =============================================================================

class TestBackprojection:

    def test_semantic_image_marks_missing_depth_empty(self):
        cam = camera_at([0, -1, 1], [0, 0, 1], width=2, height=1, far=5.0)
        image = semantic_image(np.array([[1.5, np.inf]]), np.array([[0, 1]]), cam, LABELS.num_channels)
        assert image.depth.tolist() == [[1.5, 5.0]]
        assert image.argmax().tolist() == [[0, LABELS.empty_index]]

    def test_points_land_on_visible_surface(self):
        cam = camera_at([0.1, -1.1, 0.9], [0.1, 1.0, 0.9], width=16, height=12)
        image = render_view(block_scene(), cam)
        cloud = backproject(image)
        assert len(cloud) == int((image.argmax() != LABELS.empty_index).sum())
        idx = GRID.point_to_index(cloud.points)
        assert GRID.inside(idx).all()
        ids = np.argmax(block_scene().probs, axis=-1)[tuple(idx.T)]
        assert np.array_equal(ids, cloud.class_ids)

    def test_voxelize_majority(self):
        cloud_points = np.array([[0.1, 0.1, 0.1]] * 3 + [[0.2, 0.2, 0.2]] * 2)
        cloud = LabeledPointCloud(cloud_points, np.array([1, 1, 0, 0, 0]))
        vol = voxelize(cloud, GRID, LABELS)
        ids = np.argmax(vol.probs, axis=-1)
        assert ids[4, 4, 0] == 0
        assert (ids != LABELS.empty_index).sum() == 1

    def test_voxelize_drops_outside_points(self):
        cloud = LabeledPointCloud(np.array([[100.0, 0.0, 0.0]]), np.array([0]))
        vol = voxelize(cloud, GRID, LABELS)
        assert np.all(np.argmax(vol.probs, axis=-1) == LABELS.empty_index)

    def test_round_trip_reproduces_view(self):
        scene = block_scene()
        rng = np.random.default_rng(0)
        for _ in range(4):
            eye = [rng.uniform(-1.5, 1.5), -1.8, rng.uniform(0.6, 1.4)]
            cam = camera_at(eye, [rng.uniform(-1, 1), 1.5, 1.0], width=32, height=18)
            image = render_view(scene, cam)
            again = render_view(voxelize(backproject(image), GRID, LABELS), cam)
            same = np.isclose(again.depth, image.depth, atol=1e-9)
            assert same.mean() >= 0.98

    def test_downsample_to_training_size(self):
        cam = camera_at([0.1, -1.4, 0.9], [0.1, 1.0, 0.9], width=64, height=36)
        image = render_view(block_scene(), cam)
        small = downsample_to_training(image, GRID, (32, 18), LABELS)
        assert small.depth.shape == (18, 32)
        assert small.camera.hfov_deg == pytest.approx(cam.hfov_deg)
        small.validate()


# =============================================================================
# Pose estimation and view filtering
# =============================================================================

class TestPoseEstimation:

    def test_fit_line_with_outliers(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-2, 2, size=200)
        wall = np.column_stack([x, np.full(200, 2.0) + rng.normal(0, 0.005, 200), np.zeros(200)])
        outliers = rng.uniform(-2, 2, size=(40, 3))
        normal, distance, inliers = fit_vertical_plane(np.vstack([wall, outliers]), threshold=0.03)
        assert abs(normal[1]) == pytest.approx(1.0, abs=1e-3)
        assert distance == pytest.approx(2.0, abs=0.01)
        assert inliers >= 200

    def test_fit_needs_points(self):
        with pytest.raises(EstimationFailedError):
            fit_vertical_plane(np.zeros((1, 3)))

    def test_recovers_pose_facing_wall(self):
        grid = GridSpec(16, 16, 8, 0.25)
        ids = np.full(grid.shape, LABELS.empty_index)
        ids[:, -1, :] = LABELS.index("wall")
        scene = one_hot(LabelVolume(grid, ids, LABELS.num_classes), LABELS)
        eye = np.array([0.3, -0.6, 1.05])
        rot = Camera.look_at(eye, np.array([0.9, 1.75, 1.05]))
        cam = Camera.from_fov(32, 18, 60.0, rot, eye, grid.diagonal)
        image = render_view(scene, cam)
        face_y = grid.origin[1] + (grid.h - 1) * grid.gamma
        estimated = estimate_pose_from_wall(image, LABELS.index("wall"), wall_y=face_y,
                                            camera_height=1.05, threshold=0.02)
        assert np.allclose(estimated.rotation, cam.rotation, atol=1e-6)
        # lateral position along the wall is unobservable
        assert estimated.translation[0] == 0.0
        assert np.allclose(estimated.translation[1:], [-0.6, 1.05], atol=1e-6)

    def test_too_few_wall_pixels(self):
        cam = camera_at([0.0, -1.0, 1.0], [0.0, 1.0, 1.0])
        image = render_view(SemanticVolume.empty(GRID, LABELS), cam)
        with pytest.raises(EstimationFailedError, match="wall pixels"):
            estimate_pose_from_wall(image, LABELS.index("wall"))


class TestViewFilter:

    def test_view_angle(self):
        toward = camera_at([0.0, -1.5, 1.0], [0.0, 0.0, 1.0])
        away = camera_at([0.0, -1.5, 1.0], [0.0, -3.0, 1.0])
        side = camera_at([0.0, -1.5, 1.0], [1.0, -1.5, 1.0])
        center = np.array([0.0, 0.0, 1.0])
        assert view_angle(toward, center) == pytest.approx(0.0, abs=1e-6)
        assert view_angle(away, center) == pytest.approx(180.0)
        assert view_angle(side, center) == pytest.approx(90.0)

    def test_filter_keeps_unposed_entries(self):
        toward = camera_at([0.0, -1.5, 1.0], [0.0, 0.0, 1.0])
        away = camera_at([0.0, -1.5, 1.0], [0.0, -3.0, 1.0])
        entries = [
            ManifestEntry.from_record({"path": "a.npz", **toward.to_record()}, Path(".")),
            ManifestEntry.from_record({"path": "b.npz", **away.to_record()}, Path(".")),
            ManifestEntry(Path("c.npz")),
        ]
        kept = filter_by_view_angle(DatasetManifest(tuple(entries)), 45.0, GRID)
        assert [e.path.name for e in kept.entries] == ["a.npz", "c.npz"]


# =============================================================================
# Pipeline
# =============================================================================

class TestIngestManifest:

    def _dataset(self, tmp, extra=()):
        tmp = Path(tmp)
        (tmp / "frames").mkdir()
        scene = block_scene()
        cams = [
            camera_at([0.1, -1.4, 0.9], [0.0, 0.0, 1.0]),
            camera_at([-1.2, -1.2, 1.2], [0.0, 0.0, 1.0]),
            camera_at([0.1, -1.4, 0.9], [0.1, -3.0, 0.9]),    # faces away from the room
        ]
        lines = []
        for n, cam in enumerate(cams):
            write_frame(tmp / "frames" / f"{n}.npz", render_view(scene, cam))
            lines.append({"path": f"frames/{n}.npz", "scene": "room-1",
                          "room_size": list(GRID.extent), **cam.to_record()})
        lines.extend(extra)
        (tmp / "manifest.jsonl").write_text("".join(json.dumps(r) + "\n" for r in lines))
        (tmp / "remap.json").write_text(json.dumps(RAW_REMAP))
        return tmp, scene, cams

    def test_end_to_end(self):
        with tempfile.TemporaryDirectory() as tmp:
            root, scene, cams = self._dataset(tmp)
            manifest = load_manifest(root / "manifest.jsonl", load_remap(root / "remap.json", LABELS))
            images, report = ingest_manifest(
                manifest, LABELS, GRID, IngestConfig(out_size=(8, 6)), out_dir=root / "pool",
            )
            assert report.entries == 3
            assert report.images == 2
            assert report.filtered == 1
            assert report.scenes == 1
            assert report.unmapped_pixels == 0
            assert set(report.class_names) <= {"bed", "desk", "wall"}
            for image, cam in zip(images, cams):
                assert image.depth.shape == (6, 8)
                expected = render_view(scene, cam)
                assert np.isclose(image.depth, expected.depth, atol=1e-9).mean() >= 0.95

            pool = load_pool(root / "pool", LABELS)
            assert len(pool) == 2
            assert pool.scenes == ["room-1", "room-1"]
            assert pool.room_sizes[0] == pytest.approx(GRID.extent)
            assert json.loads((root / "pool" / "report.json").read_text())["images"] == 2

    def test_missing_frame_raises(self):
        with tempfile.TemporaryDirectory() as tmp:
            cam = camera_at([0.0, -1.5, 1.0], [0.0, 0.0, 1.0])
            root, _, _ = self._dataset(tmp, [{"path": "frames/missing.npz", **cam.to_record()}])
            manifest = load_manifest(root / "manifest.jsonl", load_remap(root / "remap.json", LABELS))
            with pytest.raises(DataError, match="Missing image file"):
                ingest_manifest(manifest, LABELS, GRID, IngestConfig(out_size=(8, 6)))

    def test_skip_bad_entries(self):
        with tempfile.TemporaryDirectory() as tmp:
            cam = camera_at([0.0, -1.5, 1.0], [0.0, 0.0, 1.0])
            root, _, _ = self._dataset(tmp, [{"path": "frames/missing.npz", **cam.to_record()}])
            manifest = load_manifest(root / "manifest.jsonl", load_remap(root / "remap.json", LABELS))
            images, report = ingest_manifest(
                manifest, LABELS, GRID, IngestConfig(out_size=(8, 6), skip_bad=True), threads=2,
            )
            assert report.skipped_entries == 1
            assert len(images) == 2

    def test_pool_class_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            root, _, _ = self._dataset(tmp)
            manifest = load_manifest(root / "manifest.jsonl", load_remap(root / "remap.json", LABELS))
            ingest_manifest(manifest, LABELS, GRID, IngestConfig(out_size=(8, 6)), out_dir=root / "pool")
            with pytest.raises(ConfigurationError):
                load_pool(root / "pool", LabelSpace(("bed",)))

    def test_unposed_frame_without_wall_label(self):
        with tempfile.TemporaryDirectory() as tmp:
            root, _, cams = self._dataset(tmp)
            record = {"path": "frames/0.npz", "intrinsics": [cams[0].fx, cams[0].fy, cams[0].cx, cams[0].cy]}
            (root / "manifest.jsonl").write_text(json.dumps(record) + "\n")
            manifest = load_manifest(root / "manifest.jsonl", load_remap(root / "remap.json", LABELS))
            with pytest.raises(DataError, match="wall_label"):
                ingest_manifest(manifest, LABELS, GRID, IngestConfig(out_size=(8, 6)))
