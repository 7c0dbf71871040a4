"""
Export Tests - image previews, scene JSON / OBJ and heat-map CSVs.
"""

import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from sgs.analytics import ViewConfigReport, cooccurrence
from sgs.assembly import ObjectDatabase, Placement, SceneDescription, build_entry
from sgs.core import LabelSpace, RoomSpec
from sgs.export import (
    PGM_MAXVAL,
    cooccurrence_csv,
    depth_pgm,
    labels_legend,
    palette,
    scene_json,
    scene_obj,
    semantics_ppm,
    view_study_csv,
    write_image_previews,
)
from sgs.projection import Camera, SemanticDepthImage


LABELS = LabelSpace(("bed", "desk"))


def small_image():
    depth = np.array([[0.0, 1.0, 2.0], [2.0, 4.0, 4.0]])
    sem = np.zeros((2, 3, 3))
    sem[0, :, 0] = 1.0
    sem[1, :2, 1] = 1.0
    sem[1, 2, 2] = 1.0
    camera = Camera.from_fov(3, 2, 90.0, np.eye(3), [0.0, 0.0, 1.0], 4.0)
    return SemanticDepthImage(depth, sem, camera)


def small_scene():
    db = ObjectDatabase([build_entry("bar", "bed", np.ones((2, 1, 1)), 0.5)], LABELS)
    description = SceneDescription(
        RoomSpec((4.0, 3.0, 2.5)),
        [Placement("bar", "bed", 90.0, (1.0, 0.0, 0.25), 1.0, 0.1)],
        [{"class": "desk", "center": [0.0, 0.0, 0.0], "voxels": 2}],
        3,
    )
    return description, db


# =============================================================================
# Images
# =============================================================================

class TestPreviews:

    def test_palette(self):
        colors = palette(3)
        assert colors.shape == (3, 3)
        assert colors[-1].tolist() == [0, 0, 0]
        assert colors[0].tolist() != colors[1].tolist()

    def test_depth_pgm(self):
        data = depth_pgm(small_image())
        header = b"P5\n3 2\n65535\n"
        assert data.startswith(header)
        values = np.frombuffer(data[len(header):], dtype=">u2")
        assert values.tolist() == [0, PGM_MAXVAL // 4 + 1, PGM_MAXVAL // 2 + 1,
                                   PGM_MAXVAL // 2 + 1, PGM_MAXVAL, PGM_MAXVAL]

    def test_semantics_ppm(self):
        data = semantics_ppm(small_image())
        header = b"P6\n3 2\n255\n"
        assert data.startswith(header)
        rgb = np.frombuffer(data[len(header):], dtype=np.uint8).reshape(2, 3, 3)
        colors = palette(3)
        assert rgb[0, 0].tolist() == colors[0].tolist()
        assert rgb[1, 0].tolist() == colors[1].tolist()
        assert rgb[1, 2].tolist() == [0, 0, 0]

    def test_write_previews(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            depth_path, sem_path = write_image_previews(small_image(), Path(tmpdir) / "view-000")
            assert depth_path.name == "view-000-depth.pgm"
            assert sem_path.name == "view-000-sem.ppm"
            assert depth_path.read_bytes().startswith(b"P5")

    def test_legend(self):
        legend = labels_legend(LABELS)
        assert [entry["name"] for entry in legend] == ["bed", "desk", "empty"]
        assert legend[2]["rgb"] == [0, 0, 0]


# =============================================================================
# Scenes
# =============================================================================

class TestSceneExport:

    def test_json(self):
        description, _ = small_scene()
        data = json.loads(scene_json(description))
        assert data["room"] == [4.0, 3.0, 2.5]
        assert data["dropped"] == 3
        assert data["placements"][0] == {
            "entry": "bar", "class": "bed", "rotation_deg": 90.0,
            "translation": [1.0, 0.0, 0.25], "scale": 1.0, "cost": 0.1,
        }

    def test_obj_box(self):
        description, db = small_scene()
        text = scene_obj(description, db)
        vertices = np.array([[float(v) for v in line.split()[1:]]
                             for line in text.splitlines() if line.startswith("v ")])
        faces = [line for line in text.splitlines() if line.startswith("f ")]
        assert "g bed_000" in text
        assert len(vertices) == 8 and len(faces) == 6
        # a 1.0 x 0.5 x 0.5 box turned 90 degrees about z
        assert np.allclose(vertices.min(axis=0), [0.75, -0.5, 0.0], atol=1e-5)
        assert np.allclose(vertices.max(axis=0), [1.25, 0.5, 0.5], atol=1e-5)

    def test_obj_indices_continue(self):
        description, db = small_scene()
        description.placements.append(Placement("bar", "bed", 0.0, (-1.0, 0.0, 0.25)))
        faces = [line for line in scene_obj(description, db).splitlines() if line.startswith("f ")]
        assert max(int(i) for face in faces for i in face.split()[1:]) == 16


# =============================================================================
# Heat maps
# =============================================================================

class TestHeatMaps:

    def test_cooccurrence_csv(self):
        text = cooccurrence_csv(cooccurrence([{0, 1}, {0}], LABELS))
        lines = text.splitlines()
        assert lines[0] == ",bed,desk"
        assert lines[1] == "bed,1.000000,0.500000"
        assert lines[2] == "desk,1.000000,1.000000"

    def test_cooccurrence_csv_clamped(self):
        text = cooccurrence_csv(cooccurrence([{0, 1}, {0}], LABELS), clamp=0.25)
        assert text.splitlines()[1] == "bed,0.250000,0.250000"

    def test_view_study_csv(self):
        report = ViewConfigReport(np.array([[0.0, 0.5], [0.01, 0.002]]), (1, 2), (45.0, 110.0))
        lines = view_study_csv(report).splitlines()
        assert lines[0] == "views,45,110"
        assert lines[1] == "1,0.000000,0.015000"
        assert lines[2] == "2,0.010000,0.002000"
