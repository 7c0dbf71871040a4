"""
SGS Export - debug and interchange views of pipeline artifacts.

  - PGM   depth plane, 16-bit, far depth = white
  - PPM   semantic argmax in a fixed palette (empty = black)
  - JSON  scene descriptions (room + placements)
  - OBJ   one oriented box per placement, a proxy mesh for any viewer
  - CSV   co-occurrence and view-study heat maps

Usage:
    from sgs.export import write_image_previews, scene_obj

    write_image_previews(image, Path("out/view-000"))
    Path("scene.obj").write_text(scene_obj(description, db))
"""

from __future__ import annotations

import colorsys
import io
import json
from pathlib import Path

import numpy as np

from sgs.analytics import CooccurrenceMap, ViewConfigReport, clamp_heatmap
from sgs.assembly import ObjectDatabase, SceneDescription, rot_z
from sgs.core import LabelSpace
from sgs.projection import SemanticDepthImage
from sgs.writer import ContainerWriter

PGM_MAXVAL = 65535


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def palette(num_channels: int) -> np.ndarray:
    """(C+1) x 3 uint8 colors: evenly spaced hues for classes, black for empty."""
    colors = np.zeros((num_channels, 3), dtype=np.uint8)
    classes = num_channels - 1
    for c in range(classes):
        r, g, b = colorsys.hsv_to_rgb(c / max(classes, 1), 0.75, 0.95)
        colors[c] = (round(r * 255), round(g * 255), round(b * 255))
    return colors


def depth_pgm(image: SemanticDepthImage) -> bytes:
    scaled = np.clip(image.depth / image.camera.far_depth, 0.0, 1.0) * PGM_MAXVAL
    height, width = image.depth.shape
    header = f"P5\n{width} {height}\n{PGM_MAXVAL}\n".encode("ascii")
    return header + np.round(scaled).astype(">u2").tobytes()


def semantics_ppm(image: SemanticDepthImage) -> bytes:
    rgb = palette(image.num_channels)[image.argmax()]
    height, width = image.depth.shape
    return f"P6\n{width} {height}\n255\n".encode("ascii") + rgb.tobytes()


def write_image_previews(image: SemanticDepthImage, stem: str | Path) -> tuple[Path, Path]:
    """Write `<stem>-depth.pgm` and `<stem>-sem.ppm`."""
    stem = Path(stem)
    depth_path = stem.with_name(stem.name + "-depth.pgm")
    sem_path = stem.with_name(stem.name + "-sem.ppm")
    ContainerWriter.write_bytes(depth_pgm(image), depth_path)
    ContainerWriter.write_bytes(semantics_ppm(image), sem_path)
    return depth_path, sem_path


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

def scene_json(description: SceneDescription) -> str:
    return json.dumps(description.to_dict(), indent=2, sort_keys=True)


_BOX_FACES = ((1, 2, 4, 3), (5, 7, 8, 6), (1, 5, 6, 2), (3, 4, 8, 7), (1, 3, 7, 5), (2, 6, 8, 4))


def scene_obj(description: SceneDescription, db: ObjectDatabase) -> str:
    """Wavefront OBJ with one group per placement; each box is the entry's extent, rotated and scaled."""
    out = io.StringIO()
    out.write(f"# room {' '.join(f'{v:.3f}' for v in description.room.size_psi)}\n")
    base = 0
    for n, placement in enumerate(description.placements):
        half = db.entry(placement.entry_id).size * placement.scale / 2
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * half
        corners = corners @ rot_z(placement.rotation_deg).T + np.asarray(placement.translation)
        out.write(f"g {placement.class_name}_{n:03d}\n")
        for x, y, z in corners:
            out.write(f"v {x:.5f} {y:.5f} {z:.5f}\n")
        for face in _BOX_FACES:
            out.write("f " + " ".join(str(base + i) for i in face) + "\n")
        base += len(corners)
    return out.getvalue()


# ---------------------------------------------------------------------------
# Heat maps
# ---------------------------------------------------------------------------

def cooccurrence_csv(cooc: CooccurrenceMap, clamp: float | None = None) -> str:
    """Row class, then one column per class; values clamped when `clamp` is set."""
    names = cooc.labels.class_names
    matrix = clamp_heatmap(cooc.matrix, clamp) if clamp is not None else cooc.matrix
    lines = ["," + ",".join(names)]
    for name, row in zip(names, matrix):
        lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


def view_study_csv(report: ViewConfigReport) -> str:
    """Rows are view counts, columns coverages in degrees; cells are clamped differences."""
    values = report.clamped()
    lines = ["views," + ",".join(f"{c:g}" for c in report.coverages)]
    for views, row in zip(report.view_counts, values):
        lines.append(f"{views}," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


def labels_legend(labels: LabelSpace) -> list[dict]:
    colors = palette(labels.num_channels)
    names = [*labels.class_names, "empty"]
    return [{"index": i, "name": n, "rgb": colors[i].tolist()} for i, n in enumerate(names)]
