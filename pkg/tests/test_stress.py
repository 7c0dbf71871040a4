"""
SGS Stress Tests
================
Acceptance-scale runs: the full gradient suite, randomized oracle checks,
render/back-project round trips, the view-configuration trend, a toy
adversarial run and the ablation variants.

Every test here is marked slow. Run:
    python -m pytest tests/test_stress.py -v -m slow
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from sgs.analytics import render_panorama, view_config_study
from sgs.assembly import (
    ObjectDatabase,
    build_entry,
    chamfer,
    chamfer_brute,
    extract_instances,
    filter_instances,
    fit_scale,
    place_points,
    retrieve,
    rot_z,
)
from sgs.config import PipelineConfig, preset
from sgs.core import GridSpec, LabelSpace, LabelVolume, RoomSpec, SemanticVolume, make_room_mask, one_hot
from sgs.gradcheck import run_gradcheck
from sgs.ingestion import backproject, voxelize
from sgs.neural import generate
from sgs.projection import Camera, bundle_for, first_hit_depth, render_view, terminate, traverse
from sgs.stream import read_metrics
from sgs.synth import ClassPrior, SyntheticSceneSpec, synth_database, synth_pool, synth_scenes, wall_cameras
from sgs.training import load_generator, train


pytestmark = pytest.mark.slow


def random_camera(grid: GridSpec, rng: np.random.Generator, size=(8, 6)) -> Camera:
    lo = grid.origin + 0.1
    hi = grid.origin + np.array(grid.extent) - 0.1
    eye = rng.uniform(lo, hi)
    target = rng.uniform(lo, hi)
    while np.linalg.norm((target - eye)[:2]) < 0.5:
        target = rng.uniform(lo, hi)
    return Camera.from_fov(size[0], size[1], 90.0, Camera.look_at(eye, target), eye, grid.diagonal)


def random_probs(grid: GridSpec, channels: int, rng: np.random.Generator) -> np.ndarray:
    logits = rng.normal(size=(*grid.shape, channels)) * 2.0
    probs = np.exp(logits)
    return probs / probs.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

class TestGradientSuite:

    def test_every_primitive_on_100_cases(self):
        report = run_gradcheck(cases=100, seed=0)
        worst = {r.name: r.max_rel_error for r in report.failures}
        assert report.passed, f"failing primitives: {worst}"


# ---------------------------------------------------------------------------
# Ray termination
# ---------------------------------------------------------------------------

class TestTerminationProperties:

    def test_mass_sums_to_one_on_1000_rays(self):
        rng = np.random.default_rng(11)
        labels = LabelSpace(("a", "b", "c"))
        grid = GridSpec(8, 8, 4, 0.5)
        checked = 0
        for _ in range(50):
            volume = SemanticVolume(grid, labels, random_probs(grid, labels.num_channels, rng))
            camera = random_camera(grid, rng)
            for _ in range(20):
                pixel = (int(rng.integers(camera.width)), int(rng.integers(camera.height)))
                term = terminate(volume, traverse(grid, camera, pixel))
                assert abs(term.q.sum() + term.q_escape - 1.0) <= 1e-6
                checked += 1
        assert checked == 1000

    def test_one_hot_depth_equals_first_hit(self):
        rng = np.random.default_rng(12)
        labels = LabelSpace(("a", "b"))
        grid = GridSpec(8, 8, 4, 0.5)
        for _ in range(50):
            ids = np.where(rng.random(grid.shape) < 0.15, rng.integers(0, 2, size=grid.shape), labels.empty_index)
            volume = one_hot(LabelVolume(grid, ids, labels.num_classes), labels)
            camera = random_camera(grid, rng)
            rendered = render_view(volume, camera).depth
            assert np.array_equal(rendered, first_hit_depth(volume, camera))


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def union_find_components(ids: np.ndarray, empty: int) -> set:
    """Face-connected equal-label components by union-find over the flat index."""
    parent = list(range(ids.size))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    flat = ids.reshape(-1)
    strides = np.array([ids.shape[1] * ids.shape[2], ids.shape[2], 1])
    for ijk in np.argwhere(ids != empty):
        a = int(ijk @ strides)
        for axis in range(3):
            if ijk[axis] + 1 < ids.shape[axis]:
                b = a + int(strides[axis])
                if flat[b] == flat[a]:
                    ra, rb = find(a), find(b)
                    if ra != rb:
                        parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list] = {}
    for a in np.nonzero(flat != empty)[0]:
        groups.setdefault(find(int(a)), []).append(int(a))
    return {(int(flat[members[0]]), frozenset(members)) for members in groups.values()}


def brute_retrieve(instance, entries, labels: LabelVolume, rotations, lam: float):
    """Independent argmin: every grid voxel tested against every placement."""
    grid = labels.grid
    centers = grid.voxel_centers().reshape(-1, 3)
    ids = labels.ids.reshape(-1)
    foreign = set(np.nonzero((ids != instance.class_id) & (ids != labels.empty_index))[0].tolist())
    best = None
    for entry in entries:
        for phi in sorted(rotations):
            scale = fit_scale(entry, phi, instance.extent)
            shape = chamfer_brute(instance.points, place_points(entry, phi, instance.center, scale))
            local = ((centers - instance.center) @ rot_z(phi)) / scale + entry.size / 2
            cell = np.floor(local / entry.voxel_size).astype(np.int64)
            inside = np.all((cell >= 0) & (cell < np.array(entry.occupancy.shape)), axis=1)
            placed = set(np.nonzero(inside)[0][entry.occupancy[tuple(cell[inside].T)]].tolist())
            union = placed | foreign
            collision = len(placed & foreign) / len(union) if union else 0.0
            cost = shape + lam * collision
            if best is None or cost < best[0]:
                best = (cost, entry.id, phi)
    return best


class TestOracles:

    def test_flood_fill_matches_union_find(self):
        rng = np.random.default_rng(21)
        grid = GridSpec(16, 16, 8, 0.25)
        for _ in range(200):
            ids = np.where(rng.random(grid.shape) < 0.45, rng.integers(0, 3, size=grid.shape), 3)
            labels = LabelVolume(grid, ids, 3)
            found = {
                (inst.class_id, frozenset(np.ravel_multi_index(inst.voxels.T, grid.shape).tolist()))
                for inst in extract_instances(labels)
            }
            assert found == union_find_components(labels.ids, 3)

    def test_retrieval_matches_brute_force(self):
        rng = np.random.default_rng(22)
        space = LabelSpace(("bed", "desk"))
        grid = GridSpec(12, 12, 8, 0.25)
        rotations = [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0]
        for case in range(50):
            ids = np.full(grid.shape, space.empty_index)
            size = rng.integers(2, 5, size=3)
            lo = rng.integers(2, np.array(grid.shape) - size - 1)
            ids[lo[0]:lo[0] + size[0], lo[1]:lo[1] + size[1], lo[2]:lo[2] + size[2]] = 0
            clutter = (rng.random(grid.shape) < 0.05) & (ids == space.empty_index)
            ids[clutter] = 1
            labels = LabelVolume(grid, ids, space.num_classes)
            instance = next(i for i in extract_instances(labels) if i.class_id == 0)
            entries = []
            for k in range(int(rng.integers(1, 9))):
                template = rng.random(tuple(rng.integers(1, 5, size=3))) < 0.8
                template.flat[0] = True
                entries.append(build_entry(f"bed-{k:03d}", "bed", template, 0.25))
            db = ObjectDatabase(entries, space)
            got = retrieve(instance, db, labels, rotations, lam=1.0)
            cost, entry_id, phi = brute_retrieve(instance, db.by_class(0), labels, rotations, 1.0)
            assert (got.entry_id, got.phi) == (entry_id, phi), f"case {case}"
            assert got.cost == pytest.approx(cost, abs=1e-12)

    def test_chamfer_grid_matches_brute_force_bitwise(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            a = rng.uniform(-2.0, 2.0, size=(int(rng.integers(1, 300)), 3))
            b = rng.uniform(-2.0, 2.0, size=(int(rng.integers(1, 300)), 3))
            assert chamfer(a, b) == chamfer_brute(a, b)


# ---------------------------------------------------------------------------
# Round trip
# ---------------------------------------------------------------------------

class TestRoundTrip:

    def test_backprojection_recovers_visible_voxels(self):
        config = preset("reduced")
        grid = GridSpec(config.grid.w, config.grid.h, config.grid.d, config.grid.gamma)
        labels = LabelSpace(config.labels.classes)
        rng = np.random.default_rng(31)
        scenes = synth_scenes(SyntheticSceneSpec.default(labels), 50, grid, labels, rng)
        for number, scene in enumerate(scenes):
            truth = scene.labels.ids.reshape(-1)
            for camera in wall_cameras(scene, grid, 2, rng):
                recovered = voxelize(backproject(render_view(scene.volume, camera)), grid, labels)
                got = np.argmax(recovered.probs, axis=-1).reshape(-1)
                bundle = bundle_for(grid, camera)
                along = np.concatenate([truth, [labels.empty_index]])[bundle.index]
                hit = along != labels.empty_index
                rows = np.nonzero(hit.any(axis=1))[0]
                visible = bundle.index[rows, np.argmax(hit[rows], axis=1)]
                assert np.array_equal(got[visible], truth[visible]), f"scene {number}"


# ---------------------------------------------------------------------------
# View configuration
# ---------------------------------------------------------------------------

class TestViewStudyTrend:

    def test_more_coverage_lowers_difference(self):
        config = preset("reduced")
        grid = GridSpec(config.grid.w, config.grid.h, config.grid.d, config.grid.gamma)
        labels = LabelSpace(config.labels.classes)
        rng = np.random.default_rng(41)
        scenes = synth_scenes(SyntheticSceneSpec.default(labels), 200, grid, labels, rng)
        gt = [(scene.classes, render_panorama(scene.labels, scene.room)) for scene in scenes]
        coverages = (45.0, 70.0, 90.0, 110.0)
        report = view_config_study(gt, labels, (1, 4), coverages, samples=2000, rng=np.random.default_rng(42))
        assert report.cell(4, 110.0) < report.cell(1, 45.0)
        at_four = report.differences[1]
        assert np.all(np.diff(at_four) <= 2e-3), at_four


# ---------------------------------------------------------------------------
# Toy adversarial run
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    config = preset("reduced")
    config = PipelineConfig.from_dict({**config.to_dict(), "seed": 7})
    grid = GridSpec(config.grid.w, config.grid.h, config.grid.d, config.grid.gamma)
    labels = LabelSpace(config.labels.classes)
    rng = np.random.default_rng(51)
    scenes = synth_scenes(SyntheticSceneSpec.default(labels), 125, grid, labels, rng)
    pool = synth_pool(scenes, grid, 4, rng, size=tuple(config.network.image_size))
    out = tmp_path_factory.mktemp("toy")
    result = train(pool, config, out)
    return config, result


class TestToyRun:

    def test_trends(self, toy_run):
        _, result = toy_run
        records = read_metrics(result.metrics_path)
        first, last = records[0], records[-1]
        assert first["epoch"] == 0
        assert last["outside_occupancy"] < 0.05
        assert last["depth_w1"] <= 0.5 * first["depth_w1"]
        assert last["cooc_diff"] <= 0.5 * first["cooc_diff"]

    def test_outlier_filter_keeps_most_instances(self, toy_run):
        config, result = toy_run
        gan, _, _ = load_generator(result.checkpoint)
        grid, labels = gan.grid, gan.labels
        db = synth_database(labels, grid.gamma)
        rng = np.random.default_rng(52)
        total = dropped = 0
        for _ in range(32):
            fraction = rng.uniform(0.6, 1.0, size=2)
            room = RoomSpec((
                math.floor(fraction[0] * grid.w) * grid.gamma,
                math.floor(fraction[1] * grid.h) * grid.gamma,
                grid.d * grid.gamma,
            ))
            volume = generate(rng.normal(size=config.network.latent_dim), make_room_mask(room, grid), gan.generator)
            instances = extract_instances(LabelVolume(grid, np.argmax(volume.probs, axis=-1), labels.num_classes))
            kept, lost = filter_instances(instances, db)
            total += len(instances)
            dropped += lost
        assert total > 0
        assert dropped / total < 0.10


# ---------------------------------------------------------------------------
# Ablations and determinism
# ---------------------------------------------------------------------------

ABLATION_CLASSES = ("bed", "desk")


def ablation_config(variant: str, views: int, seed: int = 5) -> PipelineConfig:
    return PipelineConfig.from_dict({
        "seed": seed,
        "grid": {"w": 8, "h": 8, "d": 4, "gamma": 0.5},
        "labels": {"classes": list(ABLATION_CLASSES)},
        "network": {"variant": variant, "latent_dim": 4, "width_scale": 1 / 32, "head_width": 8,
                    "image_size": [16, 16]},
        "train": {"batch_size": 2, "views": views, "epochs": 1, "checkpoint_every": 1,
                  "steps_per_epoch": 1, "depth_bins": 8},
    })


@pytest.fixture(scope="module")
def ablation_pool():
    grid = GridSpec(8, 8, 4, 0.5)
    labels = LabelSpace(ABLATION_CLASSES)
    spec = SyntheticSceneSpec((
        ClassPrior("bed", (0.0, 1.0), (1.0, 1.0, 0.5), (1.5, 1.0, 0.5), wall=True),
        ClassPrior("desk", (0.0, 1.0), (0.5, 0.5, 0.5), (1.0, 0.5, 0.5)),
    ))
    rng = np.random.default_rng(61)
    return synth_pool(synth_scenes(spec, 3, grid, labels, rng), grid, 4, rng, size=(16, 16))


class TestAblations:

    @pytest.mark.parametrize("variant", ["joint", "unified", "split"])
    @pytest.mark.parametrize("views", [1, 2, 6, 8])
    def test_variant_trains_one_epoch(self, variant, views, ablation_pool, tmp_path):
        result = train(ablation_pool, ablation_config(variant, views), tmp_path)
        last = read_metrics(result.metrics_path)[-1]
        assert last["epoch"] == 1
        for key in ("d_loss", "g_loss", "mask_penalty", "depth_w1", "cooc_diff"):
            assert math.isfinite(last[key]), key

    def test_training_is_deterministic(self, ablation_pool, tmp_path):
        config = ablation_config("joint", 2)
        first = train(ablation_pool, config, tmp_path / "a")
        second = train(ablation_pool, config, tmp_path / "b")
        assert first.checkpoint.read_bytes() == second.checkpoint.read_bytes()
        assert first.metrics_path.read_text() == second.metrics_path.read_text()

    def test_generation_is_deterministic(self, ablation_pool, tmp_path):
        result = train(ablation_pool, ablation_config("joint", 2), tmp_path)
        gan, config, _ = load_generator(result.checkpoint)
        mask = make_room_mask(RoomSpec((3.0, 3.0, 2.0)), gan.grid)
        z = np.random.default_rng(config.seed).normal(size=config.network.latent_dim)
        a = generate(z, mask, gan.generator)
        b = generate(z, mask, gan.generator)
        assert np.array_equal(a.probs, b.probs)
