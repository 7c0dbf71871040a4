"""
Training Tests - view sampling, losses, alternating updates, checkpoints and resume.
"""

import json
import math
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from sgs import training
from sgs.autodiff import Tensor
from sgs.config import PipelineConfig
from sgs.core import GridSpec, LabelSpace, RoomSpec, SemanticVolume, make_room_mask, mask_empty_penalty
from sgs.errors import ConfigurationError, DataError, NumericalFailure
from sgs.ingestion import Pool
from sgs.neural import Adam, SceneGAN
from sgs.reader import ContainerReader
from sgs.stream import read_metrics
from sgs.synth import ClassPrior, SyntheticSceneSpec, synth_pool, synth_scenes
from sgs.training import (
    CameraDistribution,
    RoomSizeDistribution,
    ViewCombination,
    checkpoint_path,
    discriminator_loss,
    discriminator_step,
    fake_views,
    generator_adversarial_loss,
    generator_step,
    latest_checkpoint,
    load_generator,
    mask_penalty,
    real_batch,
    sample_fake_batch,
    sample_fake_views,
    sample_real_combination,
    train,
)


CLASSES = ("bed", "desk")
IMAGE = (16, 16)


def tiny_config(**train_overrides) -> PipelineConfig:
    train_section = {
        "batch_size": 2,
        "views": 2,
        "epochs": 2,
        "checkpoint_every": 1,
        "steps_per_epoch": 1,
        "depth_bins": 8,
        **train_overrides,
    }
    return PipelineConfig.from_dict({
        "seed": 3,
        "grid": {"w": 4, "h": 4, "d": 2, "gamma": 0.5},
        "labels": {"classes": list(CLASSES)},
        "network": {"latent_dim": 4, "width_scale": 1 / 32, "head_width": 8, "image_size": list(IMAGE)},
        "train": train_section,
    })


def tiny_pool(config: PipelineConfig, scenes: int = 3, views: int = 2, size=IMAGE):
    grid = GridSpec(config.grid.w, config.grid.h, config.grid.d, config.grid.gamma)
    labels = LabelSpace(config.labels.classes)
    spec = SyntheticSceneSpec((
        ClassPrior("bed", (0.0, 1.0), (0.5, 0.5, 0.5), (0.5, 0.5, 0.5), wall=True),
        ClassPrior("desk", (0.5, 0.5), (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
    ))
    rng = np.random.default_rng(0)
    return synth_pool(synth_scenes(spec, scenes, grid, labels, rng), grid, views, rng, size=size)


@pytest.fixture(scope="module")
def config():
    return tiny_config()


@pytest.fixture(scope="module")
def pool(config):
    return tiny_pool(config)


# =============================================================================
# Sampling
# =============================================================================

class TestSampling:

    def test_real_combination_distinct_images(self, pool):
        combo = sample_real_combination(pool, 4, np.random.default_rng(0))
        assert len(combo) == 4
        assert combo.provenance == "real"
        assert len({id(image) for image in combo.images}) == 4
        assert combo.array().shape == (4, 4, IMAGE[1], IMAGE[0])

    def test_real_combination_too_many_views(self, pool):
        with pytest.raises(DataError, match="Pool has"):
            sample_real_combination(pool, len(pool) + 1, np.random.default_rng(0))

    def test_invalid_provenance(self, pool):
        with pytest.raises(ConfigurationError):
            ViewCombination(tuple(pool.images[:1]), "imagined")

    def test_camera_distribution_prefers_room_size(self, pool):
        dist = CameraDistribution(pool)
        size = pool.room_sizes[0]
        allowed = {id(pool.images[i].camera) for i, s in enumerate(pool.room_sizes) if s == size}
        cams = dist.sample(5, np.random.default_rng(1), size)
        assert all(id(c) in allowed for c in cams)

    def test_room_sizes_from_pool(self, pool):
        grid = GridSpec(4, 4, 2, 0.5)
        dist = RoomSizeDistribution(pool, grid)
        room = dist.sample(np.random.default_rng(0))
        assert room.size_psi in [tuple(s) for s in pool.room_sizes]

    def test_room_sizes_uniform_without_pool(self):
        grid = GridSpec(4, 4, 2, 0.5)
        dist = RoomSizeDistribution(None, grid, (0.5, 1.0))
        rng = np.random.default_rng(0)
        for _ in range(20):
            dist.sample(rng).check(grid)

    def test_fake_views(self, config, pool):
        gan = SceneGAN(config, np.random.default_rng(0))
        volume = SemanticVolume.empty(gan.grid, gan.labels)
        combo = sample_fake_views(volume, CameraDistribution(pool), 2, np.random.default_rng(0))
        assert combo.provenance == "fake"
        assert all(np.allclose(image.depth, image.camera.far_depth) for image in combo.images)

    def test_fake_batch_shapes(self, config, pool):
        gan = SceneGAN(config, np.random.default_rng(0))
        rng = np.random.default_rng(0)
        batch = sample_fake_batch(gan, CameraDistribution(pool), RoomSizeDistribution(pool, gan.grid), 3, 2, rng)
        assert len(batch) == 3
        assert batch.latents.shape == (3, 4)
        assert [len(b) for b in batch.bundles] == [2, 2, 2]
        views = fake_views(gan, batch, "normalized")
        assert views.shape == (3, 2, 4, IMAGE[1], IMAGE[0])
        assert real_batch(pool, 3, 2, rng).shape == views.shape


# =============================================================================
# Losses
# =============================================================================

class TestLosses:

    def test_discriminator_loss_at_zero_scores(self):
        zero = Tensor(np.zeros(4))
        assert discriminator_loss(zero, zero).item() == pytest.approx(2 * math.log(2))

    def test_discriminator_loss_confident(self):
        loss = discriminator_loss(Tensor([20.0]), Tensor([-20.0])).item()
        assert loss == pytest.approx(0.0, abs=1e-8)

    def test_generator_loss_forms(self):
        zero = Tensor(np.zeros(3))
        assert generator_adversarial_loss(zero).item() == pytest.approx(math.log(2))
        assert generator_adversarial_loss(zero, "saturating").item() == pytest.approx(-math.log(2))
        assert generator_adversarial_loss(zero, "literal").item() == pytest.approx(-math.log(2))
        with pytest.raises(ConfigurationError):
            generator_adversarial_loss(zero, "hinge")

    def test_literal_generator_loss_is_log_sigmoid(self):
        scores = np.array([-2.0, 0.5, 3.0])
        expected = np.mean(np.log(1.0 / (1.0 + np.exp(-scores))))
        assert generator_adversarial_loss(Tensor(scores), "literal").item() == pytest.approx(expected)
        # largest when the critic is fooled
        assert generator_adversarial_loss(Tensor([20.0]), "literal").item() == pytest.approx(0.0, abs=1e-8)

    def test_literal_discriminator_loss(self):
        zero = Tensor(np.zeros(4))
        assert discriminator_loss(zero, zero, "literal").item() == pytest.approx(1.0)
        confident = discriminator_loss(Tensor([20.0]), Tensor([-20.0]), "literal").item()
        assert confident == pytest.approx(21.0, abs=1e-6)

    def test_discriminator_loss_saturating_matches_default(self):
        real, fake = Tensor([0.3, -1.0]), Tensor([1.5, 0.2])
        assert discriminator_loss(real, fake, "saturating").item() == discriminator_loss(real, fake).item()

    def test_discriminator_loss_unknown_form(self):
        zero = Tensor(np.zeros(2))
        with pytest.raises(ConfigurationError):
            discriminator_loss(zero, zero, "hinge")

    def test_mask_penalty_matches_volume_penalty(self):
        grid = GridSpec(4, 4, 2, 0.5)
        labels = LabelSpace(CLASSES)
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 3) + grid.shape)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        masks = [make_room_mask(RoomSpec((1.0, 1.0, 0.5)), grid), make_room_mask(RoomSpec((2.0, 1.0, 1.0)), grid)]
        expected = np.mean([
            mask_empty_penalty(SemanticVolume(grid, labels, np.moveaxis(probs[b], 0, -1)), masks[b])
            for b in range(2)
        ])
        assert mask_penalty(Tensor(probs), masks).item() == pytest.approx(expected)

    def test_mask_penalty_full_room_is_zero(self):
        grid = GridSpec(4, 4, 2, 0.5)
        probs = np.full((1, 3) + grid.shape, 1 / 3)
        full = make_room_mask(RoomSpec(grid.extent), grid)
        assert mask_penalty(Tensor(probs), [full]).item() == 0.0


# =============================================================================
# Alternating updates
# =============================================================================

class TestSteps:

    def setup_method(self):
        self.config = tiny_config()
        self.pool = tiny_pool(self.config)
        self.gan = SceneGAN(self.config, np.random.default_rng(0))
        self.opt_g = Adam(self.gan.generator.parameters(), 1e-3)
        self.opt_d = Adam(self.gan.discriminator.parameters(), 1e-3)
        rng = np.random.default_rng(1)
        self.batch = sample_fake_batch(
            self.gan, CameraDistribution(self.pool), RoomSizeDistribution(self.pool, self.gan.grid), 2, 2, rng,
        )
        self.real = real_batch(self.pool, 2, 2, rng)

    def snapshot(self, module):
        return {k: v.copy() for k, v in module.state_dict().items()}

    def test_discriminator_step_freezes_generator(self):
        g_before = self.snapshot(self.gan.generator)
        d_before = self.snapshot(self.gan.discriminator)
        loss = discriminator_step(self.gan, self.opt_d, self.real, fake_views(self.gan, self.batch, "normalized"))
        assert math.isfinite(loss)
        g_after = self.snapshot(self.gan.generator)
        assert all(np.array_equal(g_before[k], g_after[k]) for k in g_before)
        d_after = self.snapshot(self.gan.discriminator)
        assert any(not np.array_equal(d_before[k], d_after[k]) for k in d_before)

    def test_generator_step_freezes_discriminator(self):
        d_before = self.snapshot(self.gan.discriminator)
        g_before = self.snapshot(self.gan.generator)
        step = generator_step(self.gan, self.opt_g, self.batch, self.config)
        assert math.isfinite(step.loss)
        assert step.loss == pytest.approx(step.adversarial + step.penalty * self.config.train.mask_weight)
        d_after = self.snapshot(self.gan.discriminator)
        # includes the spectral-norm vectors
        assert all(np.array_equal(d_before[k], d_after[k]) for k in d_before)
        g_after = self.snapshot(self.gan.generator)
        assert any(not np.array_equal(g_before[k], g_after[k]) for k in g_before)
        assert self.gan.discriminator.training

    def test_step_accepts_combinations(self):
        combos = [sample_real_combination(self.pool, 2, np.random.default_rng(i)) for i in range(2)]
        loss = discriminator_step(self.gan, self.opt_d, combos, fake_views(self.gan, self.batch, "normalized"))
        assert math.isfinite(loss)

    def test_discriminator_step_uses_loss_form(self):
        fake = fake_views(self.gan, self.batch, "normalized")
        twin = SceneGAN(self.config, np.random.default_rng(0))
        twin.discriminator.train()
        scores = twin.discriminator(Tensor(np.concatenate([self.real, fake])))
        expected = discriminator_loss(scores[:2], scores[2:], "literal").item()
        loss = discriminator_step(self.gan, self.opt_d, self.real, fake, "literal")
        assert loss == pytest.approx(expected)
        assert loss != pytest.approx(discriminator_loss(scores[:2], scores[2:]).item())

    def test_generator_step_uses_config_loss_form(self):
        literal = tiny_config(loss_form="literal")
        step = generator_step(self.gan, self.opt_g, self.batch, literal)
        assert step.adversarial < 0.0
        assert step.loss == pytest.approx(step.adversarial + step.penalty * literal.train.mask_weight)


# =============================================================================
# Loop, checkpoints, resume
# =============================================================================

class TestTrain:

    def test_end_to_end(self, config, pool):
        with tempfile.TemporaryDirectory() as tmpdir:
            result = train(pool, config, tmpdir)
            assert result.epochs == 2
            assert result.checkpoint == checkpoint_path(tmpdir, 2)
            assert latest_checkpoint(tmpdir) == checkpoint_path(tmpdir, 2)
            records = read_metrics(Path(tmpdir) / "metrics.jsonl")
            assert [r["epoch"] for r in records] == [0, 1, 2]
            for record in records:
                for key in ("d_loss", "g_loss", "mask_penalty", "outside_occupancy", "depth_w1", "cooc_diff"):
                    assert math.isfinite(record[key]), key

    def test_logged_generator_loss_follows_loss_form(self, pool):
        logged = {}
        for form in ("non_saturating", "saturating", "literal"):
            with tempfile.TemporaryDirectory() as tmpdir:
                train(pool, tiny_config(loss_form=form, epochs=1), tmpdir)
                logged[form] = read_metrics(Path(tmpdir) / "metrics.jsonl")
        # identical initial networks, so the epoch-0 scores agree across forms
        initial = {form: records[0]["g_loss"] for form, records in logged.items()}
        assert initial["literal"] == pytest.approx(-initial["non_saturating"])
        assert initial["non_saturating"] > 0.0
        assert initial["saturating"] < 0.0
        assert logged["non_saturating"][1]["g_loss"] > 0.0
        assert logged["literal"][1]["g_loss"] < 0.0
        assert logged["literal"][1]["d_loss"] != pytest.approx(logged["non_saturating"][1]["d_loss"])

    def test_checkpoint_embeds_config(self, config, pool):
        with tempfile.TemporaryDirectory() as tmpdir:
            train(pool, config, tmpdir)
            arrays, meta, stored = ContainerReader.read_checkpoint(checkpoint_path(tmpdir, 1))
            assert meta["epoch"] == 1
            assert stored == config.hash()
            assert "optim.g.t" in arrays
            gan, loaded, _ = load_generator(checkpoint_path(tmpdir, 2))
            assert loaded == config
            assert not gan.generator.training

    def test_resume_is_bitwise(self, config, pool):
        with tempfile.TemporaryDirectory() as tmpdir:
            full = Path(tmpdir) / "full"
            cut = Path(tmpdir) / "cut"
            train(pool, config, full)
            shutil.copytree(full, cut)
            checkpoint_path(cut, 2).unlink()
            with open(cut / "metrics.jsonl", "a") as f:
                f.write('{"epoch": 2, "d_lo')
            result = train(pool, config, cut, resume=True)
            assert result.epochs == 2
            a, _, _ = ContainerReader.read_checkpoint(checkpoint_path(full, 2))
            b, _, _ = ContainerReader.read_checkpoint(checkpoint_path(cut, 2))
            assert set(a) == set(b)
            assert all(np.array_equal(a[k], b[k]) for k in a)
            assert [r["epoch"] for r in read_metrics(cut / "metrics.jsonl")] == [0, 1, 2]

    def test_resume_without_checkpoint_starts_fresh(self, config, pool):
        with tempfile.TemporaryDirectory() as tmpdir:
            train(pool, config, tmpdir, resume=True)
            assert latest_checkpoint(tmpdir) == checkpoint_path(tmpdir, 2)

    def test_resume_under_other_config(self, config, pool):
        with tempfile.TemporaryDirectory() as tmpdir:
            train(pool, config, tmpdir)
            other = config.with_overrides(["train.mask_weight=2.0"])
            with pytest.raises(ConfigurationError, match="different config"):
                train(pool, other, tmpdir, resume=True)

    def test_non_finite_loss(self, config, pool, monkeypatch):
        monkeypatch.setattr(training, "discriminator_step", lambda *args: float("nan"))
        with tempfile.TemporaryDirectory() as tmpdir:
            with pytest.raises(NumericalFailure, match="Non-finite loss"):
                train(pool, config, tmpdir)
            dumps = list(Path(tmpdir).glob("diagnostics-*.json"))
            assert len(dumps) == 1
            report = json.loads(dumps[0].read_text())
            assert report["epoch"] == 1
            assert report["losses"]["d_loss"] == "nan"

    def test_pool_resolution_mismatch(self, config):
        pool = tiny_pool(config, size=(32, 18))
        with tempfile.TemporaryDirectory() as tmpdir:
            with pytest.raises(ConfigurationError, match="network expects"):
                train(pool, config, tmpdir)

    def test_pool_too_small(self, config, pool):
        small = Pool(pool.images[:1], pool.scenes[:1], pool.room_sizes[:1])
        with tempfile.TemporaryDirectory() as tmpdir:
            with pytest.raises(DataError):
                train(small, config, tmpdir)
