"""
SGS Training - adversarial training of the scene generator against multi-view critics.

One iteration:
    1. fake batch   z ~ N(0, I), room size psi ~ pool sizes (or uniform), N cameras
                    replayed from the pool's camera records
    2. D step       real combinations (N random pool images, no scene constraint)
                    vs. projected fake views, generator frozen
    3. G step       adversarial term on D(P(G(z, psi))) + mask penalty, D frozen

Losses (s = raw score, sigma = logistic):
    D      -log sigma(s_real) - log(1 - sigma(s_fake))
    G      -log sigma(s_fake)                 non_saturating (default)
           log(1 - sigma(s_fake))             saturating
    literal  mixed-sign objectives, kept for comparison:
           D  mean(1 - log sigma(s_fake)) + mean(log sigma(s_real))
           G  log sigma(s_fake)
    mask   mean over outside-room voxels of -log p_e, weighted by mask_weight

Artifacts in out_dir:
    ckpt-XXXXX.sgsc    network + optimizer state, rng state, config
    metrics.jsonl      one record per epoch (epoch 0 = initialization)
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sgs import autodiff as ad
from sgs.analytics import combination_presence, cooccurrence, cooccurrence_diff, depth_distribution, wasserstein1
from sgs.autodiff import Tensor, no_grad
from sgs.config import PipelineConfig, rng_for
from sgs.core import LOG_CLAMP, GridSpec, RoomMaskVolume, RoomSpec, SemanticVolume, make_room_mask
from sgs.errors import ConfigurationError, DataError, NumericalFailure
from sgs.ingestion import Pool
from sgs.neural import Adam, SceneGAN, mask_tensor, project_views, views_array
from sgs.projection import Camera, RayBundle, SemanticDepthImage, bundle_for, render_view
from sgs.reader import ContainerReader
from sgs.stream import MetricLog
from sgs.writer import ContainerWriter

log = logging.getLogger(__name__)

CHECKPOINT_PATTERN = re.compile(r"^ckpt-(\d{5})\.sgsc$")
METRICS_FILE = "metrics.jsonl"
EVAL_COMBINATIONS = 16
REAL_REFERENCE_IMAGES = 256


# =============================================================================
# View combinations
# =============================================================================

@dataclass(frozen=True, eq=False)
class ViewCombination:
    """N views treated as one real or fake sample."""

    images: tuple[SemanticDepthImage, ...]
    provenance: str

    def __post_init__(self) -> None:
        if self.provenance not in ("real", "fake"):
            raise ConfigurationError(f"provenance must be real or fake, got {self.provenance!r}")
        if not self.images:
            raise ConfigurationError("A view combination needs at least one view")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def cameras(self) -> list[Camera]:
        return [image.camera for image in self.images]

    def array(self) -> np.ndarray:
        return views_array(list(self.images))


def sample_real_combination(pool: Pool, n: int, rng: np.random.Generator) -> ViewCombination:
    """N pool images drawn uniformly without replacement; scenes may differ."""
    if n < 1:
        raise ConfigurationError(f"views per combination must be >= 1, got {n}")
    if len(pool) < n:
        raise DataError(f"Pool has {len(pool)} images, a combination needs {n}")
    picks = rng.choice(len(pool), size=n, replace=False)
    return ViewCombination(tuple(pool.images[int(i)] for i in picks), "real")


def _size_key(size) -> tuple[float, float, float]:
    return tuple(round(float(s), 6) for s in size)


class CameraDistribution:
    """Empirical camera records of a pool, grouped by the room size they were taken in."""

    def __init__(self, pool: Pool) -> None:
        if len(pool) == 0:
            raise DataError("Cannot build a camera distribution from an empty pool")
        self.cameras = pool.cameras
        self._by_room: dict[tuple, list[int]] = {}
        for i, size in enumerate(pool.room_sizes):
            if size is not None:
                self._by_room.setdefault(_size_key(size), []).append(i)

    def sample(self, n: int, rng: np.random.Generator, room_size=None) -> list[Camera]:
        candidates = self._by_room.get(_size_key(room_size)) if room_size is not None else None
        if not candidates:
            candidates = list(range(len(self.cameras)))
        picks = rng.choice(len(candidates), size=n, replace=len(candidates) < n)
        return [self.cameras[candidates[int(i)]] for i in picks]


class RoomSizeDistribution:
    """Room sizes seen in the pool; uniform fractions of the grid extent when none are tagged."""

    def __init__(self, pool: Pool | None, grid: GridSpec, size_range: tuple[float, float] = (0.5, 1.0)) -> None:
        self.grid = grid
        self.size_range = size_range
        sizes = [s for s in (pool.room_sizes if pool is not None else []) if s is not None]
        extent = np.array(grid.extent)
        self.sizes = [tuple(float(v) for v in np.minimum(s, extent)) for s in sizes]

    def sample(self, rng: np.random.Generator) -> RoomSpec:
        if self.sizes:
            return RoomSpec(self.sizes[int(rng.integers(len(self.sizes)))])
        extent = np.array(self.grid.extent)
        size = np.minimum(rng.uniform(*self.size_range, size=3) * extent, extent)
        return RoomSpec(tuple(float(v) for v in size))


def sample_fake_views(
    volume: SemanticVolume,
    camera_dist: CameraDistribution,
    n: int,
    rng: np.random.Generator,
    semantic_mode: str = "normalized",
    room: RoomSpec | None = None,
) -> ViewCombination:
    """N views of one generated volume from cameras replayed out of the pool."""
    cameras = camera_dist.sample(n, rng, room.size_psi if room is not None else None)
    return ViewCombination(tuple(render_view(volume, cam, semantic_mode) for cam in cameras), "fake")


# =============================================================================
# Losses and steps
# =============================================================================

@dataclass
class FakeBatch:
    latents: np.ndarray
    rooms: list[RoomSpec]
    masks: list[RoomMaskVolume]
    bundles: list[list[RayBundle]]

    def __len__(self) -> int:
        return len(self.rooms)


def sample_fake_batch(
    gan: SceneGAN,
    camera_dist: CameraDistribution,
    room_dist: RoomSizeDistribution,
    batch_size: int,
    views: int,
    rng: np.random.Generator,
) -> FakeBatch:
    latents = rng.standard_normal((batch_size, gan.generator.latent_dim))
    rooms = [room_dist.sample(rng) for _ in range(batch_size)]
    masks = [make_room_mask(room, gan.grid) for room in rooms]
    bundles = [
        [bundle_for(gan.grid, cam) for cam in camera_dist.sample(views, rng, room.size_psi)]
        for room in rooms
    ]
    return FakeBatch(latents, rooms, masks, bundles)


def real_batch(pool: Pool, batch_size: int, views: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample_real_combination(pool, views, rng).array() for _ in range(batch_size)])


def discriminator_loss(s_real: Tensor, s_fake: Tensor, loss_form: str = "non_saturating") -> Tensor:
    if loss_form in ("non_saturating", "saturating"):
        return ad.softplus(-s_real).mean() + ad.softplus(s_fake).mean()
    if loss_form == "literal":
        # mean(1 - log sigma(s_fake)) + mean(log sigma(s_real))
        return ad.softplus(-s_fake).mean() - ad.softplus(-s_real).mean() + 1.0
    raise ConfigurationError(f"Unknown loss form {loss_form!r}")


def generator_adversarial_loss(s_fake: Tensor, loss_form: str = "non_saturating") -> Tensor:
    if loss_form == "non_saturating":
        return ad.softplus(-s_fake).mean()
    if loss_form == "saturating":
        return -ad.softplus(s_fake).mean()
    if loss_form == "literal":
        return -ad.softplus(-s_fake).mean()
    raise ConfigurationError(f"Unknown loss form {loss_form!r}")


def mask_penalty(probs: Tensor, masks: list[RoomMaskVolume]) -> Tensor:
    """Batch mean of the per-volume outside-room -log p_e average; probs are B x (C+1) x w x h x d."""
    outside = np.stack([~m.mask for m in masks]).astype(np.float64)
    counts = outside.reshape(len(masks), -1).sum(axis=1)
    weights = np.divide(outside, counts[:, None, None, None], out=np.zeros_like(outside),
                        where=counts[:, None, None, None] > 0)
    p_e = probs[:, -1]
    return -(ad.log(p_e, floor=LOG_CLAMP) * weights).sum() / len(masks)


def _as_views(batch) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return batch
    return np.stack([combo.array() for combo in batch])


def discriminator_step(
    gan: SceneGAN,
    optimizer: Adam,
    real,
    fake,
    loss_form: str = "non_saturating",
) -> float:
    """One critic update on real vs. fake view batches (arrays or lists of ViewCombination)."""
    real = _as_views(real)
    fake = _as_views(fake)
    gan.discriminator.train()
    optimizer.zero_grad()
    gan.generator.zero_grad()
    scores = gan.discriminator(Tensor(np.concatenate([real, fake])))
    loss = discriminator_loss(scores[:len(real)], scores[len(real):], loss_form)
    loss.backward()
    optimizer.step()
    return loss.item()


@dataclass
class GeneratorStep:
    loss: float
    adversarial: float
    penalty: float


def generator_step(
    gan: SceneGAN,
    optimizer: Adam,
    batch: FakeBatch,
    config: PipelineConfig,
    threads: int = 1,
) -> GeneratorStep:
    """One generator + room-encoder update; the critic is held fixed (no SN refresh, no update)."""
    gan.discriminator.eval()
    optimizer.zero_grad()
    gan.discriminator.zero_grad()
    probs = gan.generator(Tensor(batch.latents), mask_tensor(batch.masks))
    views = project_views(probs, batch.bundles, config.projection.semantic_mode, threads)
    adversarial = generator_adversarial_loss(gan.discriminator(views), config.train.loss_form)
    penalty = mask_penalty(probs, batch.masks)
    loss = adversarial + penalty * config.train.mask_weight
    loss.backward()
    optimizer.step()
    gan.discriminator.zero_grad()
    gan.discriminator.train()
    return GeneratorStep(loss.item(), adversarial.item(), penalty.item())


def fake_views(gan: SceneGAN, batch: FakeBatch, semantic_mode: str, threads: int = 1) -> np.ndarray:
    with no_grad():
        probs = gan.generator(Tensor(batch.latents), mask_tensor(batch.masks))
        return project_views(probs, batch.bundles, semantic_mode, threads).data


# =============================================================================
# Evaluation
# =============================================================================

@dataclass
class EvalSet:
    """Fixed latents, rooms and cameras reused at every epoch so metrics compare like with like."""

    batch: FakeBatch
    real_combinations: list[ViewCombination]
    real_reference: list[SemanticDepthImage]


def build_eval_set(gan: SceneGAN, pool: Pool, config: PipelineConfig, camera_dist, room_dist) -> EvalSet:
    rng = rng_for(config.seed, "train-eval")
    count = EVAL_COMBINATIONS
    batch = sample_fake_batch(gan, camera_dist, room_dist, count, config.train.views, rng)
    real = [sample_real_combination(pool, config.train.views, rng) for _ in range(count)]
    take = min(len(pool), REAL_REFERENCE_IMAGES)
    reference = [pool.images[int(i)] for i in np.sort(rng.choice(len(pool), size=take, replace=False))]
    return EvalSet(batch, real, reference)


def evaluate(gan: SceneGAN, eval_set: EvalSet, config: PipelineConfig) -> dict:
    """Outside-room occupancy, depth-distribution W1 and co-occurrence difference of fake vs. real views."""
    labels = gan.labels
    batch = eval_set.batch
    far = config.projection.far_depth or gan.grid.diagonal
    with no_grad():
        probs = gan.generator(Tensor(batch.latents), mask_tensor(batch.masks)).data
    outside, fake_images, fake_sets = [], [], []
    for b, mask in enumerate(batch.masks):
        volume = SemanticVolume(gan.grid, labels, np.moveaxis(probs[b], 0, -1))
        out = ~mask.mask
        outside.append(float(volume.occupancy[out].mean()) if out.any() else 0.0)
        images = [render_view(volume, bundle.camera, config.projection.semantic_mode) for bundle in batch.bundles[b]]
        fake_images.extend(images)
        fake_sets.append(combination_presence(images, config.analytics.presence_pixels))
    real_sets = [combination_presence(list(c.images), config.analytics.presence_pixels)
                 for c in eval_set.real_combinations]
    bins = config.train.depth_bins
    w1 = wasserstein1(
        depth_distribution(fake_images, bins, far),
        depth_distribution(eval_set.real_reference, bins, far),
    )
    denominator = config.analytics.denominator
    cooc = cooccurrence_diff(
        cooccurrence(real_sets, labels, denominator),
        cooccurrence(fake_sets, labels, denominator),
    )
    return {"outside_occupancy": float(np.mean(outside)), "depth_w1": w1, "cooc_diff": cooc}


# =============================================================================
# Checkpoints
# =============================================================================

def checkpoint_path(out_dir: str | Path, epoch: int) -> Path:
    return Path(out_dir) / f"ckpt-{epoch:05d}.sgsc"


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        return None
    found = sorted(p for p in out_dir.iterdir() if CHECKPOINT_PATTERN.match(p.name))
    return found[-1] if found else None


def save_checkpoint(
    path: str | Path,
    gan: SceneGAN,
    opt_g: Adam,
    opt_d: Adam,
    epoch: int,
    config: PipelineConfig,
    rng: np.random.Generator,
) -> None:
    arrays = gan.state_dict()
    arrays.update(opt_g.state_dict("optim.g"))
    arrays.update(opt_d.state_dict("optim.d"))
    meta = {"epoch": epoch, "config": config.to_dict(), "rng": rng.bit_generator.state}
    ContainerWriter.write_checkpoint(arrays, meta, path, config.hash())


def load_generator(path: str | Path) -> tuple[SceneGAN, PipelineConfig, dict]:
    """Rebuild networks from a checkpoint's embedded config and load its weights."""
    arrays, meta, _ = ContainerReader.read_checkpoint(path)
    if "config" not in meta:
        raise DataError(f"{path} has no embedded config")
    config = PipelineConfig.from_dict(meta["config"])
    gan = SceneGAN(config, np.random.default_rng(0))
    gan.load_state_dict(arrays)
    gan.eval()
    return gan, config, meta


# =============================================================================
# Loop
# =============================================================================

@dataclass
class TrainResult:
    epochs: int
    checkpoint: Path | None
    metrics_path: Path
    final: dict = field(default_factory=dict)


def _dump_diagnostics(out_dir: Path, epoch: int, step: int, gan: SceneGAN, losses: dict) -> Path:
    norms = {}
    for name, p in gan.named_parameters().items():
        finite = bool(np.all(np.isfinite(p.data)))
        norms[name] = {"finite": finite, "max_abs": float(np.max(np.abs(p.data))) if finite else None}
    report = {
        "epoch": epoch,
        "step": step,
        "losses": {k: (v if math.isfinite(v) else repr(v)) for k, v in losses.items()},
        "parameters": norms,
    }
    path = out_dir / f"diagnostics-{epoch:05d}-{step:05d}.json"
    ContainerWriter.write_bytes(json.dumps(report, indent=2, sort_keys=True).encode("utf-8"), path)
    return path


def _check_pool(pool: Pool, config: PipelineConfig, gan: SceneGAN) -> None:
    if len(pool) < config.train.views:
        raise DataError(f"Pool has {len(pool)} images, combinations need {config.train.views}")
    width, height = config.network.image_size
    for image in pool.images:
        if (image.camera.width, image.camera.height) != (width, height):
            raise ConfigurationError(
                f"Pool image is {image.camera.width}x{image.camera.height}, network expects {width}x{height}"
            )
        if image.num_channels != gan.labels.num_channels:
            raise ConfigurationError(
                f"Pool image has {image.num_channels - 1} classes, config has {gan.labels.num_classes}"
            )


def train(
    pool: Pool,
    config: PipelineConfig,
    out_dir: str | Path,
    resume: bool = False,
    threads: int | None = None,
) -> TrainResult:
    """Alternate one critic and one generator step per iteration; checkpoint every K epochs."""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = threads or config.threads
    tc = config.train

    gan = SceneGAN(config, rng_for(config.seed, "init"))
    _check_pool(pool, config, gan)
    opt_g = Adam(gan.generator.parameters(), tc.learning_rate, tc.betas)
    opt_d = Adam(gan.discriminator.parameters(), tc.learning_rate, tc.betas)
    rng = rng_for(config.seed, "train")
    camera_dist = CameraDistribution(pool)
    room_dist = RoomSizeDistribution(pool, gan.grid, tc.room_size_range)
    eval_set = build_eval_set(gan, pool, config, camera_dist, room_dist)
    steps = tc.steps_per_epoch or max(1, len(pool) // tc.batch_size)

    start = 1
    resume_from = latest_checkpoint(out_dir) if resume else None
    if resume_from is not None:
        arrays, meta, stored_hash = ContainerReader.read_checkpoint(resume_from)
        if stored_hash != config.hash():
            raise ConfigurationError(f"{resume_from.name} was written under a different config")
        gan.load_state_dict(arrays)
        opt_g.load_state_dict(arrays, "optim.g")
        opt_d.load_state_dict(arrays, "optim.d")
        rng.bit_generator.state = meta["rng"]
        start = int(meta["epoch"]) + 1
        log.info("train: resuming from %s at epoch %d", resume_from.name, start)
    elif resume:
        log.info("train: no checkpoint in %s, starting fresh", out_dir)

    metrics_path = out_dir / METRICS_FILE
    last_ckpt = resume_from
    record: dict = {}
    with MetricLog(metrics_path, resume_epoch=start if resume_from is not None else None) as metrics:
        if resume_from is None:
            record = {"epoch": 0, **_initial_losses(gan, pool, eval_set, config, rng_for(config.seed, "train-init"), threads),
                      **evaluate(gan, eval_set, config)}
            metrics.append(record)
            log.info("train: epoch 0 depth_w1=%.4f cooc_diff=%.4f", record["depth_w1"], record["cooc_diff"])

        for epoch in range(start, tc.epochs + 1):
            d_losses, g_losses, penalties = [], [], []
            for step in range(steps):
                batch = sample_fake_batch(gan, camera_dist, room_dist, tc.batch_size, tc.views, rng)
                real = real_batch(pool, tc.batch_size, tc.views, rng)
                fake = fake_views(gan, batch, config.projection.semantic_mode, threads)
                d_loss = discriminator_step(gan, opt_d, real, fake, tc.loss_form)
                g = generator_step(gan, opt_g, batch, config, threads)
                if not (math.isfinite(d_loss) and math.isfinite(g.loss)):
                    path = _dump_diagnostics(out_dir, epoch, step, gan,
                                             {"d_loss": d_loss, "g_loss": g.loss, "mask_penalty": g.penalty})
                    raise NumericalFailure(f"Non-finite loss at epoch {epoch} step {step}; diagnostics in {path}")
                d_losses.append(d_loss)
                g_losses.append(g.adversarial)
                penalties.append(g.penalty)

            record = {
                "epoch": epoch,
                "d_loss": float(np.mean(d_losses)),
                "g_loss": float(np.mean(g_losses)),
                "mask_penalty": float(np.mean(penalties)),
                **evaluate(gan, eval_set, config),
            }
            metrics.append(record)
            log.info(
                "train: epoch %d d=%.4f g=%.4f mask=%.4f w1=%.4f",
                epoch, record["d_loss"], record["g_loss"], record["mask_penalty"], record["depth_w1"],
            )
            if epoch % tc.checkpoint_every == 0 or epoch == tc.epochs:
                last_ckpt = checkpoint_path(out_dir, epoch)
                save_checkpoint(last_ckpt, gan, opt_g, opt_d, epoch, config, rng)
                log.debug("train: wrote %s", last_ckpt.name)

    return TrainResult(max(tc.epochs, start - 1), last_ckpt, metrics_path, record)


def _initial_losses(gan: SceneGAN, pool: Pool, eval_set: EvalSet, config: PipelineConfig, rng, threads: int) -> dict:
    """Losses of the untrained networks on one batch, without updating anything."""
    tc = config.train
    batch = eval_set.batch
    real = real_batch(pool, len(batch), tc.views, rng)
    with no_grad():
        probs = gan.generator(Tensor(batch.latents), mask_tensor(batch.masks))
        fake = project_views(probs, batch.bundles, config.projection.semantic_mode, threads)
        gan.discriminator.eval()
        scores = gan.discriminator(Tensor(np.concatenate([real, fake.data])))
        gan.discriminator.train()
        d_loss = discriminator_loss(scores[:len(real)], scores[len(real):], tc.loss_form).item()
        g_loss = generator_adversarial_loss(scores[len(real):], tc.loss_form).item()
        penalty = mask_penalty(probs, batch.masks).item()
    return {"d_loss": d_loss, "g_loss": g_loss, "mask_penalty": penalty}
