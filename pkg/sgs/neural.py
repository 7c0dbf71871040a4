"""
SGS Neural - volumetric generator, room-size encoder and multi-view discriminator.

Generator (B = log2(w / 2) up-blocks; 4 at 32x32x16):
    learnt constant seed  C0 x 2 x 2 x 1
    AdaIN(z) + LeakyReLU, first C/4 channels x room pyramid (seed resolution)
    B x [transposed conv k4 s2 p1 -> AdaIN(z) + LeakyReLU -> room modulation]
    the last block skips AdaIN/modulation and ends in a channel softmax
    channels: C0 -> C0/2 -> ... -> C + 1   (C0 = 512 x width_scale)

Room encoder: B conv blocks (k4 s2 p1, LeakyReLU) over the binary room mask;
the level at each resolution carries 1/4 of the generator's channels there.
z_r = linear(flatten(seed-resolution level)).

Discriminator: per view, depth encoder E_d and semantic encoder E_s (4 spectral-
normalized conv blocks each, k4 s2 p1, LeakyReLU), features of all N views are
concatenated and scored by FC -> LeakyReLU -> FC.  Variants:
    joint    [E_d(depth), E_s(sem)] per view, one head          (default)
    unified  one encoder over stacked depth + semantic channels
    split    separate depth and semantic discriminators, scores summed
"""

from __future__ import annotations

import logging
import math

import numpy as np

from sgs import autodiff as ad
from sgs.autodiff import Function, Tensor, no_grad
from sgs.core import GridSpec, LabelSpace, RoomMaskVolume, SemanticVolume
from sgs.errors import ConfigurationError
from sgs.projection import RayBundle, SemanticDepthImage, render_bundle, render_bundle_backward

log = logging.getLogger(__name__)

KERNEL = 4
STRIDE = 2
PADDING = 1
DISCRIMINATOR_BLOCKS = 4
DISCRIMINATOR_BASE_CHANNELS = 32
GENERATOR_BASE_CHANNELS = 512
VARIANTS = ("joint", "unified", "split")
LATENT_MODES = ("hadamard", "scalar_gate")


# =============================================================================
# Containers
# =============================================================================

class Parameter(Tensor):
    def __init__(self, data) -> None:
        super().__init__(data, requires_grad=True)


class Module:
    """Attribute-ordered container of Parameters, buffers and child Modules."""

    def __init__(self) -> None:
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, value in self._children():
            if isinstance(value, Parameter):
                out[prefix + name] = value
            else:
                out.update(value.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for name, value in self._children():
            if isinstance(value, Module):
                out.update(value.named_buffers(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({name: b.copy() for name, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        missing = sorted(expected - set(state))
        if missing:
            raise ConfigurationError(f"Checkpoint is missing arrays: {', '.join(missing[:5])}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ConfigurationError(f"Shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name in buffers:
            self._set_buffer(name, np.array(state[name], dtype=np.float64))

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if not rest:
            if self._buffers[head].shape != value.shape:
                raise ConfigurationError(f"Shape mismatch for buffer {head}")
            self._buffers[head] = value
            return
        child = getattr(self, head)
        if isinstance(child, (list, tuple)):
            index, _, rest = rest.partition(".")
            child = child[int(index)]
        child._set_buffer(rest, value)


class Adam:
    def __init__(
        self,
        params: list[Parameter],
        lr: float = 2e-4,
        betas: tuple[float, float] = (0.5, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        state = {f"{prefix}.t": np.array(float(self.t))}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"{prefix}.m.{i}"] = m.copy()
            state[f"{prefix}.v.{i}"] = v.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(state[f"{prefix}.t"])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"{prefix}.m.{i}"])
            self.v[i] = np.array(state[f"{prefix}.v.{i}"])


# =============================================================================
# Layers
# =============================================================================

def spectral_normalize(
    weight: np.ndarray,
    u: np.ndarray | None = None,
    iterations: int = 1,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Divide a weight by its largest singular value, estimated by power iteration.

    Returns (normalized weight, refreshed u, sigma estimate). Pass the returned u
    back in on the next call to keep the iteration warm.
    """
    matrix = np.asarray(weight, dtype=np.float64).reshape(weight.shape[0], -1)
    if u is None:
        rng = rng or np.random.default_rng(0)
        u = rng.normal(size=matrix.shape[0])
        u /= np.linalg.norm(u)
    u, _, sigma = ad.power_iteration(matrix, u, iterations)
    return np.asarray(weight) / sigma, u, sigma


class _Weighted(Module):
    """Weight + bias, optionally spectral-normalized with persistent u, v."""

    def __init__(self, weight_shape, bias_size, rng, std, spectral: bool, sn_rows: int) -> None:
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, std, size=weight_shape))
        self.bias = Parameter(np.zeros(bias_size))
        self.spectral = spectral
        if spectral:
            # one warm-up iteration keeps u^T W v positive before any training-mode refresh
            u, v, _ = ad.power_iteration(self.weight.data.reshape(sn_rows, -1), rng.normal(size=sn_rows), 1)
            self._buffers["sn_u"] = u
            self._buffers["sn_v"] = v

    def effective_weight(self) -> Tensor:
        if not self.spectral:
            return self.weight
        matrix = self.weight.data.reshape(self._buffers["sn_u"].shape[0], -1)
        if self.training:
            u, v, _ = ad.power_iteration(matrix, self._buffers["sn_u"], 1)
            self._buffers["sn_u"], self._buffers["sn_v"] = u, v
        return ad.spectral_normalize(self.weight, self._buffers["sn_u"], self._buffers["sn_v"])

    def operator_norm(self) -> float:
        """Largest singular value of the weight actually applied (exact SVD)."""
        w = self.effective_weight().data if self.spectral else self.weight.data
        return float(np.linalg.norm(w.reshape(w.shape[0], -1), ord=2))


class Linear(_Weighted):
    def __init__(self, n_in: int, n_out: int, rng, std: float = 0.02, spectral: bool = False) -> None:
        # stored out x in so spectral normalization sees rows = outputs
        super().__init__((n_out, n_in), n_out, rng, std, spectral, n_out)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.effective_weight().transpose() + self.bias


class Conv(_Weighted):
    """N-d strided convolution, channel-first."""

    def __init__(self, c_in: int, c_out: int, nd: int, rng, std: float = 0.02, spectral: bool = False) -> None:
        super().__init__((c_out, c_in) + (KERNEL,) * nd, c_out, rng, std, spectral, c_out)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv(x, self.effective_weight(), self.bias, STRIDE, PADDING)


class ConvTranspose(_Weighted):
    def __init__(self, c_in: int, c_out: int, nd: int, rng, std: float = 0.02) -> None:
        super().__init__((c_in, c_out) + (KERNEL,) * nd, c_out, rng, std, False, c_in)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv_transpose(x, self.weight, self.bias, STRIDE, PADDING)


class AdaIN(Module):
    """Instance norm with per-channel (1 + scale, shift) from a one-hidden-layer MLP of z."""

    def __init__(self, latent_dim: int, channels: int, rng, std: float, slope: float) -> None:
        super().__init__()
        self.hidden = Linear(latent_dim, latent_dim, rng, std)
        self.out = Linear(latent_dim, 2 * channels, rng, std)
        self.channels = channels
        self.slope = slope

    def forward(self, x: Tensor, z: Tensor) -> Tensor:
        params = self.out(ad.leaky_relu(self.hidden(z), self.slope))
        shape = (params.shape[0], self.channels) + (1,) * (x.ndim - 2)
        scale = params[:, :self.channels].reshape(shape)
        shift = params[:, self.channels:].reshape(shape)
        return ad.instance_norm(x) * (scale + 1.0) + shift


def modulate_quarter(x: Tensor, room: Tensor) -> Tensor:
    """Multiply the first C/4 channels of x by the room features; keep the rest."""
    quarter = x.shape[1] // 4
    if room.shape[1] != quarter or room.shape[2:] != x.shape[2:]:
        raise ConfigurationError(f"Room features {room.shape} cannot modulate {x.shape}")
    return ad.concat([x[:, :quarter] * room, x[:, quarter:]], axis=1)


# =============================================================================
# Architecture bookkeeping
# =============================================================================

def num_up_blocks(grid: GridSpec) -> int:
    """Blocks needed to grow a 2 x 2 x 1 seed to the grid; the grid must be (2, 2, 1) x 2^B."""
    blocks = int(round(math.log2(grid.w / 2)))
    scale = 2 ** blocks
    if blocks < 1 or (grid.w, grid.h, grid.d) != (2 * scale, 2 * scale, scale):
        raise ConfigurationError(
            f"Grid {grid.shape} is not a 2 x 2 x 1 seed doubled per block (e.g. 16x16x8, 32x32x16)"
        )
    return blocks


def generator_channels(grid: GridSpec, num_channels: int, width_scale: float) -> list[int]:
    """Channel count of the seed and of every block output, last = C + 1."""
    blocks = num_up_blocks(grid)
    base = int(round(GENERATOR_BASE_CHANNELS * width_scale))
    channels = [base // (2 ** b) for b in range(blocks)] + [num_channels]
    if min(channels[:-1]) < 4:
        raise ConfigurationError(f"width_scale {width_scale} leaves fewer than 4 channels in a block")
    return channels


def _conv_out(n: int) -> int:
    return (n + 2 * PADDING - KERNEL) // STRIDE + 1


# =============================================================================
# Generator and room encoder
# =============================================================================

class RoomEncoder(Module):
    def __init__(self, grid: GridSpec, channels: list[int], latent_dim: int, rng, std: float, slope: float) -> None:
        super().__init__()
        blocks = num_up_blocks(grid)
        # level channels from the finest (res / 2) down to the seed resolution
        levels = [channels[b] // 4 for b in reversed(range(blocks))]
        ins = [1] + levels[:-1]
        self.convs = [Conv(c_in, c_out, 3, rng, std) for c_in, c_out in zip(ins, levels)]
        seed_size = channels[0] // 4 * 2 * 2 * 1
        self.to_latent = Linear(seed_size, latent_dim, rng, std)
        self.slope = slope

    def forward(self, mask: Tensor) -> tuple[Tensor, list[Tensor]]:
        """mask: N x 1 x w x h x d -> (z_r: N x L, pyramid ordered seed -> res/2)."""
        levels = []
        x = mask
        for conv in self.convs:
            x = ad.leaky_relu(conv(x), self.slope)
            levels.append(x)
        pyramid = list(reversed(levels))
        z_r = self.to_latent(pyramid[0].reshape(mask.shape[0], -1))
        return z_r, pyramid


class Generator(Module):
    def __init__(self, grid: GridSpec, labels: LabelSpace, network, rng: np.random.Generator) -> None:
        super().__init__()
        if network.latent_mode not in LATENT_MODES:
            raise ConfigurationError(f"latent_mode must be one of {LATENT_MODES}")
        self.grid = grid
        self.labels = labels
        self.latent_dim = network.latent_dim
        self.latent_mode = network.latent_mode
        self.slope = network.leaky_slope
        std = network.init_std
        channels = generator_channels(grid, labels.num_channels, network.width_scale)
        self.channels = channels
        blocks = len(channels) - 1
        self.seed = Parameter(rng.normal(0.0, std, size=(1, channels[0], 2, 2, 1)))
        self.adain = [AdaIN(self.latent_dim, c, rng, std, self.slope) for c in channels[:-1]]
        self.blocks = [ConvTranspose(channels[b], channels[b + 1], 3, rng, std) for b in range(blocks)]
        self.encoder = RoomEncoder(grid, channels, self.latent_dim, rng, std, self.slope)

    def combine_latents(self, z_s: Tensor, z_r: Tensor) -> Tensor:
        if self.latent_mode == "hadamard":
            return z_s * z_r
        gate = (z_s * z_r).sum(axis=1, keepdims=True)
        return gate * z_s

    def forward(self, z_s: Tensor, mask: Tensor) -> Tensor:
        """z_s: N x L, mask: N x 1 x w x h x d -> probabilities N x (C+1) x w x h x d."""
        if z_s.shape[1] != self.latent_dim or mask.shape[2:] != self.grid.shape:
            raise ConfigurationError(f"Generator inputs {z_s.shape}/{mask.shape} do not match the network")
        z_r, pyramid = self.encoder(mask)
        z = self.combine_latents(z_s, z_r)
        batch = z_s.shape[0]
        x = self.seed + np.zeros((batch,) + self.seed.shape[1:])
        x = ad.leaky_relu(self.adain[0](x, z), self.slope)
        x = modulate_quarter(x, pyramid[0])
        last = len(self.blocks) - 1
        for b, block in enumerate(self.blocks):
            x = block(x)
            if b == last:
                return ad.softmax(x, axis=1)
            x = ad.leaky_relu(self.adain[b + 1](x, z), self.slope)
            x = modulate_quarter(x, pyramid[b + 1])
        raise AssertionError("unreachable")


def mask_tensor(masks: list[RoomMaskVolume]) -> Tensor:
    return Tensor(np.stack([m.mask.astype(np.float64) for m in masks])[:, None])


def room_encode(mask: RoomMaskVolume, generator: Generator) -> tuple[np.ndarray, list[np.ndarray]]:
    with no_grad():
        z_r, pyramid = generator.encoder(mask_tensor([mask]))
    return z_r.data[0], [level.data[0] for level in pyramid]


def generate(z_s: np.ndarray, mask: RoomMaskVolume, generator: Generator) -> SemanticVolume:
    """One semantic volume; probabilities come out channel-last (w x h x d x (C+1))."""
    with no_grad():
        probs = generator(Tensor(np.asarray(z_s, dtype=np.float64)[None]), mask_tensor([mask]))
    return SemanticVolume(generator.grid, generator.labels, np.moveaxis(probs.data[0], 0, -1))


# =============================================================================
# Discriminator
# =============================================================================

class ViewEncoder(Module):
    def __init__(self, c_in: int, image_size: tuple[int, int], width_scale: float, rng, std: float, slope: float) -> None:
        super().__init__()
        base = max(1, int(round(DISCRIMINATOR_BASE_CHANNELS * width_scale)))
        widths = [base * 2 ** i for i in range(DISCRIMINATOR_BLOCKS)]
        ins = [c_in] + widths[:-1]
        self.convs = [Conv(a, b, 2, rng, std, spectral=True) for a, b in zip(ins, widths)]
        width, height = image_size
        for _ in range(DISCRIMINATOR_BLOCKS):
            width, height = _conv_out(width), _conv_out(height)
        if width < 1 or height < 1:
            raise ConfigurationError(f"Image size {image_size} is too small for {DISCRIMINATOR_BLOCKS} blocks")
        self.feature_size = widths[-1] * width * height
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ad.leaky_relu(conv(x), self.slope)
        return x.reshape(x.shape[0], -1)


class ScoreHead(Module):
    def __init__(self, n_in: int, width: int, rng, std: float, slope: float) -> None:
        super().__init__()
        self.fc1 = Linear(n_in, width, rng, std, spectral=True)
        self.fc2 = Linear(width, 1, rng, std, spectral=True)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ad.leaky_relu(self.fc1(x), self.slope)).reshape(x.shape[0])


class Discriminator(Module):
    """Scores batches of view combinations: B x N x (C+2) x H x W (channel 0 = depth / far)."""

    def __init__(self, labels: LabelSpace, network, views: int, rng: np.random.Generator) -> None:
        super().__init__()
        if network.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")
        if views < 1:
            raise ConfigurationError("A discriminator needs at least one view")
        self.variant = network.variant
        self.views = views
        self.num_channels = labels.num_channels
        self.image_size = tuple(network.image_size)
        std, slope, scale = network.init_std, network.leaky_slope, network.width_scale
        c = labels.num_channels
        if self.variant == "unified":
            self.unified = ViewEncoder(c + 1, self.image_size, scale, rng, std, slope)
            self.head = ScoreHead(views * self.unified.feature_size, network.head_width, rng, std, slope)
        else:
            self.depth_encoder = ViewEncoder(1, self.image_size, scale, rng, std, slope)
            self.semantic_encoder = ViewEncoder(c, self.image_size, scale, rng, std, slope)
            f = self.depth_encoder.feature_size
            if self.variant == "joint":
                self.head = ScoreHead(views * 2 * f, network.head_width, rng, std, slope)
            else:
                self.depth_head = ScoreHead(views * f, network.head_width, rng, std, slope)
                self.semantic_head = ScoreHead(views * f, network.head_width, rng, std, slope)

    @property
    def feature_size(self) -> int:
        encoder = self.unified if self.variant == "unified" else self.depth_encoder
        return encoder.feature_size

    def forward(self, views: Tensor) -> Tensor:
        batch, n, channels, height, width = views.shape
        if n != self.views:
            raise ConfigurationError(f"Discriminator expects {self.views} views, got {n}")
        if channels != self.num_channels + 1 or (width, height) != self.image_size:
            raise ConfigurationError(f"View tensor {views.shape} does not match the discriminator")
        flat = views.reshape(batch * n, channels, height, width)
        if self.variant == "unified":
            return self.head(self.unified(flat).reshape(batch, -1))
        depth = self.depth_encoder(flat[:, :1]).reshape(batch, n, -1)
        semantic = self.semantic_encoder(flat[:, 1:]).reshape(batch, n, -1)
        if self.variant == "joint":
            return self.head(ad.concat([depth, semantic], axis=2).reshape(batch, -1))
        return self.depth_head(depth.reshape(batch, -1)) + self.semantic_head(semantic.reshape(batch, -1))


def views_array(images: list[SemanticDepthImage]) -> np.ndarray:
    """N x (C+2) x H x W: depth / far_depth, then the semantic channels."""
    planes = []
    for image in images:
        depth = image.depth[None] / image.camera.far_depth
        planes.append(np.concatenate([depth, np.moveaxis(image.semantics, -1, 0)], axis=0))
    return np.stack(planes)


def discriminate(views: list[SemanticDepthImage], discriminator: Discriminator) -> float:
    if len(views) != discriminator.views:
        raise ConfigurationError(f"Discriminator expects {discriminator.views} views, got {len(views)}")
    sizes = {(v.camera.width, v.camera.height) for v in views}
    if len(sizes) != 1:
        raise ConfigurationError(f"All views must share one resolution, got {sorted(sizes)}")
    with no_grad():
        return float(discriminator(Tensor(views_array(views)[None])).data[0])


# =============================================================================
# Differentiable projection
# =============================================================================

class ProjectViews(Function):
    """Render every (batch element, view) pair: B x (C+1) x w x h x d -> B x N x (C+2) x H x W.

    Channel 0 is depth / far_depth; `bundles[b][n]` is the ray bundle of view n of volume b.
    """

    def forward(self, probs, bundles=(), semantic_mode: str = "normalized", threads: int = 1):
        self.probs = probs
        self.bundles = bundles
        self.mode = semantic_mode
        self.threads = threads
        batch = probs.shape[0]
        first = bundles[0][0].camera
        out = np.empty((batch, len(bundles[0]), probs.shape[1] + 1, first.height, first.width))
        for b in range(batch):
            volume = np.moveaxis(probs[b], 0, -1)
            for n, bundle in enumerate(bundles[b]):
                cam = bundle.camera
                depth, sem = render_bundle(volume, bundle, semantic_mode)
                out[b, n, 0] = (depth / cam.far_depth).reshape(cam.height, cam.width)
                out[b, n, 1:] = sem.T.reshape(-1, cam.height, cam.width)
        return out

    def backward(self, grad):
        out = np.zeros_like(self.probs)
        for b in range(self.probs.shape[0]):
            volume = np.moveaxis(self.probs[b], 0, -1)
            for n, bundle in enumerate(self.bundles[b]):
                g_depth = grad[b, n, 0].reshape(-1) / bundle.camera.far_depth
                g_sem = grad[b, n, 1:].reshape(grad.shape[2] - 1, -1).T
                g = render_bundle_backward(volume, bundle, g_depth, g_sem, self.mode, self.threads)
                out[b] += np.moveaxis(g, -1, 0)
        return (out,)


def project_views(
    probs: Tensor,
    bundles: list[list[RayBundle]],
    semantic_mode: str = "normalized",
    threads: int = 1,
) -> Tensor:
    return ProjectViews.apply(probs, bundles=bundles, semantic_mode=semantic_mode, threads=threads)


# =============================================================================
# Bundled networks
# =============================================================================

class SceneGAN(Module):
    """Generator (with its room encoder) and discriminator built from one config."""

    def __init__(self, config, rng: np.random.Generator) -> None:
        super().__init__()
        self.grid = GridSpec(config.grid.w, config.grid.h, config.grid.d, config.grid.gamma)
        self.labels = LabelSpace(config.labels.classes)
        self.generator = Generator(self.grid, self.labels, config.network, rng)
        self.discriminator = Discriminator(self.labels, config.network, config.train.views, rng)
