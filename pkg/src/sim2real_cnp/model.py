"""Dimension-generic ConvCNP: SetConv encoder with a density channel onto an
internal grid, U-Net backbone with optional FiLM sites after every
convolution, SetConv decoder to arbitrary targets, diagonal Gaussian head.

Models operate in normalised coordinates; the internal grid covers the unit
cube plus a margin at least as wide as the backbone's receptive field, padded
so every axis is divisible by 2^depth.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sim2real_cnp.fields import GriddedField, GridGeometry, as_points
from sim2real_cnp.util import ConfigurationError, DomainError

EPS_DIV = 1e-8  # avoids 0/0 when normalising the data channel by density


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ppu is grid points per normalised unit; encoder/decoder lengthscales
    default to one grid spacing. n_aux_channels counts every channel after
    density and data, including the coordinate channels when enabled.
    """

    input_dim: int
    ppu: int
    unet_depth: int
    unet_channels: int
    n_aux_channels: int = 0
    coordinate_channels: bool = False
    encoder_lengthscale: float | None = None
    decoder_lengthscale: float | None = None
    film_enabled: bool = True
    min_sigma: float = 1e-3
    kernel_size: int = 5
    n_bottleneck_convs: int = 0
    n_head_convs: int = 0
    kernel_cutoff: float = 6.0  # SetConv support radius, in lengthscales

    def __post_init__(self) -> None:
        if self.input_dim not in (1, 2):
            raise ConfigurationError(f"input_dim must be 1 or 2, got {self.input_dim}")
        if self.ppu <= 0 or self.unet_depth <= 0 or self.unet_channels <= 0:
            raise ConfigurationError("ppu, unet_depth and unet_channels must be positive")
        if self.n_aux_channels < 0:
            raise ConfigurationError("n_aux_channels must be >= 0")
        if self.coordinate_channels and self.n_aux_channels < self.input_dim:
            raise ConfigurationError("coordinate channels do not fit in n_aux_channels")
        if self.min_sigma <= 0:
            raise ConfigurationError("min_sigma must be > 0")
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("kernel_size must be odd")

    @property
    def enc_lengthscale(self) -> float:
        return self.encoder_lengthscale if self.encoder_lengthscale is not None else 1.0 / self.ppu

    @property
    def dec_lengthscale(self) -> float:
        return self.decoder_lengthscale if self.decoder_lengthscale is not None else 1.0 / self.ppu

    @property
    def n_input_channels(self) -> int:
        return 2 + self.n_aux_channels

    @property
    def n_aux_fields(self) -> int:
        """How many gridded aux fields encode() expects to be supplied."""
        return self.n_aux_channels - (self.input_dim if self.coordinate_channels else 0)


def desk_1d(**overrides) -> ModelConfig:
    """Desk-scale 1D config for the GP experiments (64 points per raw unit
    once the 4-unit raw domain is normalised to [0, 1])."""
    cfg = ModelConfig(input_dim=1, ppu=256, unet_depth=4, unet_channels=32)
    return replace(cfg, **overrides) if overrides else cfg


def desk_2d(**overrides) -> ModelConfig:
    """Desk-scale 2D config for the station world."""
    cfg = ModelConfig(
        input_dim=2,
        ppu=24,
        unet_depth=2,
        unet_channels=16,
        n_aux_channels=3,
        coordinate_channels=True,
    )
    return replace(cfg, **overrides) if overrides else cfg


def paper_2d(**overrides) -> ModelConfig:
    """Full-scale named preset: 200 PPU, depth-6 U-Net of 96 channels, two
    bottleneck and two head convolutions, FiLM after every convolution and
    on the 10-channel input encoding."""
    cfg = ModelConfig(
        input_dim=2,
        ppu=200,
        unet_depth=6,
        unet_channels=96,
        n_aux_channels=8,
        coordinate_channels=True,
        n_bottleneck_convs=2,
        n_head_convs=2,
    )
    return replace(cfg, **overrides) if overrides else cfg


MODEL_PRESETS = {"desk_1d": desk_1d, "desk_2d": desk_2d, "paper_2d": paper_2d}


def receptive_field_radius_cells(config: ModelConfig) -> int:
    """Upper bound on how far (in grid cells) one input node can influence
    the backbone output, from kernel radii, strides and upsampling jumps."""
    r = config.kernel_size // 2
    radius = r  # initial conv
    jump = 1
    for _ in range(config.unet_depth):
        radius += r * jump
        jump *= 2
    radius += config.n_bottleneck_convs * r * jump
    for _ in range(config.unet_depth):
        jump //= 2
        radius += jump + r * jump  # nearest upsample + conv
    radius += config.n_head_convs * r
    return radius


def build_grid(config: ModelConfig) -> GridGeometry:
    """Internal grid over [0, 1]^d with a receptive-field margin, padded so
    every axis is divisible by 2^depth."""
    spacing = 1.0 / config.ppu
    margin = receptive_field_radius_cells(config)
    total = config.ppu + 2 * margin
    block = 2**config.unet_depth
    pad = (-total) % block
    left = pad // 2
    n = total + pad
    origin = -(margin + left) * spacing
    return GridGeometry(
        origin=(origin,) * config.input_dim,
        spacing=spacing,
        shape=(n,) * config.input_dim,
    )


@dataclass(frozen=True)
class GriddedEncoding:
    """Internal functional representation: channel 0 is density, channel 1
    the density-normalised data, channels 2.. auxiliary inputs."""

    grid: GridGeometry
    channels: np.ndarray  # [n_channels, *grid.shape]


@dataclass(frozen=True)
class GaussianPrediction:
    """Independent Gaussians per target point."""

    means: np.ndarray
    stds: np.ndarray


def nll_loss(prediction: GaussianPrediction, y_targets: np.ndarray) -> float:
    """Mean negative log density over targets:
    mean of 0.5*ln(2*pi) + ln(sigma) + (y - mu)^2 / (2*sigma^2)."""
    y = np.asarray(y_targets, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("nll_loss is undefined for an empty target set")
    mu = np.asarray(prediction.means, dtype=np.float64).ravel()
    sd = np.asarray(prediction.stds, dtype=np.float64).ravel()
    if mu.size != y.size or sd.size != y.size:
        raise ValueError(f"length mismatch: {mu.size} predictions vs {y.size} targets")
    return float(np.mean(0.5 * math.log(2 * math.pi) + np.log(sd) + (y - mu) ** 2 / (2 * sd**2)))


def film(feature_maps: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Feature-wise linear modulation: map i becomes gamma[i]*map_i + beta[i].

    feature_maps has shape [n_maps, ...]; gamma and beta have length n_maps.
    """
    maps = np.asarray(feature_maps, dtype=np.float64)
    g = np.atleast_1d(np.asarray(gamma, dtype=np.float64))
    b = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    if g.shape[0] != maps.shape[0] or b.shape[0] != maps.shape[0]:
        raise ValueError(
            f"gamma/beta length {g.shape[0]}/{b.shape[0]} does not match {maps.shape[0]} maps"
        )
    shape = (maps.shape[0],) + (1,) * (maps.ndim - 1)
    return g.reshape(shape) * maps + b.reshape(shape)


def _axis_weights(
    points: np.ndarray, nodes: np.ndarray, lengthscale: float, cutoff: float
) -> np.ndarray:
    """Per-axis Gaussian weights [n_points, n_nodes], exactly zero beyond
    cutoff*lengthscale so influence stays compactly supported."""
    d = points[:, None] - nodes[None, :]
    w = np.exp(-0.5 * (d / lengthscale) ** 2)
    w[np.abs(d) > cutoff * lengthscale] = 0.0
    return w


def _check_inside(points: np.ndarray, grid: GridGeometry, what: str) -> None:
    lo, hi = grid.lo(), grid.hi()
    bad = np.flatnonzero(np.any((points < lo) | (points > hi), axis=1))
    if bad.size:
        raise DomainError(f"{what} point {points[bad[0]]} lies outside the grid {lo}..{hi}")


def encode(
    x_context: np.ndarray,
    y_context: np.ndarray,
    aux_fields: tuple[GriddedField, ...],
    config: ModelConfig,
    grid: GridGeometry | None = None,
) -> GriddedEncoding:
    """SetConv encoding of an off-grid context set plus gridded aux inputs.

    density(u) = sum_i exp(-|x_i - u|^2 / (2 l_E^2)); the data channel is the
    same y-weighted sum divided by (density + 1e-8). Aux fields are resampled
    by nearest node; coordinate channels, when enabled, come last in axis
    order. Weights are truncated at kernel_cutoff lengthscales.
    """
    grid = grid if grid is not None else build_grid(config)
    xc = as_points(x_context)
    yc = np.asarray(y_context, dtype=np.float64).ravel()
    if xc.shape[0] != yc.size:
        raise ValueError("context points and values differ in length")
    if len(aux_fields) != config.n_aux_fields:
        raise ConfigurationError(
            f"expected {config.n_aux_fields} aux fields, got {len(aux_fields)}"
        )
    if xc.shape[0]:
        if xc.shape[1] != config.input_dim:
            raise ValueError(f"context points have dim {xc.shape[1]}, expected {config.input_dim}")
        _check_inside(xc, grid, "context")

    ell = config.enc_lengthscale
    if xc.shape[0] == 0:
        density = np.zeros(grid.shape)
        data = np.zeros(grid.shape)
    elif config.input_dim == 1:
        w = _axis_weights(xc[:, 0], grid.axis_coords(0), ell, config.kernel_cutoff)
        density = w.sum(axis=0)
        data = w.T @ yc
    else:
        wx = _axis_weights(xc[:, 0], grid.axis_coords(0), ell, config.kernel_cutoff)
        wy = _axis_weights(xc[:, 1], grid.axis_coords(1), ell, config.kernel_cutoff)
        density = wx.T @ wy
        data = (wx * yc[:, None]).T @ wy

    channels = [density, data / (density + EPS_DIV)]
    node_pts = None
    for aux in aux_fields:
        if node_pts is None:
            node_pts = grid.node_points()
        channels.append(aux.nearest_values(node_pts).reshape(grid.shape))
    if config.coordinate_channels:
        for a in range(config.input_dim):
            coords = grid.axis_coords(a)
            shape = [1] * config.input_dim
            shape[a] = grid.shape[a]
            channels.append(np.broadcast_to(coords.reshape(shape), grid.shape).copy())
    return GriddedEncoding(grid=grid, channels=np.stack(channels, axis=0))


class FiLMLayer(nn.Module):
    """Per-feature-map affine adapter, initialised at identity
    (gamma = 1, beta = 0)."""

    def __init__(self, n_maps: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(n_maps))
        self.beta = nn.Parameter(torch.zeros(n_maps))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return self.gamma.view(shape) * x + self.beta.view(shape)


class _Backbone(nn.Module):
    """U-Net with stride-2 down convs, nearest-upsample up convs with skip
    concatenation, optional bottleneck/head convs, and a linear projection
    to the 2 output channels (raw mean, raw pre-std)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        conv = nn.Conv1d if config.input_dim == 1 else nn.Conv2d
        k = config.kernel_size
        pad = k // 2
        c = config.unet_channels
        self.config = config
        self.initial = conv(config.n_input_channels, c, k, padding=pad)
        self.down = nn.ModuleList(
            conv(c, c, k, stride=2, padding=pad) for _ in range(config.unet_depth)
        )
        self.bottleneck = nn.ModuleList(
            conv(c, c, k, padding=pad) for _ in range(config.n_bottleneck_convs)
        )
        self.up = nn.ModuleList(
            conv(2 * c, c, k, padding=pad) for _ in range(config.unet_depth)
        )
        self.head = nn.ModuleList(conv(c, c, k, padding=pad) for _ in range(config.n_head_convs))
        self.out = conv(c, 2, 1)
        if config.film_enabled:
            sites = [config.n_input_channels] + [c] * self._n_conv_sites()
            self.films = nn.ModuleList(FiLMLayer(n) for n in sites)
        else:
            self.films = nn.ModuleList()

    def _n_conv_sites(self) -> int:
        cfg = self.config
        return 1 + 2 * cfg.unet_depth + cfg.n_bottleneck_convs + cfg.n_head_convs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        films = iter(self.films) if cfg.film_enabled else None

        def site(h: torch.Tensor) -> torch.Tensor:
            return next(films)(h) if films is not None else h

        h = site(x)  # FiLM on the input encoding itself
        h = F.relu(site(self.initial(h)))
        skips = [h]
        for down in self.down:
            h = F.relu(site(down(h)))
            skips.append(h)
        for block in self.bottleneck:
            h = F.relu(site(block(h)))
        for i, up in enumerate(self.up):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = torch.cat([h, skips[-(i + 2)]], dim=1)
            h = F.relu(site(up(h)))
        for block in self.head:
            h = F.relu(site(block(h)))
        return self.out(h)


class ConvCNP(nn.Module):
    """The full model. Parameters are partitioned into backbone tensors and
    FiLM tensors (names under 'net.films.'); fine-tuning strategies toggle
    requires_grad on those partitions."""

    def __init__(self, config: ModelConfig, init_seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.grid = build_grid(config)
        self.net = _Backbone(config)
        self._init_parameters(init_seed)
        self.to(dtype)
        self._dtype = dtype

    def _init_parameters(self, seed: int) -> None:
        # Fan-in-scaled uniform weights, zero biases; FiLM stays at identity.
        # Uses a private generator so construction ignores global RNG state.
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.startswith("net.films."):
                continue
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = int(np.prod(p.shape[1:]))
                    bound = 1.0 / math.sqrt(fan_in)
                    p.uniform_(-bound, bound, generator=gen)

    # -- parameter partitions ------------------------------------------------

    def parameter_partition(self, name: str) -> str:
        return "film" if name.startswith("net.films.") else "backbone"

    def film_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if self.parameter_partition(n) == "film"]

    def backbone_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if self.parameter_partition(n) == "backbone"]

    def film_layers(self) -> list[FiLMLayer]:
        return list(self.net.films)

    def count_parameters(self, partition: str = "all") -> int:
        if partition == "all":
            return sum(p.numel() for p in self.parameters())
        return sum(
            p.numel()
            for n, p in self.named_parameters()
            if self.parameter_partition(n) == partition
        )

    # -- forward pieces -------------------------------------------------------

    def encode_task(
        self, x_context: np.ndarray, y_context: np.ndarray, aux: tuple[GriddedField, ...] = ()
    ) -> GriddedEncoding:
        return encode(x_context, y_context, aux, self.config, self.grid)

    def backbone_forward(self, encodings: torch.Tensor) -> torch.Tensor:
        """encodings: [B, C, *grid]; returns gridded stats [B, 2, *grid]."""
        return self.net(encodings)

    def _decode_weights(self, x_target: np.ndarray) -> list[torch.Tensor]:
        xt = as_points(x_target)
        if xt.shape[0]:
            _check_inside(xt, self.grid, "target")
        ws = []
        for a in range(self.config.input_dim):
            w = _axis_weights(
                xt[:, a], self.grid.axis_coords(a), self.config.dec_lengthscale,
                self.config.kernel_cutoff,
            )
            ws.append(torch.from_numpy(w).to(self._dtype))
        return ws

    def decode(self, stats: torch.Tensor, x_target: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        """Kernel-weighted normalised read-out of one task's gridded stats
        [2, *grid] at target points; std = min_sigma + softplus(raw)."""
        ws = self._decode_weights(x_target)
        if self.config.input_dim == 1:
            w = ws[0]
            denom = w.sum(dim=1)
            mean = (w @ stats[0]) / denom
            raw_std = (w @ stats[1]) / denom
        else:
            wx, wy = ws
            denom = wx.sum(dim=1) * wy.sum(dim=1)
            mean = torch.einsum("mi,ij,mj->m", wx, stats[0], wy) / denom
            raw_std = torch.einsum("mi,ij,mj->m", wx, stats[1], wy) / denom
        std = self.config.min_sigma + F.softplus(raw_std)
        return mean, std

    def forward_tasks(self, tasks) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Differentiable batched forward over normalised tasks; returns one
        (means, stds) pair per task."""
        encodings = torch.stack(
            [
                torch.from_numpy(self.encode_task(t.x_context, t.y_context, t.aux).channels).to(
                    self._dtype
                )
                for t in tasks
            ]
        )
        stats = self.backbone_forward(encodings)
        return [self.decode(stats[i], t.x_target) for i, t in enumerate(tasks)]

    def task_nlls(self, tasks) -> torch.Tensor:
        """Per-task mean NLL (normalised units), differentiable."""
        out = []
        for (mean, std), t in zip(self.forward_tasks(tasks), tasks):
            y = torch.from_numpy(np.asarray(t.y_target, dtype=np.float64)).to(self._dtype)
            nll = 0.5 * math.log(2 * math.pi) + torch.log(std) + (y - mean) ** 2 / (2 * std**2)
            out.append(nll.mean())
        return torch.stack(out)

    def predict(
        self,
        x_context: np.ndarray,
        y_context: np.ndarray,
        x_target: np.ndarray,
        aux: tuple[GriddedField, ...] = (),
    ) -> GaussianPrediction:
        """Point predictions in normalised units (no gradients)."""
        with torch.no_grad():
            enc = torch.from_numpy(
                self.encode_task(x_context, y_context, aux).channels
            ).to(self._dtype)
            stats = self.backbone_forward(enc[None])[0]
            mean, std = self.decode(stats, x_target)
        return GaussianPrediction(
            means=mean.numpy().astype(np.float64), stds=std.numpy().astype(np.float64)
        )

    def influence_radius(self) -> float:
        """Max distance (normalised units) at which a context point can
        affect a target prediction: encoder support + backbone receptive
        field + decoder support."""
        cells = receptive_field_radius_cells(self.config)
        cut = self.config.kernel_cutoff
        return (
            cut * self.config.enc_lengthscale
            + cells * self.grid.spacing
            + cut * self.config.dec_lengthscale
        )


class NonFiniteLossError(RuntimeError):
    def __init__(self, task_index: int):
        super().__init__(f"non-finite loss on task {task_index} of the batch")
        self.task_index = task_index


def param_gradients(model: ConvCNP, tasks) -> "OrderedDict[str, torch.Tensor]":
    """Gradient of the batch-mean NLL with respect to every parameter.

    Temporarily marks all parameters differentiable so frozen partitions
    still report their gradients.
    """
    if not tasks:
        raise ValueError("param_gradients needs a non-empty batch")
    mask = {n: p.requires_grad for n, p in model.named_parameters()}
    for p in model.parameters():
        p.requires_grad_(True)
    try:
        nlls = model.task_nlls(tasks)
        finite = torch.isfinite(nlls)
        if not bool(finite.all()):
            raise NonFiniteLossError(int(torch.nonzero(~finite)[0]))
        loss = nlls.mean()
        names = [n for n, _ in model.named_parameters()]
        grads = torch.autograd.grad(loss, [p for _, p in model.named_parameters()])
        return OrderedDict((n, g.detach().clone()) for n, g in zip(names, grads))
    finally:
        for n, p in model.named_parameters():
            p.requires_grad_(mask[n])
