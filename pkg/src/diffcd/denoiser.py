"""The noise-prediction network: a small time-conditioned U-Net with feature taps.

Layout for ``depth = D`` and ``base_channels = b`` (channels at level ``l`` are
``b * 2**l``, level ``l`` has resolution ``H / 2**l``)::

    conv_in                      level 0
    down{l} (stride 2) + enc{l}  level l, for l = 1..D
    mid                          level D
    dec{j} + up{j}               decoder stage j works at level D - j, j = 0..D-1
    out_block + conv_out         level 0

``dec{j}`` consumes ``concat(h, skip)`` and its activation is the tap for
stage ``j``; taps are therefore ordered coarse to fine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffcd.errors import ConfigError, ContractError, ShapeError
from diffcd.numerics import (
    Rng, Tensor, add, concat, conv2d, group_norm, matmul, mul, relu, reshape,
    standard_normal, upsample_nearest,
)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 2
    time_embed_dim: int = 16
    tap_layers: tuple[int, ...] | None = None
    norm_groups: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if self.base_channels % self.norm_groups:
            raise ConfigError(
                f"base_channels {self.base_channels} not divisible by norm_groups {self.norm_groups}")
        if self.tap_layers is not None:
            object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
            if not self.tap_layers:
                raise ConfigError("tap_layers must not be empty")
            bad = [t for t in self.tap_layers if not 0 <= t < self.depth]
            if bad:
                raise ConfigError(f"tap layers {bad} are not decoder stages 0..{self.depth - 1}")

    @property
    def taps(self) -> tuple[int, ...]:
        return tuple(range(self.depth)) if self.tap_layers is None else tuple(sorted(self.tap_layers))

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def tap_channels(self, stage: int) -> int:
        return self.channels(self.depth - stage)

    def tap_extent(self, stage: int, size: int) -> int:
        return size // 2 ** (self.depth - stage)


@dataclass
class FeaturePyramid:
    """Decoder activations, coarse to fine, each shaped (N, C, h, w)."""

    levels: list[Tensor]
    timesteps: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.levels:
            raise ContractError("a feature pyramid needs at least one level")

    @property
    def extents(self) -> list[tuple[int, int]]:
        return [t.shape[-2:] for t in self.levels]

    @property
    def channels(self) -> list[int]:
        return [t.shape[1] for t in self.levels]

    def __len__(self) -> int:
        return len(self.levels)


def time_embedding(k, dim: int) -> np.ndarray:
    """Sinusoidal embedding; entry ``2i`` is ``sin(k / 10000**(2i/dim))`` and
    ``2i + 1`` the matching cosine.  ``k`` may be a scalar or a 1-D array,
    giving shape ``(dim,)`` or ``(len(k), dim)``."""
    if dim < 2 or dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    ks = np.asarray(k, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = ks[..., None] * freqs
    out = np.empty(ks.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _block_names(cfg: UNetConfig) -> list[tuple[str, int, int]]:
    """(name, in_channels, out_channels) for every time-conditioned block."""
    blocks = []
    for level in range(1, cfg.depth + 1):
        blocks.append((f"enc{level}", cfg.channels(level), cfg.channels(level)))
    blocks.append(("mid", cfg.channels(cfg.depth), cfg.channels(cfg.depth)))
    for stage in range(cfg.depth):
        c = cfg.channels(cfg.depth - stage)
        blocks.append((f"dec{stage}", 2 * c, c))
    blocks.append(("out_block", 2 * cfg.base_channels, cfg.base_channels))
    return blocks


def param_shapes(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    b, d = cfg.base_channels, cfg.time_embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "conv_in.w": (b, cfg.in_channels, 3, 3),
        "conv_in.b": (b,),
    }
    for level in range(1, cfg.depth + 1):
        shapes[f"down{level}.w"] = (cfg.channels(level), cfg.channels(level - 1), 3, 3)
        shapes[f"down{level}.b"] = (cfg.channels(level),)
    for name, cin, cout in _block_names(cfg):
        shapes[f"{name}.conv.w"] = (cout, cin, 3, 3)
        shapes[f"{name}.conv.b"] = (cout,)
        shapes[f"{name}.norm.g"] = (1, cout, 1, 1)
        shapes[f"{name}.norm.b"] = (1, cout, 1, 1)
        shapes[f"{name}.time.w"] = (d, cout)
        shapes[f"{name}.time.b"] = (cout,)
    for stage in range(cfg.depth):
        level = cfg.depth - stage
        shapes[f"up{stage}.w"] = (cfg.channels(level - 1), cfg.channels(level), 3, 3)
        shapes[f"up{stage}.b"] = (cfg.channels(level - 1),)
    shapes["conv_out.w"] = (cfg.in_channels, b, 3, 3)
    shapes["conv_out.b"] = (cfg.in_channels,)
    return shapes


def init_params(cfg: UNetConfig, rng: Rng) -> dict[str, Tensor]:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases, unit norm gains."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".norm.g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            data = standard_normal(rng, shape) * np.sqrt(2.0 / fan_in)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _block(params, name: str, h: Tensor, temb: Tensor, groups: int) -> Tensor:
    h = conv2d(h, params[f"{name}.conv.w"], params[f"{name}.conv.b"], padding=1)
    h = add(mul(group_norm(h, groups), params[f"{name}.norm.g"]), params[f"{name}.norm.b"])
    t = add(matmul(temb, params[f"{name}.time.w"]), params[f"{name}.time.b"])
    h = add(h, reshape(t, (t.shape[0], t.shape[1], 1, 1)))
    return relu(h)


def unet_forward(cfg: UNetConfig, params: dict[str, Tensor], u_k: Tensor, k):
    """Predict the injected noise for ``u_k`` at timestep(s) ``k``.

    ``u_k`` is (C, H, W) or (N, C, H, W); ``k`` is an int or one int per
    sample.  Returns ``(eps_hat, taps)`` where ``taps`` is a
    :class:`FeaturePyramid` holding the configured decoder stages.
    """
    single = u_k.ndim == 3
    x = reshape(u_k, (1,) + u_k.shape) if single else u_k
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (N, {cfg.in_channels}, H, W) input, got {u_k.shape}")
    n, _, h, w = x.shape
    stride = 2 ** cfg.depth
    if h % stride or w % stride:
        raise ShapeError(f"input extents {h}x{w} not divisible by 2**depth = {stride}")
    ks = np.broadcast_to(np.asarray(k, dtype=np.int64), (n,))
    temb = Tensor(time_embedding(ks, cfg.time_embed_dim))
    g = cfg.norm_groups

    hcur = conv2d(x, params["conv_in.w"], params["conv_in.b"], padding=1)
    skips = [hcur]
    for level in range(1, cfg.depth + 1):
        hcur = conv2d(hcur, params[f"down{level}.w"], params[f"down{level}.b"], stride=2, padding=1)
        hcur = _block(params, f"enc{level}", hcur, temb, g)
        skips.append(hcur)
    hcur = _block(params, "mid", hcur, temb, g)
    taps = []
    wanted = set(cfg.taps)
    for stage in range(cfg.depth):
        level = cfg.depth - stage
        hcur = _block(params, f"dec{stage}", concat([hcur, skips[level]], axis=1), temb, g)
        if stage in wanted:
            taps.append(hcur)
        hcur = upsample_nearest(hcur, 2)
        hcur = conv2d(hcur, params[f"up{stage}.w"], params[f"up{stage}.b"], padding=1)
    hcur = _block(params, "out_block", concat([hcur, skips[0]], axis=1), temb, g)
    eps_hat = conv2d(hcur, params["conv_out.w"], params["conv_out.b"], padding=1)
    if single:
        eps_hat = reshape(eps_hat, eps_hat.shape[1:])
    return eps_hat, FeaturePyramid(taps, tuple(int(v) for v in np.unique(ks)))


class Denoiser:
    """Bundles a config with its parameter dict; callable as ``model(u_k, k)``."""

    def __init__(self, cfg: UNetConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: UNetConfig, rng: Rng) -> "Denoiser":
        return cls(cfg, init_params(cfg, rng))

    def __call__(self, u_k: Tensor, k) -> Tensor:
        return unet_forward(self.cfg, self.params, u_k, k)[0]

    def forward(self, u_k: Tensor, k):
        return unet_forward(self.cfg, self.params, u_k, k)

    def frozen(self) -> "Denoiser":
        return Denoiser(self.cfg, {n: p.detach() for n, p in self.params.items()})

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())
