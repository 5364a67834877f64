"""Training and inference loops shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from diffcd.cdnet import ChangeMap, classify, bce_loss, confusion, init_head_params, metrics_from_counts
from diffcd.denoiser import Denoiser, FeaturePyramid
from diffcd.diffusion import NoiseSchedule, denoise_loss, forward_diffuse
from diffcd.errors import ConfigError, NumericError
from diffcd.fdaf import HIDDEN, MODES, FusedFeatures, fdaf_fuse, init_flow_params
from diffcd.numerics import Adam, Rng, Tensor, backward, concat, no_grad, standard_normal

log = logging.getLogger(__name__)

# fork ids keep independent uses of one seed on separate streams
STREAM_BATCHES = 1
STREAM_NOISE = 2
STREAM_FEATURES = 3
STREAM_INIT = 4
STREAM_EVAL = 5


def train_diffusion(model: Denoiser, images: np.ndarray, schedule: NoiseSchedule, steps: int,
                    batch: int = 16, lr: float = 2e-3, seed: int = 0,
                    callback: Callable[[int, float], None] | None = None) -> list[float]:
    """Minimise the noise-prediction loss on ``images`` (N, C, H, W) with Adam.

    Updates ``model.params`` in place and returns the per-step losses.
    """
    if len(images) == 0:
        raise ConfigError("no training images")
    root = Rng(seed)
    batches = root.fork(STREAM_BATCHES)
    noise = root.fork(STREAM_NOISE)
    opt = Adam(model.params, lr=lr)
    losses = []
    for step in range(steps):
        idx = batches.integers(0, len(images) - 1, min(batch, len(images)))
        loss = denoise_loss(model, Tensor(images[idx]), noise, schedule)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite diffusion loss at step {step}")
        opt.step(backward(loss))
        losses.append(value)
        if callback is not None:
            callback(step, value)
    return losses


def eval_denoise_loss(model: Denoiser, images: np.ndarray, schedule: NoiseSchedule,
                      seed: int = 0, batch: int = 32) -> float:
    """Noise-prediction loss over all images with a fixed, seed-determined set of draws."""
    rng = Rng(seed).fork(STREAM_EVAL)
    total = 0.0
    with no_grad():
        for lo in range(0, len(images), batch):
            chunk = images[lo : lo + batch]
            total += denoise_loss(model, Tensor(chunk), rng, schedule).item() * len(chunk)
    return total / len(images)


def feature_noise(shape, timesteps: Sequence[int], seed: int, indices: Sequence[int]) -> np.ndarray:
    """Noise for feature extraction, shaped (len(timesteps), len(indices)) + shape.

    Sample ``i`` draws from ``Rng(seed).fork(STREAM_FEATURES).fork(indices[i])``,
    one draw per timestep in order.
    """
    base = Rng(seed).fork(STREAM_FEATURES)
    noise = np.empty((len(timesteps), len(indices)) + tuple(shape))
    for j, index in enumerate(indices):
        rng = base.fork(int(index))
        for t in range(len(timesteps)):
            noise[t, j] = standard_normal(rng, shape)
    return noise


def _levels(model: Denoiser, imgs, noise, timesteps, schedule) -> list[Tensor]:
    """Per-level features for one batch, timesteps concatenated along channels."""
    per_t = []
    for t, k in enumerate(timesteps):
        noisy = forward_diffuse(imgs if isinstance(imgs, Tensor) else Tensor(imgs), int(k),
                                Tensor(noise[t]), schedule)
        per_t.append(model.forward(noisy, int(k))[1].levels)
    return [concat([taps[lvl] for taps in per_t], axis=1) for lvl in range(len(per_t[0]))]


def pair_features(model: Denoiser, imgs_a: np.ndarray, imgs_b: np.ndarray,
                  timesteps: Sequence[int], schedule: NoiseSchedule, seed: int,
                  indices: Sequence[int] | None = None, batch: int = 32):
    """Batched feature extraction for aligned image pairs.

    Both images of a pair see the same noise (see :func:`feature_noise`), which
    matches :func:`diffcd.diffusion.extract_features` run per sample with that
    stream.  Returns two lists of per-level arrays.
    """
    n = len(imgs_a)
    indices = list(range(n)) if indices is None else list(indices)
    noise = feature_noise(imgs_a.shape[1:], timesteps, seed, indices)
    outs = []
    with no_grad():
        for imgs in (imgs_a, imgs_b):
            chunks = [[lvl.data for lvl in _levels(model, imgs[lo : lo + batch], noise[:, lo : lo + batch],
                                                   timesteps, schedule)]
                      for lo in range(0, n, batch)]
            outs.append([np.concatenate(parts, axis=0) for parts in zip(*chunks)])
    return outs[0], outs[1]


@dataclass
class CDConfig:
    mode: str = "dual"
    max_flow: float = 8.0
    flow_hidden: int = HIDDEN
    head_channels: int = 16
    tau: float = 0.5
    pos_weight: float = 1.0
    epochs: int = 20
    batch: int = 16
    lr: float = 5e-3
    flow_lr_scale: float = 0.1
    flow_warmup: int = 5  # epochs before the flow heads start to move
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown alignment mode {self.mode!r}")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.max_flow <= 0:
            raise ConfigError("max_flow must be positive")
        if self.flow_warmup < 0 or self.flow_lr_scale < 0:
            raise ConfigError("flow_warmup and flow_lr_scale must be non-negative")


def init_cd_params(level_channels: Sequence[int], cfg: CDConfig) -> dict[str, Tensor]:
    rng = Rng(cfg.seed).fork(STREAM_INIT)
    params = init_flow_params(level_channels, rng, cfg.flow_hidden)
    params.update(init_head_params([2 * c for c in level_channels], rng, cfg.head_channels))
    return params


def cd_forward(params, levels_a: Sequence[np.ndarray | Tensor], levels_b, cfg: CDConfig,
               size: int) -> tuple[ChangeMap, FusedFeatures]:
    wrap = lambda x: x if isinstance(x, Tensor) else Tensor(x)
    pyr_a = FeaturePyramid([wrap(x) for x in levels_a])
    pyr_b = FeaturePyramid([wrap(x) for x in levels_b])
    fused = fdaf_fuse(pyr_a, pyr_b, params, cfg.mode, cfg.max_flow, size=size)
    return classify(fused, params, size), fused


def predict(params, feats_a, feats_b, cfg: CDConfig, size: int, batch: int = 64) -> np.ndarray:
    """Change probabilities, shape (N, H, W)."""
    n = len(feats_a[0])
    probs = []
    with no_grad():
        for lo in range(0, n, batch):
            cmap, _ = cd_forward(params, [f[lo : lo + batch] for f in feats_a],
                                 [f[lo : lo + batch] for f in feats_b], cfg, size)
            probs.append(cmap.prob[:, 0])
    return np.concatenate(probs, axis=0)


def f1_of(probs: np.ndarray, masks: np.ndarray, tau: float) -> float:
    return metrics_from_counts(*confusion((probs >= tau).astype(np.uint8), masks)).f1


def _hold_flows(grads: dict, params, hold: bool) -> dict:
    """Drop flow-head gradients while the classifier warms up."""
    if not hold:
        return grads
    frozen = {id(v) for k, v in params.items() if k.startswith("flow")}
    return {t: g for t, g in grads.items() if id(t) not in frozen}


def _forward_cfg(cfg: CDConfig, params, hold: bool) -> CDConfig:
    """While flows are held and their output layers are still zero every flow
    is exactly zero, and dual fusion equals the cheaper "off" fusion bit for bit."""
    if not hold or cfg.mode == "off":
        return cfg
    idle = all(not v.data.any() for k, v in params.items() if k.startswith("flow") and ".c3." in k)
    return replace(cfg, mode="off") if idle else cfg


@dataclass
class CDHistory:
    epoch_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)


def train_cd(feats_a, feats_b, masks: np.ndarray, cfg: CDConfig, params=None,
             val: tuple | None = None,
             callback: Callable[[int, float, float | None], None] | None = None):
    """Train flow heads and classifier on precomputed (frozen-backbone) features.

    ``val`` is ``(feats_a, feats_b, masks)``; its F1 at ``cfg.tau`` is
    recorded after every epoch.  Returns ``(params, history)``.
    """
    size = masks.shape[-1]
    if params is None:
        params = init_cd_params([f.shape[1] for f in feats_a], cfg)
    opt = Adam(params, lr=cfg.lr, lr_scale={"flow": cfg.flow_lr_scale})
    order_rng = Rng(cfg.seed).fork(STREAM_BATCHES)
    n = len(masks)
    history = CDHistory()
    targets = masks[:, None].astype(np.float64)
    for epoch in range(cfg.epochs):
        perm = np.argsort(order_rng.uniform(n), kind="stable")
        total = 0.0
        hold = epoch < cfg.flow_warmup
        fwd = _forward_cfg(cfg, params, hold)
        for lo in range(0, n, cfg.batch):
            idx = perm[lo : lo + cfg.batch]
            cmap, _ = cd_forward(params, [f[idx] for f in feats_a], [f[idx] for f in feats_b], fwd, size)
            loss = bce_loss(cmap.logits, targets[idx], cfg.pos_weight)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite change loss in epoch {epoch}")
            opt.step(_hold_flows(backward(loss), params, hold))
            total += value * len(idx)
        history.epoch_loss.append(total / n)
        vf1 = None
        if val is not None:
            vf1 = f1_of(predict(params, val[0], val[1], cfg, size), val[2], cfg.tau)
            history.val_f1.append(vf1)
        log.info("epoch %d loss %.5f val_f1 %s", epoch, history.epoch_loss[-1], vf1)
        if callback is not None:
            callback(epoch, history.epoch_loss[-1], vf1)
    return params, history


def train_cd_joint(model: Denoiser, imgs_a: np.ndarray, imgs_b: np.ndarray, masks: np.ndarray,
                   timesteps: Sequence[int], schedule: NoiseSchedule, cfg: CDConfig,
                   params=None, val: tuple | None = None, backbone_lr_scale: float = 0.1,
                   feature_seed: int = 0,
                   callback: Callable[[int, float, float | None], None] | None = None):
    """Like :func:`train_cd` but fine-tunes the denoiser along with the heads.

    ``val`` is ``(imgs_a, imgs_b, masks)``.  Feature noise is fixed per sample
    exactly as in :func:`pair_features`.  ``model.params`` is updated in place.
    """
    size = masks.shape[-1]
    noise = feature_noise(imgs_a.shape[1:], timesteps, feature_seed, range(len(masks)))
    if params is None:
        probe, _ = pair_features(model, imgs_a[:1], imgs_b[:1], timesteps, schedule, feature_seed)
        params = init_cd_params([f.shape[1] for f in probe], cfg)
    joint = dict(params)
    joint.update({f"backbone.{k}": v for k, v in model.params.items()})
    opt = Adam(joint, lr=cfg.lr, lr_scale={"flow": cfg.flow_lr_scale, "backbone.": backbone_lr_scale})
    order_rng = Rng(cfg.seed).fork(STREAM_BATCHES)
    n = len(masks)
    history = CDHistory()
    targets = masks[:, None].astype(np.float64)
    for epoch in range(cfg.epochs):
        perm = np.argsort(order_rng.uniform(n), kind="stable")
        total = 0.0
        hold = epoch < cfg.flow_warmup
        fwd = _forward_cfg(cfg, joint, hold)
        for lo in range(0, n, cfg.batch):
            idx = perm[lo : lo + cfg.batch]
            live = Denoiser(model.cfg, {k[9:]: v for k, v in joint.items() if k.startswith("backbone.")})
            la = _levels(live, imgs_a[idx], noise[:, idx], timesteps, schedule)
            lb = _levels(live, imgs_b[idx], noise[:, idx], timesteps, schedule)
            cmap, _ = cd_forward(joint, la, lb, fwd, size)
            loss = bce_loss(cmap.logits, targets[idx], cfg.pos_weight)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite change loss in epoch {epoch}")
            opt.step(_hold_flows(backward(loss), joint, hold))
            total += value * len(idx)
        for k in model.params:
            model.params[k] = joint[f"backbone.{k}"]
        history.epoch_loss.append(total / n)
        vf1 = None
        if val is not None:
            va, vb = pair_features(model, val[0], val[1], timesteps, schedule, feature_seed)
            vf1 = f1_of(predict(joint, va, vb, cfg, size), val[2], cfg.tau)
            history.val_f1.append(vf1)
        log.info("epoch %d loss %.5f val_f1 %s", epoch, history.epoch_loss[-1], vf1)
        if callback is not None:
            callback(epoch, history.epoch_loss[-1], vf1)
    heads = {k: v for k, v in joint.items() if not k.startswith("backbone.")}
    return heads, history
