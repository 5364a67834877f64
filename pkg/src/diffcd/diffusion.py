"""Noise schedule, forward noising, the noise-prediction loss, and ancestral sampling.

Schedule arrays are stored zero-based: entry ``k - 1`` belongs to timestep
``k`` for ``k = 1..T``.  The cumulative product ``alpha_bar`` is the scale used
both by the forward process and by the reverse-step denominator; the reverse
step injects noise with standard deviation ``sigma = sqrt(beta)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from diffcd.denoiser import FeaturePyramid
from diffcd.errors import ConfigError, ContractError, ShapeError
from diffcd.numerics import (
    Rng, Tensor, concat, mean, mul, no_grad, square, standard_normal, sub,
)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        beta = np.asarray(betas, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise ConfigError("a schedule needs at least one timestep")
        if not ((beta > 0) & (beta < 1)).all():
            raise ConfigError("every beta must lie strictly inside (0, 1)")
        alpha = 1.0 - beta
        return cls(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha), sigma=np.sqrt(beta))

    def check(self, k: int) -> int:
        k = int(k)
        if not 1 <= k <= self.T:
            raise ContractError(f"timestep {k} outside 1..{self.T}")
        return k


def make_linear_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.05) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((-1,) + (1,) * (ndim - 1)) if values.ndim else values


def forward_diffuse(u0: Tensor, k, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """``sqrt(alpha_bar_k) * u0 + sqrt(1 - alpha_bar_k) * eps``.

    ``k`` is a timestep, or one timestep per leading-axis sample of ``u0``.
    """
    if u0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} != image shape {u0.shape}")
    ks = np.asarray(k, dtype=np.int64)
    if ks.min() < 1 or ks.max() > s.T:
        raise ContractError(f"timesteps must lie in 1..{s.T}")
    ab = s.alpha_bar[ks - 1]
    signal = np.sqrt(ab)
    noise = np.sqrt(1.0 - ab)
    if ks.ndim == 0:
        return mul(u0, float(signal)) + mul(eps, float(noise))
    return mul(u0, Tensor(_per_sample(signal, u0.ndim))) + mul(eps, Tensor(_per_sample(noise, u0.ndim)))


def draw_training_noise(rng: Rng, batch_shape: tuple[int, ...], T: int):
    """Timesteps then noise, in the order :func:`denoise_loss` consumes them."""
    ks = rng.integers(1, T, batch_shape[0])
    eps = standard_normal(rng, batch_shape)
    return ks, eps


def denoise_loss(model: Callable, u0_batch: Tensor, rng: Rng, s: NoiseSchedule) -> Tensor:
    """Monte Carlo estimate of ``E ||model(u_k, k) - eps||^2`` per pixel.

    One timestep ``k ~ U{1..T}`` and one noise draw per batch element.
    """
    if u0_batch.ndim < 2 or u0_batch.shape[0] == 0:
        raise ContractError("denoise_loss needs a non-empty (N, ...) batch")
    ks, eps = draw_training_noise(rng, u0_batch.shape, s.T)
    eps_t = Tensor(eps)
    noisy = forward_diffuse(u0_batch, ks, eps_t, s)
    return mean(square(sub(model(noisy, ks), eps_t)))


def reverse_step(model: Callable, u_k: Tensor, k: int, q: Tensor, s: NoiseSchedule) -> Tensor:
    """One ancestral step from ``u_k`` to ``u_{k-1}``:

    ``(u_k - (1 - alpha_k) / sqrt(1 - alpha_bar_k) * model(u_k, k)) / sqrt(alpha_k) + sigma_k * q``
    """
    k = s.check(k)
    if q.shape != u_k.shape:
        raise ShapeError(f"noise shape {q.shape} != state shape {u_k.shape}")
    if k == 1 and np.any(q.data != 0.0):
        raise ContractError("the final step (k = 1) must not inject noise")
    a = s.alpha[k - 1]
    coef = (1.0 - a) / np.sqrt(1.0 - s.alpha_bar[k - 1])
    eps_hat = model(u_k, k)
    mean_part = mul(sub(u_k, mul(eps_hat, coef)), 1.0 / np.sqrt(a))
    return mean_part + mul(q, s.sigma[k - 1])


def sample(model: Callable, shape, rng: Rng, s: NoiseSchedule, clamp: bool = True) -> Tensor:
    """Ancestral sampling from pure noise, clamped to [-1, 1] after the last step only."""
    shape = tuple(shape)
    with no_grad():
        u = Tensor(standard_normal(rng, shape))
        for k in range(s.T, 0, -1):
            q = Tensor(standard_normal(rng, shape)) if k > 1 else Tensor(np.zeros(shape))
            u = reverse_step(model, u, k, q, s)
    return Tensor(np.clip(u.data, -1.0, 1.0)) if clamp else u


def extract_features(model, image: Tensor, timesteps: Sequence[int], rng: Rng,
                     s: NoiseSchedule) -> FeaturePyramid:
    """Noise ``image`` to each timestep, run the denoiser, and stack its taps.

    Levels are concatenated along channels in the order of ``timesteps``.  A
    fresh noise draw is taken from ``rng`` per timestep, so two images read
    with identically seeded streams see identical noise.
    """
    if not timesteps:
        raise ContractError("at least one timestep is required")
    per_level: list[list[Tensor]] = []
    for k in timesteps:
        k = s.check(k)
        eps = Tensor(standard_normal(rng, image.shape))
        noisy = forward_diffuse(image, k, eps, s)
        _, taps = model.forward(noisy, k)
        if not per_level:
            per_level = [[t] for t in taps.levels]
        else:
            for bucket, t in zip(per_level, taps.levels):
                bucket.append(t)
    levels = [concat(bucket, axis=1) if len(bucket) > 1 else bucket[0] for bucket in per_level]
    return FeaturePyramid(levels, tuple(int(k) for k in timesteps))
