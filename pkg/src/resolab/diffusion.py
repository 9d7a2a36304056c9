"""Forward/reverse diffusion: schedule, losses, ancestral and DDIM sampling.

Timesteps are 1-based: t in [1, T]. The schedule holds float64 arrays with
beta linearly spaced over [beta_start, beta_end] (endpoints inclusive),
alpha = 1 - beta, alpha_bar the exact running product, and sigma = sqrt(beta)
as the reverse-step noise scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor
from .unet import unet_forward

__all__ = [
    "DiffusionSchedule", "build_schedule", "forward_marginal", "simple_loss",
    "ddpm_step", "cfg_predict", "SamplerConfig", "ddim_sample",
    "ddim_timesteps", "ddim_denoise",
]

DESK_TIMESTEPS = 50
DESK_BETA_START = 1e-3
DESK_BETA_END = 5e-2


@dataclass(frozen=True)
class DiffusionSchedule:
    timesteps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.timesteps:
            raise ConfigError(f"timestep {t} outside schedule range [1, {self.timesteps}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t) - 1])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[self._check_t(t) - 1])


def build_schedule(timesteps: int = DESK_TIMESTEPS, beta_start: float = DESK_BETA_START,
                   beta_end: float = DESK_BETA_END) -> DiffusionSchedule:
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, timesteps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)  # exact sequential products
    return DiffusionSchedule(
        timesteps=timesteps, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=np.sqrt(beta)
    )


def _per_sample_coeffs(schedule: DiffusionSchedule, t, n: int) -> tuple[np.ndarray, np.ndarray]:
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        t_arr = np.full(n, int(t_arr))
    if t_arr.shape != (n,):
        raise ShapeError(f"t must be a scalar or length-{n} vector, got shape {t_arr.shape}")
    idx = t_arr.astype(np.int64)
    if idx.min() < 1 or idx.max() > schedule.timesteps:
        raise ConfigError(f"timestep outside schedule range [1, {schedule.timesteps}]")
    ab = schedule.alpha_bar[idx - 1]
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def forward_marginal(x0: Tensor, t, eps: Tensor, schedule: DiffusionSchedule) -> Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps (differentiable in x0, eps)."""
    if x0.shape != eps.shape:
        raise ShapeError(f"forward_marginal: x0 {x0.shape} and eps {eps.shape} differ")
    c_sig, c_noise = _per_sample_coeffs(schedule, t, x0.shape[0] if x0.ndim else 1)
    shape = (-1,) + (1,) * (x0.ndim - 1)
    a = ops.mul(x0, Tensor(c_sig.reshape(shape)))
    b = ops.mul(eps, Tensor(c_noise.reshape(shape)))
    return ops.add(a, b)


def simple_loss(model, x0: Tensor, t, eps: Tensor, c, schedule: DiffusionSchedule,
                params=None, forward=unet_forward) -> Tensor:
    """Mean squared error between true and predicted noise at timestep(s) t."""
    x_t = forward_marginal(x0, t, eps, schedule)
    eps_hat = forward(model, x_t, t, c, params)
    if eps_hat.shape != eps.shape:
        raise ShapeError(f"simple_loss: prediction {eps_hat.shape} != noise {eps.shape}")
    diff = ops.sub(eps, eps_hat)
    return ops.mean_all(ops.mul(diff, diff))


def ddpm_step(x_t: Tensor, t: int, eps_hat: Tensor, schedule: DiffusionSchedule,
              noise: Tensor | None = None) -> Tensor:
    """One ancestral reverse step; the noise term is omitted at t = 1."""
    t = schedule._check_t(t)
    if eps_hat.shape != x_t.shape:
        raise ShapeError(f"ddpm_step: eps_hat {eps_hat.shape} != x_t {x_t.shape}")
    a = schedule.alpha_at(t)
    b = schedule.beta_at(t)
    ab = schedule.alpha_bar_at(t)
    mean = (x_t.data - (b / np.sqrt(1.0 - ab)) * eps_hat.data) / np.sqrt(a)
    if t == 1:
        return Tensor(mean)
    if noise is None:
        raise ConfigError("ddpm_step: noise required for t > 1")
    if noise.shape != x_t.shape:
        raise ShapeError(f"ddpm_step: noise {noise.shape} != x_t {x_t.shape}")
    return Tensor(mean + schedule.sigma_at(t) * noise.data)


def cfg_predict(model, x: Tensor, t, c, w: float, params=None, forward=unet_forward) -> Tensor:
    """Classifier-free guided prediction eps_u + w (eps_c - eps_u).

    w = 1 returns the conditional pass unchanged (and needs no null class);
    w = 0 returns the unconditional (null-token) pass unchanged.
    """
    w = float(w)
    if w == 1.0:
        return forward(model, x, t, c, params)
    null_id = model.config.null_class
    if null_id is None:
        raise ConfigError("cfg_predict: model reserves no null class for unconditional passes")
    n = x.shape[0]
    eps_u = forward(model, x, t, np.full(n, null_id), params)
    if w == 0.0:
        return eps_u
    eps_c = forward(model, x, t, c, params)
    return ops.add(eps_u, ops.scale(ops.sub(eps_c, eps_u), w))


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    guidance_scale: float = 7.5
    eta: float = 0.0
    seed: int = 0

    def validate(self) -> "SamplerConfig":
        if self.steps < 1:
            raise ConfigError(f"sampler steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")
        if self.guidance_scale < 0.0:
            raise ConfigError(f"guidance_scale must be >= 0, got {self.guidance_scale}")
        return self


def ddim_timesteps(timesteps: int, steps: int) -> list[int]:
    """Uniformly spaced decreasing timesteps from T down to 1, length ``steps``."""
    if steps < 1 or steps > timesteps:
        raise ConfigError(f"steps must be in [1, {timesteps}], got {steps}")
    ts = np.round(np.linspace(timesteps, 1, steps)).astype(int)
    return [int(t) for t in ts]


def _ddim_update(x: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray,
                 schedule: DiffusionSchedule, eta: float, z: np.ndarray | None) -> np.ndarray:
    ab_t = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_at(t_prev) if t_prev >= 1 else 1.0
    x0_hat = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    np.clip(x0_hat, -1.0, 1.0, out=x0_hat)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    resid = max(1.0 - ab_prev - sigma * sigma, 0.0)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(resid) * eps_hat
    if z is not None:
        out = out + sigma * z
    return out


def ddim_denoise(x: np.ndarray, predict, schedule: DiffusionSchedule, steps: int,
                 eta: float, rng: np.random.Generator) -> np.ndarray:
    """Run the DDIM update loop on a noise field given a prediction callback."""
    ts = ddim_timesteps(schedule.timesteps, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_hat = predict(x, t)
        if not np.all(np.isfinite(eps_hat)):
            raise NumericError(f"ddim: non-finite prediction at t={t}")
        z = rng.standard_normal(x.shape) if (eta > 0.0 and t_prev >= 1) else None
        x = _ddim_update(x, t, t_prev, eps_hat, schedule, eta, z)
    return x


def ddim_sample(model, shape: tuple[int, int, int, int], cfg: SamplerConfig, c,
                schedule: DiffusionSchedule, params=None, forward=unet_forward) -> Tensor:
    """Deterministically sample from seeded standard-normal noise."""
    cfg.validate()
    if len(shape) != 4:
        raise ShapeError(f"ddim_sample: shape must be [N, C, H, W], got {shape}")
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal(shape)

    def predict(arr: np.ndarray, t: int) -> np.ndarray:
        return cfg_predict(model, Tensor(arr), t, c, cfg.guidance_scale, params, forward).data

    return Tensor(ddim_denoise(x, predict, schedule, cfg.steps, cfg.eta, rng))
