"""Denoising diffusion: noise schedule, forward marginal, reverse sampler,
noise-prediction loss and classifier-free guidance.

Nothing here depends on a particular network. A denoiser is any callable
``denoiser(x_t, t, cond, null_mask) -> eps_hat`` where ``t`` is a long tensor
of diffusion steps per batch element, ``cond`` the conditioning (or ``None``)
and ``null_mask`` a bool tensor marking elements that receive the null
conditioning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


class DivergenceError(FloatingPointError):
    """Non-finite values appeared during training or sampling."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule with 1-based step arrays (index 0 holds t = 0)."""

    betas: np.ndarray  # length T + 1, betas[0] unused (= 0)
    family: str = "custom"

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", b)
        if b.ndim != 1 or len(b) < 2:
            raise ValueError("schedule needs at least one step")
        if not np.all((b[1:] > 0) & (b[1:] < 1)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - b
        alphas[0] = 1.0
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))
        ab = self.alpha_bars
        post = np.zeros_like(b)
        post[1:] = b[1:] * (1.0 - ab[:-1]) / (1.0 - ab[1:])
        object.__setattr__(self, "posterior_variances", post)

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def cosine(cls, T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> "DiffusionSchedule":
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, max_beta)
        return cls(np.concatenate([[0.0], betas]), family="cosine")

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiffusionSchedule":
        betas = np.linspace(beta_start, beta_end, T)
        return cls(np.concatenate([[0.0], betas]), family="linear")

    @classmethod
    def from_config(cls, cfg: dict) -> "DiffusionSchedule":
        family = cfg.get("family", "cosine")
        T = int(cfg.get("T", 1000))
        if family == "cosine":
            return cls.cosine(T)
        if family == "linear":
            return cls.linear(T, float(cfg.get("beta_start", 1e-4)), float(cfg.get("beta_end", 0.02)))
        raise ValueError(f"unknown schedule family {family!r}")

    def to_config(self) -> dict:
        if self.family == "custom":
            raise ValueError("custom schedules have no compact configuration")
        cfg = {"family": self.family, "T": self.T}
        if self.family == "linear":
            cfg.update(beta_start=float(self.betas[1]), beta_end=float(self.betas[-1]))
        return cfg

    def save(self, path) -> None:
        from .data import write_kv
        write_kv(path, self.to_config())

    @classmethod
    def load(cls, path) -> "DiffusionSchedule":
        from .data import read_kv
        return cls.from_config(read_kv(Path(path)))


@dataclass(frozen=True)
class GuidanceConfig:
    weight: float = 5.0
    dropout_prob: float = 0.1

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("guidance weight must be non-negative")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("conditioning dropout probability must lie in [0, 1]")


@dataclass
class SampleState:
    x: torch.Tensor
    t: int


def _per_sample(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule values at step(s) t, shaped to broadcast against ``like``."""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        out = table[t.long()]
        return out.reshape(-1, *([1] * (like.ndim - 1)))
    return table[int(t)]


def forward_sample(x0: torch.Tensor, t, noise: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Draw from q(x_t | x_0) given the standard normal ``noise``."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} differs from data shape {tuple(x0.shape)}")
    ab = _per_sample(sched.alpha_bars, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


def guided_noise(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """(1 + w) eps_cond - w eps_uncond."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional and unconditional estimates differ in shape")
    return (1.0 + w) * eps_cond - w * eps_uncond


def reverse_step(state: SampleState, eps_hat: torch.Tensor, sched: DiffusionSchedule,
                 generator: torch.Generator | None = None, deterministic: bool = False) -> SampleState:
    """One ancestral step x_t -> x_{t-1} with the posterior variance."""
    t = state.t
    if t < 1:
        raise ValueError("cannot step below t = 0")
    if eps_hat.shape != state.x.shape:
        raise ValueError("noise estimate shape differs from the state")
    x = state.x
    beta = float(sched.betas[t])
    mean = (x - beta / math.sqrt(1.0 - sched.alpha_bars[t]) * eps_hat) / math.sqrt(sched.alphas[t])
    if t > 1 and not deterministic:
        z = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        mean = mean + math.sqrt(sched.posterior_variances[t]) * z
    return SampleState(mean, t - 1)


def _null_mask(batch: int, device) -> torch.Tensor:
    return torch.ones(batch, dtype=torch.bool, device=device)


def _clipped_noise(x, eps, t, sched):
    ab = float(sched.alpha_bars[t])
    x0 = ((x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)).clamp(-1.0, 1.0)
    return (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


def sample(denoiser, cond, sched: DiffusionSchedule, guidance: GuidanceConfig,
           generator: torch.Generator | None, shape, dtype=torch.float32, callback=None,
           clip_denoised: bool = False) -> torch.Tensor:
    """Run the guided reverse chain from pure noise and return x_0.

    ``cond`` of ``None`` samples unconditionally. With ``clip_denoised`` the
    implied x_0 estimate is clipped to [-1, 1] before each step and the noise
    estimate recomputed from it.
    """
    x = torch.randn(shape, generator=generator, dtype=dtype)
    batch = shape[0]
    state = SampleState(x, sched.T)
    w = guidance.weight
    keep = torch.zeros(batch, dtype=torch.bool)
    with torch.no_grad():
        while state.t > 0:
            t_vec = torch.full((batch,), state.t, dtype=torch.long)
            if cond is None:
                eps = denoiser(state.x, t_vec, None, _null_mask(batch, x.device))
            elif w == 0:
                eps = denoiser(state.x, t_vec, cond, keep)
            else:
                both = denoiser(torch.cat([state.x, state.x]), torch.cat([t_vec, t_vec]),
                                torch.cat([cond, cond]),
                                torch.cat([keep, _null_mask(batch, x.device)]))
                eps = guided_noise(both[:batch], both[batch:], w)
            if not torch.isfinite(eps).all():
                raise DivergenceError(f"non-finite noise estimate at step {state.t}", step=state.t)
            if clip_denoised:
                eps = _clipped_noise(state.x, eps, state.t, sched)
            state = reverse_step(state, eps, sched, generator)
            if not torch.isfinite(state.x).all():
                raise DivergenceError(f"non-finite sample at step {state.t + 1}", step=state.t + 1)
            if callback is not None:
                callback(state)
    return state.x


def training_loss(x0: torch.Tensor, cond, denoiser, sched: DiffusionSchedule,
                  guidance: GuidanceConfig, generator: torch.Generator | None = None,
                  norm: str = "l1") -> torch.Tensor:
    """Noise-prediction loss with random conditioning dropout.

    Random draws happen in a fixed order (steps, noise, dropout) so equal
    generators give equal losses. ``cond`` of ``None`` means every element
    receives the null conditioning.
    """
    batch = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    drop = torch.rand(batch, generator=generator) < guidance.dropout_prob
    if cond is None:
        drop = torch.ones(batch, dtype=torch.bool)
    x_t = forward_sample(x0, t, eps, sched)
    eps_hat = denoiser(x_t, t, cond, drop)
    diff = eps - eps_hat
    if norm == "l1":
        loss = diff.abs().mean()
    elif norm == "l2":
        loss = diff.pow(2).mean()
    else:
        raise ValueError(f"unknown loss norm {norm!r}")
    if not torch.isfinite(loss):
        raise DivergenceError("training loss is not finite")
    return loss
