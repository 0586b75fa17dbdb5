"""Noise schedule, closed-form forward diffusion and deterministic DDIM."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

ALPHA_BAR_EPS = 1e-12


class ScheduleError(ValueError):
    pass


class TimestepError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """alphas[t-1] = α_t for t = 1..T; ``alpha_bar(0)`` is 1 by convention."""

    alphas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64).copy()
        if a.ndim != 1 or a.size < 1:
            raise ScheduleError("alphas must be a non-empty 1-D sequence")
        if np.any(a <= 0) or np.any(a >= 1):
            raise ScheduleError("every alpha must lie in (0, 1)")
        a.setflags(write=False)
        ab = np.cumprod(a)
        ab.setflags(write=False)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "alpha_bars", ab)
        ext = np.concatenate([[1.0], ab])
        ext.setflags(write=False)
        object.__setattr__(self, "_ext", ext)

    @classmethod
    def from_alphas(cls, alphas: Sequence[float]) -> "NoiseSchedule":
        return cls(np.asarray(alphas, dtype=np.float64))

    @property
    def T(self) -> int:
        return int(self.alphas.size)

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas

    def alpha_bar(self, t):
        """ᾱ_t for integer (or integer-array) t in [0, T]."""
        return self._ext[t]

    def coef(self, t, like: torch.Tensor) -> torch.Tensor:
        """ᾱ_t as a tensor broadcastable against ``like`` (batch dim first)."""
        if isinstance(t, torch.Tensor):
            t_np = t.detach().cpu().numpy()
        else:
            t_np = np.asarray(t)
        if np.any(t_np < 0) or np.any(t_np > self.T):
            raise TimestepError(f"timestep out of range [0, {self.T}]: {t_np}")
        ab = torch.as_tensor(self._ext[t_np.astype(np.int64)], dtype=like.dtype, device=like.device)
        if ab.ndim == 1 and like.ndim > 1:
            ab = ab.view(-1, *([1] * (like.ndim - 1)))
        return ab


def build_schedule(
    T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> NoiseSchedule:
    """β_t spaced linearly (``linear``) or with linearly spaced square roots
    (``scaled_linear``) between the endpoints; α_t = 1 - β_t."""
    if kind not in ("linear", "scaled_linear"):
        raise ScheduleError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T, dtype=np.float64) ** 2
    return NoiseSchedule(1.0 - betas)


def _check_t(t, sched: NoiseSchedule, lo: int = 1) -> None:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.any(arr < lo) or np.any(arr > sched.T):
        raise TimestepError(f"timestep {arr} outside [{lo}, {sched.T}]")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def forward_diffuse(z0, t, eps, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps."""
    z0, eps = _as_tensor(z0), _as_tensor(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    _check_t(t, sched)
    ab = sched.coef(t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def true_noise(z_t, z0, t, sched: NoiseSchedule) -> torch.Tensor:
    """The ε that produced ``z_t`` from ``z0`` at step ``t``."""
    z_t, z0 = _as_tensor(z_t), _as_tensor(z0)
    _check_t(t, sched)
    ab = sched.coef(t, z_t)
    if torch.any(1.0 - ab <= ALPHA_BAR_EPS):
        raise ScheduleError("alpha_bar_t == 1: noise is not identifiable")
    return (z_t - ab.sqrt() * z0) / (1.0 - ab).sqrt()


def ddim_predict_x0(z_t, eps_pred, t, sched: NoiseSchedule) -> torch.Tensor:
    """Clean-latent estimate (z_t - sqrt(1 - ᾱ_t) ε̂) / sqrt(ᾱ_t)."""
    z_t, eps_pred = _as_tensor(z_t), _as_tensor(eps_pred)
    _check_t(t, sched)
    ab = sched.coef(t, z_t)
    if torch.any(ab < ALPHA_BAR_EPS):
        raise ScheduleError("alpha_bar_t below 1e-12")
    return (z_t - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt()


def ddim_step(z_t, eps_pred, t, t_prev, sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic (η = 0) DDIM update from ``t`` to ``t_prev``."""
    t_arr = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
    tp_arr = np.asarray(t_prev.detach().cpu() if isinstance(t_prev, torch.Tensor) else t_prev)
    if np.any(tp_arr >= t_arr):
        raise TimestepError(f"t_prev ({tp_arr}) must be < t ({t_arr})")
    _check_t(t_prev, sched, lo=0)
    x0 = ddim_predict_x0(z_t, eps_pred, t, sched)
    ab_prev = sched.coef(t_prev, x0)
    return ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * _as_tensor(eps_pred)


@dataclass(frozen=True)
class StepSchedule:
    steps: tuple[int, ...]

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """(t_i, t_{i+1}) transitions, ending at the terminal target 0."""
        seq = list(self.steps) + [0]
        return list(zip(seq[:-1], seq[1:]))

    def __len__(self) -> int:
        return len(self.steps)


def make_step_schedule(T: int, n: int) -> StepSchedule:
    """``n`` descending timesteps at uniform intervals, starting at T."""
    if not 1 <= n <= T:
        raise ValueError(f"step count must be in [1, {T}], got {n}")
    return StepSchedule(tuple(T - (i * T) // n for i in range(n)))


DenoiseFn = Callable[[torch.Tensor, int], torch.Tensor]


def ddim_sample(
    denoise_fn: DenoiseFn,
    z_T: torch.Tensor,
    steps: StepSchedule,
    sched: NoiseSchedule,
    differentiable: bool = False,
) -> tuple[torch.Tensor, list[tuple[int, torch.Tensor]]]:
    """Run deterministic DDIM along ``steps``.

    Returns the final sample and the clean-latent estimate made at every
    visited timestep. With ``differentiable=False`` the loop runs without
    autograd.
    """
    with torch.set_grad_enabled(differentiable and torch.is_grad_enabled()):
        z = z_T
        trajectory = []
        for t, t_prev in steps.pairs:
            eps = denoise_fn(z, t)
            if not torch.isfinite(eps).all():
                raise NonFiniteError(f"denoiser returned non-finite values at t={t}")
            x0 = ddim_predict_x0(z, eps, t, sched)
            trajectory.append((t, x0))
            ab_prev = sched.coef(t_prev, x0)
            z = ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps
            if not torch.isfinite(z).all():
                raise NonFiniteError(f"non-finite latent after step {t}->{t_prev}")
    return z, trajectory
