"""DDPM forward process, epsilon-prediction objective and ancestral sampler.

Timesteps are 1-based: ``t = 1 .. T``. A denoiser is any callable
``denoiser(x_t, t, condition) -> Tensor`` returning an epsilon prediction with the
shape of ``x_t``. ``x_t`` may carry a leading batch axis, in which case ``t`` may be
an integer array with one step per sample.

Random draws come from numpy's Philox4x64 counter-based generator keyed through a
``SeedSequence``, so a seed (plus optional stream words) fixes every trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError
from .numerics import Tensor, no_grad, reduce_mean, square, sub

Denoiser = Callable[[Tensor, "int | np.ndarray", object], Tensor]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for ``(seed, *stream)``."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) & 0xFFFFFFFFFFFFFFFF for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables stored 0-based; use the accessors for 1-based steps."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def _index(self, t) -> np.ndarray | int:
        arr = np.asarray(t)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"timestep must be an integer, got {t!r}")
        if arr.size and (arr.min() < 1 or arr.max() > self.T):
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return arr - 1

    def beta(self, t):
        return self.betas[self._index(t)]

    def alpha(self, t):
        return self.alphas[self._index(t)]

    def alpha_bar(self, t):
        return self.alpha_bars[self._index(t)]

    def to_dict(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def _cumulative_product(alphas: np.ndarray) -> np.ndarray:
    out = np.empty_like(alphas)
    acc = 1.0
    for i, a in enumerate(alphas):
        acc = acc * a
        out[i] = acc
    return out


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.array(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ValueError("betas must be a non-empty vector")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("every beta must lie strictly inside (0, 1)")
    alphas = 1.0 - betas
    for arr in (betas, alphas):
        arr.setflags(write=False)
    bars = _cumulative_product(alphas)
    bars.setflags(write=False)
    return NoiseSchedule(betas, alphas, bars)


def make_schedule(kind: str = "linear", T: int = 50, beta_start: float | None = None,
                  beta_end: float | None = None) -> NoiseSchedule:
    """Linear beta schedule.

    Without explicit endpoints the classic ``[1e-4, 0.02]`` range for 1000 steps is
    rescaled by ``1000 / max(T, 50)`` so short chains still end near pure noise while
    every beta stays below one.
    """
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    T = int(T)
    if beta_start is None or beta_end is None:
        ratio = 1000.0 / max(T, 50)
        beta_start = 1e-4 * ratio if beta_start is None else beta_start
        beta_end = 0.02 * ratio if beta_end is None else beta_end
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return schedule_from_betas(betas)


def _batch_coeff(values, x: np.ndarray, t) -> np.ndarray | float:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    if values.shape[0] != x.shape[0]:
        raise ShapeError(f"got {values.shape[0]} timesteps for a batch of {x.shape[0]}")
    return values.reshape((-1,) + (1,) * (x.ndim - 1))


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> Tensor:
    """Closed-form marginal ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    x0, eps = _data(x0), _data(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"q_sample: x0 shape {x0.shape} differs from eps shape {eps.shape}")
    abar = _batch_coeff(schedule.alpha_bar(t), x0, t)
    return Tensor(np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps)


def training_loss(denoiser: Denoiser, x0, t, eps, schedule: NoiseSchedule, condition=None) -> Tensor:
    """Mean squared error between ``eps`` and the prediction on ``q_sample(x0, t, eps)``."""
    x_t = q_sample(x0, t, eps, schedule)
    pred = denoiser(x_t, t, condition)
    target = Tensor(_data(eps))
    if pred.shape != target.shape:
        raise ShapeError(f"denoiser returned shape {pred.shape}, expected {target.shape}")
    return reduce_mean(square(sub(target, pred)))


def p_sample(denoiser: Denoiser, x_t, t: int, schedule: NoiseSchedule, condition=None,
             noise=None, rng: np.random.Generator | None = None) -> Tensor:
    """One ancestral step ``x_t -> x_{t-1}`` with fixed variance ``beta_t``.

    At ``t == 1`` the noise term is dropped. For ``t > 1`` pass ``noise`` or an ``rng``.
    """
    t = int(t)
    beta = float(schedule.beta(t))
    alpha = float(schedule.alpha(t))
    abar = float(schedule.alpha_bar(t))
    x = _data(x_t)
    with no_grad():
        eps = denoiser(Tensor(x), t, condition).data
    if eps.shape != x.shape:
        raise ShapeError(f"denoiser returned shape {eps.shape}, expected {x.shape}")
    mean = (x - (beta / np.sqrt(1.0 - abar)) * eps) / np.sqrt(alpha)
    if t == 1:
        return Tensor(mean)
    if noise is None:
        if rng is None:
            raise ValueError("p_sample needs noise or an rng for t > 1")
        noise = rng.standard_normal(x.shape)
    noise = _data(noise)
    if noise.shape != x.shape:
        raise ShapeError(f"noise shape {noise.shape} differs from x_t shape {x.shape}")
    return Tensor(mean + np.sqrt(beta) * noise)


def sample_loop(denoiser: Denoiser, shape, schedule: NoiseSchedule, condition=None, seed: int = 0,
                trace: list | None = None) -> Tensor:
    """Draw ``x_T ~ N(0, I)`` and run ``T`` ancestral steps.

    If ``trace`` is a list, ``(t, x_t)`` is appended before each step, so the
    recorded arrays are exactly the inputs the denoiser saw.
    """
    rng = make_rng(seed)
    x = rng.standard_normal(tuple(shape))
    for t in range(schedule.T, 0, -1):
        if trace is not None:
            trace.append((t, x.copy()))
        noise = rng.standard_normal(x.shape) if t > 1 else None
        x = p_sample(denoiser, x, t, schedule, condition, noise=noise).data
    return Tensor(x)
