"""Deterministic DDIM stepping, implicit guidance and dynamic normalization.

All functions here are pure array math; the denoiser enters only through a
``predict(x, condition, t) -> eps`` callable, so every operation can be
exercised with mock predictors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .conditions import Condition
from .schedule import NoiseSchedule

PredictFn = Callable[[np.ndarray, Condition, int], np.ndarray]

NORMALIZATION_MODES = ("dynamic", "static-clip", "none")


@dataclass(frozen=True)
class SamplerConfig:
    """Inference hyperparameters for encode/decode trajectories.

    ``L`` counts DDIM steps (encode depth), ``ddim_steps`` is the total grid
    size, ``w`` the guidance scale and ``s`` the dynamic-normalization
    percentile.
    """

    w: float = 2.0
    L: int = 50
    ddim_steps: int = 100
    s: float = 99.0
    normalization: str = "dynamic"

    def __post_init__(self):
        if not 0 < self.L <= self.ddim_steps:
            raise ValueError(f"need 0 < L <= ddim_steps, got L={self.L}, ddim_steps={self.ddim_steps}")
        if not 0.0 < self.s <= 100.0:
            raise ValueError(f"percentile s must lie in (0, 100], got {self.s}")
        if self.normalization not in NORMALIZATION_MODES:
            raise ValueError(f"normalization must be one of {NORMALIZATION_MODES}")

    def with_depth_fraction(self, fraction: float) -> "SamplerConfig":
        """L expressed as a fraction of the step grid (0 < fraction <= 1)."""
        L = max(1, round(fraction * self.ddim_steps))
        return replace(self, L=L)


def ddim_time_grid(T: int, ddim_steps: int) -> np.ndarray:
    """Integer timesteps visited by a trajectory of the given step count.

    Returns ``ddim_steps + 1`` strictly increasing positions in [0, T); the
    clean image sits at grid[0] = 0 and full depth reaches grid[-1] = T - 1.
    """
    if ddim_steps < 1:
        raise ValueError("ddim_steps must be >= 1")
    if ddim_steps > T - 1:
        raise ValueError(f"ddim_steps={ddim_steps} needs {ddim_steps + 1} distinct timesteps in [0, {T})")
    grid = np.round(np.linspace(0.0, T - 1, ddim_steps + 1)).astype(np.int64)
    if not np.all(np.diff(grid) > 0):
        raise ValueError("time grid is not strictly increasing")
    return grid


def guided_epsilon(
    x_t: np.ndarray,
    c: Condition,
    t: int,
    w: float,
    predict: PredictFn,
) -> np.ndarray:
    """Implicit-guidance noise estimate w*eps(c) + (1-w)*eps(null).

    The degenerate scales skip the unused branch entirely, so w=0 never
    evaluates the conditional model and w=1 never evaluates the
    unconditional one.
    """
    if c is Condition.NULL:
        raise ValueError("guidance toward the null condition is meaningless")
    if w == 1.0:
        return np.asarray(predict(x_t, c, t))
    if w == 0.0:
        return np.asarray(predict(x_t, Condition.NULL, t))
    eps_c = np.asarray(predict(x_t, c, t))
    eps_null = np.asarray(predict(x_t, Condition.NULL, t))
    return w * eps_c + (1.0 - w) * eps_null


def estimate_x0(x_t: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Denoised estimate (x_t - sqrt(1-a_bar)*eps) / sqrt(a_bar)."""
    a = sched.alpha_bar(t)
    return (x_t - np.sqrt(1.0 - a) * eps) / np.sqrt(a)


def recompose(x0_hat: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Re-noise an x0 estimate to timestep t with a fixed eps."""
    a = sched.alpha_bar(t)
    return np.sqrt(a) * x0_hat + np.sqrt(1.0 - a) * eps


def ddim_step_reverse(
    x_t: np.ndarray,
    eps: np.ndarray,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
) -> tuple[np.ndarray, np.ndarray]:
    """One deterministic denoising step t -> t_prev; returns (x_prev, x0_hat)."""
    if not t_prev < t:
        raise ValueError(f"reverse step needs t_prev < t, got {t_prev} >= {t}")
    x0_hat = estimate_x0(x_t, eps, t, sched)
    return recompose(x0_hat, eps, t_prev, sched), x0_hat


def ddim_step_forward(
    x_t: np.ndarray,
    eps: np.ndarray,
    t: int,
    t_next: int,
    sched: NoiseSchedule,
) -> tuple[np.ndarray, np.ndarray]:
    """One deterministic noising step t -> t_next; exact algebraic inverse of
    ``ddim_step_reverse`` for a fixed eps. Returns (x_next, x0_hat)."""
    if not t_next > t:
        raise ValueError(f"forward step needs t_next > t, got {t_next} <= {t}")
    x0_hat = estimate_x0(x_t, eps, t, sched)
    return recompose(x0_hat, eps, t_next, sched), x0_hat


def dynamic_normalize(x0_hat: np.ndarray, s: float) -> np.ndarray:
    """Percentile renormalization of an x0 estimate.

    th = max(1, percentile(|x|, s)) per image, then clip to (-th, th) and
    divide by th. Output always lies in [-1, 1]; inputs already inside the
    unit range pass through clipped only. Batched input [B, ...] is
    normalized per image.
    """
    if not 0.0 < s <= 100.0:
        raise ValueError(f"percentile s must lie in (0, 100], got {s}")
    x = np.asarray(x0_hat)
    if x.size == 0:
        raise ValueError("dynamic_normalize: empty tensor")
    if x.ndim == 4:
        flat = np.abs(x).reshape(x.shape[0], -1)
        th = np.maximum(1.0, np.percentile(flat, s, axis=1))
        th = th.reshape((-1,) + (1,) * (x.ndim - 1))
    else:
        th = max(1.0, float(np.percentile(np.abs(x), s)))
    return np.clip(x, -th, th) / th


def apply_normalization(x0_hat: np.ndarray, mode: str, s: float) -> np.ndarray:
    """Per-step latent normalization: dynamic, static (-1, 1) clip, or none."""
    if mode == "dynamic":
        return dynamic_normalize(x0_hat, s)
    if mode == "static-clip":
        return np.clip(x0_hat, -1.0, 1.0)
    if mode == "none":
        return x0_hat
    raise ValueError(f"unknown normalization mode: {mode!r}")
