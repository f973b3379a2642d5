"""Diffusion noise schedule, forward (noising) process and training objective.

The schedule stores per-step betas and their cumulative signal product
alpha_bar_t = prod_{j<=t} (1 - beta_j). Coefficients are kept in float64;
image tensors stay in their own (normally float32) dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .conditions import Condition

# Relative tolerance for the running-product consistency invariant.
_PRODUCT_RTOL = 1e-12


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable diffusion schedule over timesteps t in [0, T)."""

    T: int
    betas: np.ndarray
    alphas_cum: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if self.T < 1:
            raise ScheduleError("T must be >= 1")
        if betas.shape != (self.T,):
            raise ScheduleError(f"betas must have shape ({self.T},), got {betas.shape}")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ScheduleError("every beta must lie strictly inside (0, 1)")
        alphas_cum = self.alphas_cum
        if alphas_cum is None:
            alphas_cum = np.cumprod(1.0 - betas)
        else:
            alphas_cum = np.asarray(alphas_cum, dtype=np.float64)
            expected = np.cumprod(1.0 - betas)
            if alphas_cum.shape != (self.T,):
                raise ScheduleError("alphas_cum length must equal T")
            if not np.allclose(alphas_cum, expected, rtol=_PRODUCT_RTOL, atol=0.0):
                raise ScheduleError("alphas_cum is not the running product of (1 - beta)")
        if not np.all((alphas_cum > 0.0) & (alphas_cum < 1.0)):
            raise ScheduleError("alpha_bar values must lie strictly inside (0, 1)")
        if self.T > 1 and not np.all(np.diff(alphas_cum) < 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_cum", alphas_cum)
        self.betas.setflags(write=False)
        self.alphas_cum.setflags(write=False)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t < self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T})")
        return float(self.alphas_cum[t])


def build_schedule(
    T: int,
    kind: str = "linear",
    beta_start: float = 1e-4,
    beta_end: float | None = 0.02,
) -> NoiseSchedule:
    """Build a noise schedule of the given kind.

    ``linear`` interpolates beta from ``beta_start`` to ``beta_end`` over T
    steps; ``constant`` uses ``beta_start`` everywhere. Endpoints must lie
    strictly inside (0, 1).
    """
    if T < 1:
        raise ScheduleError("T must be >= 1")
    for name, v in (("beta_start", beta_start), ("beta_end", beta_end)):
        if v is not None and not 0.0 < v < 1.0:
            raise ScheduleError(f"{name}={v} outside (0, 1)")
    if kind == "constant":
        betas = np.full(T, float(beta_start), dtype=np.float64)
    elif kind == "linear":
        if beta_end is None:
            raise ScheduleError("linear schedule needs beta_end")
        betas = np.linspace(float(beta_start), float(beta_end), T, dtype=np.float64)
    else:
        raise ScheduleError(f"unknown schedule kind: {kind!r}")
    return NoiseSchedule(T=T, betas=betas)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def noise_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward-noise x0 to timestep t: sqrt(a_bar)*x0 + sqrt(1-a_bar)*eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    _check_same_shape(x0, eps, "noise_sample")
    a = sched.alpha_bar(int(t))
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def training_loss(
    x0_batch: np.ndarray,
    conditions: Sequence[Condition],
    predict: Callable[[np.ndarray, Sequence[Condition], np.ndarray], np.ndarray],
    sched: NoiseSchedule,
    rng: np.random.Generator,
    t: np.ndarray | None = None,
    eps: np.ndarray | None = None,
) -> float:
    """Monte-Carlo denoising objective for one batch.

    Draws per-example t ~ U[0, T) and eps ~ N(0, I) (unless given explicitly,
    which tests use to exercise the true-noise mock), forms x_t and returns
    the mean squared error between ``predict(x_t, conditions, t)`` and eps.
    """
    x0_batch = np.asarray(x0_batch, dtype=np.float64)
    if x0_batch.shape[0] == 0:
        raise ValueError("training_loss: empty batch")
    if len(conditions) != x0_batch.shape[0]:
        raise ValueError("training_loss: one condition per example required")
    B = x0_batch.shape[0]
    if t is None:
        t = rng.integers(0, sched.T, size=B)
    t = np.asarray(t, dtype=np.int64)
    if eps is None:
        eps = rng.standard_normal(x0_batch.shape)
    eps = np.asarray(eps, dtype=np.float64)
    _check_same_shape(x0_batch, eps, "training_loss")
    coef_shape = (B,) + (1,) * (x0_batch.ndim - 1)
    a = sched.alphas_cum[t].reshape(coef_shape)
    x_t = np.sqrt(a) * x0_batch + np.sqrt(1.0 - a) * eps
    pred = np.asarray(predict(x_t, conditions, t), dtype=np.float64)
    _check_same_shape(pred, eps, "training_loss prediction")
    if not np.all(np.isfinite(pred)):
        raise FloatingPointError("training_loss: non-finite prediction (divergence?)")
    return float(np.mean((pred - eps) ** 2))
