"""Counterfactual pipeline: unconditional encoding, guided decoding, heatmaps.

Encoding walks the DDIM grid forward with the unconditional model only;
decoding reverses the exact same grid with guided noise estimates under an
intervened condition (healthy by default). The anomaly heatmap is the
channel-averaged absolute difference between input and counterfactual,
computed in model range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditions import Condition
from .sampler import (
    PredictFn,
    SamplerConfig,
    apply_normalization,
    ddim_time_grid,
    estimate_x0,
    guided_epsilon,
    recompose,
)
from .schedule import NoiseSchedule


# normalize_scan clips intensities to [0, INTENSITY_CEILING]; the affine map
# below puts that whole range inside [-1, 1], which dynamic normalization's
# th = max(1, percentile) presumes
INTENSITY_CEILING = 1.5


def to_model_range(x: np.ndarray) -> np.ndarray:
    """Map normalized intensities [0, 1.5] affinely onto the model's [-1, 1]."""
    return 2.0 * (np.asarray(x) / INTENSITY_CEILING) - 1.0


def from_model_range(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x) + 1.0) / 2.0 * INTENSITY_CEILING


@dataclass
class CounterfactualResult:
    latent: np.ndarray
    counterfactual: np.ndarray
    heatmap: np.ndarray
    encode_timesteps: np.ndarray
    decode_timesteps: np.ndarray
    x0_trace: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.heatmap.shape[1] != 1:
            raise ValueError("heatmap must be single-channel")
        if np.any(self.heatmap < 0):
            raise ValueError("heatmap must be nonnegative")


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected [B, M, H, W] image tensor, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image tensor contains non-finite values")
    return x


def _depth(cfg: SamplerConfig, depth: int | None) -> int:
    if depth is None:
        return cfg.L
    if not 0 <= depth <= cfg.ddim_steps:
        raise ValueError(f"depth {depth} outside [0, {cfg.ddim_steps}]")
    return depth


def encode(
    x0: np.ndarray,
    cfg: SamplerConfig,
    predict: PredictFn,
    sched: NoiseSchedule,
    depth: int | None = None,
    trace: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Map an image to its depth-L diffusion latent with the unconditional model.

    Returns (x_L, visited timesteps). ``depth`` overrides cfg.L; depth 0 is
    the empty trajectory and returns the input unchanged. Per-step x0
    estimates are appended to ``trace`` when a list is supplied.
    """
    L = _depth(cfg, depth)
    x = _as_batch(x0).astype(np.float64, copy=True)
    grid = ddim_time_grid(sched.T, cfg.ddim_steps)
    visited = grid[: L + 1]
    for k in range(L):
        t, t_next = int(grid[k]), int(grid[k + 1])
        eps = np.asarray(predict(x, Condition.NULL, t), dtype=np.float64)
        if not np.all(np.isfinite(eps)):
            raise FloatingPointError(f"non-finite prediction at t={t} during encoding")
        x0_hat = apply_normalization(estimate_x0(x, eps, t, sched), cfg.normalization, cfg.s)
        if trace is not None:
            trace.append(x0_hat)
        x = recompose(x0_hat, eps, t_next, sched)
    return x, visited


def decode(
    x_L: np.ndarray,
    c: Condition,
    cfg: SamplerConfig,
    predict: PredictFn,
    sched: NoiseSchedule,
    depth: int | None = None,
    trace: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode a depth-L latent back to an image under an intervened condition.

    Walks the reversed encode grid applying implicit guidance at scale cfg.w;
    per-step normalization follows cfg exactly as in encoding.
    """
    if c is Condition.NULL:
        raise ValueError("decode requires a real condition; w=0 already ignores it")
    L = _depth(cfg, depth)
    x = _as_batch(x_L).astype(np.float64, copy=True)
    grid = ddim_time_grid(sched.T, cfg.ddim_steps)
    visited = grid[: L + 1][::-1]
    for k in range(L, 0, -1):
        t, t_prev = int(grid[k]), int(grid[k - 1])
        eps = guided_epsilon(x, c, t, cfg.w, predict).astype(np.float64)
        if not np.all(np.isfinite(eps)):
            raise FloatingPointError(f"non-finite prediction at t={t} during decoding")
        x0_hat = apply_normalization(estimate_x0(x, eps, t, sched), cfg.normalization, cfg.s)
        if trace is not None:
            trace.append(x0_hat)
        x = recompose(x0_hat, eps, t_prev, sched)
    return x, visited


def heatmap(x0: np.ndarray, xcf: np.ndarray) -> np.ndarray:
    """Channel-mean absolute difference, shape [B, 1, H, W]."""
    x0 = _as_batch(x0)
    xcf = _as_batch(xcf)
    if x0.shape != xcf.shape:
        raise ValueError(f"heatmap: shape mismatch {x0.shape} vs {xcf.shape}")
    return np.abs(x0 - xcf).mean(axis=1, keepdims=True)


def box_blur(x: np.ndarray, size: int = 3) -> np.ndarray:
    """Optional square box blur over the two trailing spatial axes."""
    if size < 1 or size % 2 == 0:
        raise ValueError("blur size must be odd and >= 1")
    if size == 1:
        return np.asarray(x).copy()
    pad = size // 2
    x = np.asarray(x, dtype=np.float64)
    padded = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)], mode="edge")
    out = np.zeros_like(x)
    for dy in range(size):
        for dx in range(size):
            out += padded[..., dy : dy + x.shape[-2], dx : dx + x.shape[-1]]
    return out / (size * size)


def counterfactual(
    x0: np.ndarray,
    cfg: SamplerConfig,
    predict: PredictFn,
    sched: NoiseSchedule,
    target: Condition = Condition.HEALTHY,
    smooth: int = 0,
    keep_trace: bool = False,
) -> CounterfactualResult:
    """Full pipeline: encode, decode with the intervened condition, heatmap."""
    x0 = _as_batch(x0)
    trace = [] if keep_trace else None
    latent, enc_ts = encode(x0, cfg, predict, sched, trace=trace)
    xcf, dec_ts = decode(latent, target, cfg, predict, sched, trace=trace)
    if list(dec_ts) != list(enc_ts[::-1]):
        raise AssertionError("decode grid is not the reversed encode grid")
    heat = heatmap(x0, xcf)
    if smooth:
        heat = box_blur(heat, smooth)
    return CounterfactualResult(
        latent=latent,
        counterfactual=xcf,
        heatmap=heat,
        encode_timesteps=enc_ts,
        decode_timesteps=dec_ts,
        x0_trace=trace,
    )


def segment(
    x0: np.ndarray,
    cfg: SamplerConfig,
    threshold: float,
    predict: PredictFn,
    sched: NoiseSchedule,
    target: Condition = Condition.HEALTHY,
    smooth: int = 0,
) -> tuple[CounterfactualResult, np.ndarray]:
    """Run the pipeline and binarize the heatmap at the given threshold."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    result = counterfactual(x0, cfg, predict, sched, target=target, smooth=smooth)
    mask = result.heatmap > threshold
    return result, mask
