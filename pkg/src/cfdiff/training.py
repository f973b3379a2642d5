"""Denoiser training loop: noise-prediction objective with condition dropping.

Per sample, the timestep is uniform over [0, T) and with probability
``drop_prob`` the condition is replaced by the null token, which is what
makes implicit guidance possible at inference time. All randomness flows
from a single seeded numpy generator, so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .conditions import Condition
from .container import atomic_write_text
from .net import CondUNet, Denoiser, NetConfig
from .schedule import NoiseSchedule


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    steps: int = 2000
    drop_prob: float = 0.35
    ema_decay: float = 0.999
    seed: int = 0
    log_every: int = 25

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop probability must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch size and step count must be positive")

    def to_dict(self) -> dict:
        return {
            "lr": repr(self.lr),
            "batch_size": self.batch_size,
            "steps": self.steps,
            "drop_prob": repr(self.drop_prob),
            "ema_decay": repr(self.ema_decay),
            "seed": self.seed,
        }


def drop_conditions(labels: np.ndarray, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each condition id by NULL with the given probability."""
    labels = np.asarray(labels, dtype=np.int64)
    dropped = labels.copy()
    dropped[rng.random(labels.shape) < drop_prob] = int(Condition.NULL)
    return dropped


@dataclass
class TrainResult:
    denoiser: Denoiser
    history: list[tuple[int, float, float]]
    realized_drop_fraction: float


def write_loss_log(path: str | Path, result: TrainResult):
    lines = ["step,loss,ema_loss"]
    lines += [f"{s},{l:.6f},{e:.6f}" for s, l, e in result.history]
    lines.append(f"# realized_drop_fraction={result.realized_drop_fraction:.6f}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def train(
    images: np.ndarray,
    labels: np.ndarray,
    sched: NoiseSchedule,
    net_config: NetConfig,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train a denoiser on model-range images with healthy/unhealthy labels."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("training set must be a nonempty [N, M, H, W] array")
    if labels.shape != (images.shape[0],):
        raise ValueError("need one label per image")
    if not np.all((labels == int(Condition.HEALTHY)) | (labels == int(Condition.UNHEALTHY))):
        raise ValueError("dataset labels must be healthy or unhealthy, never null")

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    net = CondUNet(net_config)
    denoiser = Denoiser(net, ema_decay=cfg.ema_decay)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    data = torch.from_numpy(images)
    alphas = sched.alphas_cum

    history: list[tuple[int, float, float]] = []
    ema_loss = None
    null_draws = 0
    total_draws = 0
    net.train()
    for step in range(cfg.steps):
        idx = rng.integers(0, images.shape[0], size=cfg.batch_size)
        t_np = rng.integers(0, sched.T, size=cfg.batch_size)
        cond_np = drop_conditions(labels[idx], cfg.drop_prob, rng)
        null_draws += int(np.sum(cond_np == int(Condition.NULL)))
        total_draws += cfg.batch_size
        eps_np = rng.standard_normal((cfg.batch_size,) + images.shape[1:]).astype(np.float32)

        x0 = data[idx]
        eps = torch.from_numpy(eps_np)
        a = torch.from_numpy(alphas[t_np].astype(np.float32))[:, None, None, None]
        x_t = torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps
        cond = torch.from_numpy(cond_np)
        t = torch.from_numpy(t_np.astype(np.int64))

        opt.zero_grad(set_to_none=True)
        pred = net(x_t, cond, t)
        loss = torch.mean((pred - eps) ** 2)
        loss_val = float(loss.detach())
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        loss.backward()
        opt.step()
        denoiser.ema_step()

        ema_loss = loss_val if ema_loss is None else 0.99 * ema_loss + 0.01 * loss_val
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append((step, loss_val, ema_loss))
    net.eval()

    result = TrainResult(
        denoiser=denoiser,
        history=history,
        realized_drop_fraction=null_draws / total_draws,
    )
    if log_path is not None:
        write_loss_log(log_path, result)
    return result
