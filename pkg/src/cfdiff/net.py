"""Conditional denoising U-Net with attention conditioning.

The class condition can enter the network three ways, selected by
``condition_mode``:

* ``attention``: a learned d_tau x d_tau embedding per condition is projected
  to each attention layer's width and concatenated to its keys and values.
* ``adagroup``: a learned vector per condition is added to the time embedding
  that drives the adaptive group normalizations (the plain conditional
  baseline).
* ``none``: the condition input is ignored (unconditional model).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditions import Condition

CONDITION_MODES = ("attention", "adagroup", "none")


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 2
    base: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    heads: int = 4
    d_tau: int = 8
    groups: int = 8
    time_dim: int = 128
    attn_levels: tuple[int, ...] = (1,)
    mid_attn: bool = True
    condition_mode: str = "attention"

    def __post_init__(self):
        if self.condition_mode not in CONDITION_MODES:
            raise ValueError(f"condition_mode must be one of {CONDITION_MODES}")
        for lvl in self.attn_levels:
            if not 0 <= lvl < len(self.channel_mults):
                raise ValueError(f"attention level {lvl} outside the resolution levels")
        for mult in self.channel_mults:
            if (self.base * mult) % self.groups:
                raise ValueError("group count must divide every level width")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base": self.base,
            "channel_mults": ",".join(str(m) for m in self.channel_mults),
            "heads": self.heads,
            "d_tau": self.d_tau,
            "groups": self.groups,
            "time_dim": self.time_dim,
            "attn_levels": ",".join(str(a) for a in self.attn_levels),
            "mid_attn": int(self.mid_attn),
            "condition_mode": self.condition_mode,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, str]) -> "NetConfig":
        def ints(s):
            return tuple(int(v) for v in str(s).split(",") if v != "")

        return cls(
            in_channels=int(d["in_channels"]),
            base=int(d["base"]),
            channel_mults=ints(d["channel_mults"]),
            heads=int(d["heads"]),
            d_tau=int(d["d_tau"]),
            groups=int(d["groups"]),
            time_dim=int(d["time_dim"]),
            attn_levels=ints(d["attn_levels"]),
            mid_attn=bool(int(d.get("mid_attn", 1))),
            condition_mode=str(d["condition_mode"]),
        )


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    ang = t[:, None].to(torch.float64) * freqs[None, :]
    emb = torch.cat([torch.cos(ang), torch.sin(ang)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class AdaGroupNorm(nn.Module):
    """Group normalization whose scale and shift come from an embedding.

    The projection is zero-initialized, so a fresh block is plain group
    normalization. An optional condition vector is added to the driving
    embedding before projection.
    """

    def __init__(self, groups: int, channels: int, emb_dim: int, eps: float = 1e-5):
        super().__init__()
        if channels % groups:
            raise ValueError(f"groups={groups} must divide channels={channels}")
        self.norm = nn.GroupNorm(groups, channels, eps=eps, affine=False)
        self.proj = nn.Linear(emb_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, emb, cond_emb=None):
        if cond_emb is not None:
            emb = emb + cond_emb
        scale, shift = self.proj(emb)[:, :, None, None].chunk(2, dim=1)
        return self.norm(x) * (1.0 + scale) + shift


class ConditionEmbedder(nn.Module):
    """Learned d_tau x d_tau context matrix per condition (table lookup)."""

    def __init__(self, d_tau: int):
        super().__init__()
        self.d_tau = d_tau
        self.table = nn.Embedding(len(Condition), d_tau * d_tau)

    def forward(self, cond_ids: torch.Tensor) -> torch.Tensor:
        return self.table(cond_ids).reshape(-1, self.d_tau, self.d_tau)


class ConditionedAttention(nn.Module):
    """Self-attention over spatial tokens with condition context rows.

    The projected condition matrix is concatenated to the keys and values;
    queries come from image tokens only, so the output keeps the token shape.
    With ``ctx=None`` the block is exactly standard self-attention.
    """

    def __init__(self, channels: int, heads: int, d_tau: int, groups: int = 8):
        super().__init__()
        if channels % heads:
            raise ValueError(f"heads={heads} must divide channels={channels}")
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels, eps=1e-5, affine=True)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.ctx_proj = nn.Linear(d_tau, channels)
        self.out = nn.Linear(channels, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def attend(self, tokens: torch.Tensor, ctx: torch.Tensor | None, return_weights: bool = False):
        """Attention over [B, N, C] tokens; ctx is [B, K, d_tau] rows or None."""
        B, N, C = tokens.shape
        q = self.q(tokens)
        k = self.k(tokens)
        v = self.v(tokens)
        if ctx is not None:
            ctx_tokens = self.ctx_proj(ctx)
            k = torch.cat([k, ctx_tokens], dim=1)
            v = torch.cat([v, ctx_tokens], dim=1)
        d_head = C // self.heads

        def split(z):
            return z.reshape(B, z.shape[1], self.heads, d_head).transpose(1, 2)

        logits = split(q) @ split(k).transpose(-1, -2) / math.sqrt(d_head)
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ split(v)).transpose(1, 2).reshape(B, N, C)
        out = self.out(out)
        if return_weights:
            return out, weights
        return out

    def forward(self, x: torch.Tensor, ctx: torch.Tensor | None) -> torch.Tensor:
        B, C, H, W = x.shape
        tokens = self.norm(x).reshape(B, C, H * W).transpose(1, 2)
        out = self.attend(tokens, ctx)
        return x + out.transpose(1, 2).reshape(B, C, H, W)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin, eps=1e-5)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.adanorm = AdaGroupNorm(groups, cout, emb_dim)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.adanorm(h, emb)))
        return self.skip(x) + h


class CondUNet(nn.Module):
    """Small encoder-decoder epsilon-predictor with time and class inputs."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        widths = [config.base * m for m in config.channel_mults]
        tdim = config.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(config.base, tdim), nn.SiLU(), nn.Linear(tdim, tdim)
        )
        if config.condition_mode == "adagroup":
            self.class_emb = nn.Embedding(len(Condition), tdim)
        elif config.condition_mode == "attention":
            self.cond_embedder = ConditionEmbedder(config.d_tau)
        self.conv_in = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsample = nn.ModuleList()
        for lvl, w in enumerate(widths):
            cin = widths[max(lvl - 1, 0)]
            if lvl > 0:
                self.downsample.append(nn.Conv2d(cin, cin, 3, stride=2, padding=1))
            self.down_res.append(ResBlock(cin, w, tdim, config.groups))
            if lvl in config.attn_levels:
                self.down_attn[str(lvl)] = ConditionedAttention(
                    w, config.heads, config.d_tau, config.groups
                )
        self.mid = ResBlock(widths[-1], widths[-1], tdim, config.groups)
        if config.mid_attn:
            self.mid_attn = ConditionedAttention(widths[-1], config.heads, config.d_tau, config.groups)
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.upsample = nn.ModuleList()
        for lvl, w in enumerate(widths):
            self.up_res.append(ResBlock(2 * w, w, tdim, config.groups))
            if lvl in config.attn_levels:
                self.up_attn[str(lvl)] = ConditionedAttention(
                    w, config.heads, config.d_tau, config.groups
                )
            if lvl > 0:
                self.upsample.append(nn.Conv2d(w, widths[lvl - 1], 3, padding=1))
        self.out_norm = nn.GroupNorm(config.groups, widths[0], eps=1e-5)
        self.out_conv = nn.Conv2d(widths[0], config.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, cond_ids: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} channels, got {x.shape[1]}")
        stride = 2 ** (len(cfg.channel_mults) - 1)
        if x.shape[2] % stride or x.shape[3] % stride:
            raise ValueError(f"spatial dims must be divisible by {stride}")
        emb = self.time_mlp(timestep_embedding(t, cfg.base).to(x.dtype))
        ctx = None
        if cfg.condition_mode == "adagroup":
            emb = emb + self.class_emb(cond_ids)
        elif cfg.condition_mode == "attention":
            ctx = self.cond_embedder(cond_ids).to(x.dtype)
        h = self.conv_in(x)
        skips = []
        for lvl in range(len(cfg.channel_mults)):
            if lvl > 0:
                h = self.downsample[lvl - 1](h)
            h = self.down_res[lvl](h, emb)
            if str(lvl) in self.down_attn:
                h = self.down_attn[str(lvl)](h, ctx)
            skips.append(h)
        h = self.mid(h, emb)
        if cfg.mid_attn:
            h = self.mid_attn(h, ctx)
        for lvl in reversed(range(len(cfg.channel_mults))):
            h = self.up_res[lvl](torch.cat([h, skips[lvl]], dim=1), emb)
            if str(lvl) in self.up_attn:
                h = self.up_attn[str(lvl)](h, ctx)
            if lvl > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[lvl - 1](h)
        return self.out_conv(F.silu(self.out_norm(h)))


def ema_update_state(
    shadow: Mapping[str, np.ndarray], live: Mapping[str, np.ndarray], decay: float
) -> dict[str, np.ndarray]:
    """shadow <- decay * shadow + (1 - decay) * live, elementwise per tensor."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("ema decay must lie in [0, 1]")
    if set(shadow) != set(live):
        raise ValueError("live and shadow weight structures differ")
    out = {}
    for name, s in shadow.items():
        l = live[name]
        if np.shape(s) != np.shape(l):
            raise ValueError(f"shape mismatch for {name!r}")
        out[name] = decay * np.asarray(s) + (1.0 - decay) * np.asarray(l)
    return out


class Denoiser:
    """A trained epsilon-predictor plus its exponential-moving-average shadow."""

    def __init__(self, net: CondUNet, ema_decay: float = 0.999):
        if not 0.0 <= ema_decay <= 1.0:
            raise ValueError("ema decay must lie in [0, 1]")
        self.net = net
        self.config = net.config
        self.ema_decay = ema_decay
        self.ema = copy.deepcopy(net)
        for p in self.ema.parameters():
            p.requires_grad_(False)

    def ema_step(self):
        with torch.no_grad():
            for ps, pl in zip(self.ema.parameters(), self.net.parameters()):
                ps.mul_(self.ema_decay).add_(pl, alpha=1.0 - self.ema_decay)

    def predict_torch(
        self, x: torch.Tensor, cond_ids: torch.Tensor, t: torch.Tensor, use_ema: bool = True
    ) -> torch.Tensor:
        net = self.ema if use_ema else self.net
        net.eval()
        with torch.no_grad():
            return net(x, cond_ids, t)

    def predict(self, x: np.ndarray, c: Condition, t: int, use_ema: bool = True) -> np.ndarray:
        """Numpy-facing prediction for a whole batch at one timestep."""
        x = np.asarray(x)
        xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
        cond = torch.full((xt.shape[0],), int(c), dtype=torch.int64)
        tt = torch.full((xt.shape[0],), int(t), dtype=torch.int64)
        out = self.predict_torch(xt, cond, tt, use_ema=use_ema).numpy()
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("denoiser produced non-finite values")
        return out.astype(x.dtype, copy=False)

    def predictor(self, use_ema: bool = True):
        """Bind use_ema into the pipeline's predict(x, c, t) interface."""

        def fn(x: np.ndarray, c: Condition, t: int) -> np.ndarray:
            return self.predict(x, c, t, use_ema=use_ema)

        return fn


def denoise_predict(
    x: np.ndarray, c: Condition, t: int, denoiser: Denoiser, use_ema: bool = True
) -> np.ndarray:
    return denoiser.predict(x, c, t, use_ema=use_ema)
