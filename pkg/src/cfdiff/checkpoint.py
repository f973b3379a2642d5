"""Checkpoint persistence: weights, EMA shadow, schedule and config echo.

The noise schedule is embedded verbatim (float64 betas packed into a u8
tensor) so training and inference can never drift apart; the config echo is
a canonical run-config text that suffices to rebuild the network and re-run
the job.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .container import f64_to_u8, read_tensors, text_to_u8, u8_to_f64, u8_to_text, write_tensors
from .net import CondUNet, Denoiser, NetConfig
from .runconfig import Config, parse_config, serialize_config
from .schedule import NoiseSchedule


def save_checkpoint(
    path: str | Path,
    denoiser: Denoiser,
    sched: NoiseSchedule,
    extra_config: Config | None = None,
):
    tensors: dict[str, np.ndarray] = {}
    for name, p in denoiser.net.state_dict().items():
        tensors[f"weights/{name}"] = p.detach().numpy().astype(np.float32)
    for name, p in denoiser.ema.state_dict().items():
        tensors[f"ema/{name}"] = p.detach().numpy().astype(np.float32)
    tensors["schedule/T"] = np.array([sched.T], dtype=np.float32)
    tensors["schedule/betas"] = f64_to_u8(sched.betas)
    echo: Config = {"net": denoiser.config.to_dict()}
    echo["ema"] = {"decay": repr(denoiser.ema_decay)}
    for section, items in (extra_config or {}).items():
        if section not in echo:
            echo[section] = dict(items)
    tensors["meta/config"] = text_to_u8(serialize_config(echo))
    write_tensors(path, tensors)


def load_checkpoint(path: str | Path) -> tuple[Denoiser, NoiseSchedule, Config]:
    tensors = read_tensors(path)
    echo = parse_config(u8_to_text(tensors["meta/config"]))
    net_config = NetConfig.from_dict(echo["net"])
    T = int(tensors["schedule/T"][0])
    betas = u8_to_f64(tensors["schedule/betas"])
    sched = NoiseSchedule(T=T, betas=betas)

    net = CondUNet(net_config)
    denoiser = Denoiser(net, ema_decay=float(echo["ema"]["decay"]))

    def load_into(module: CondUNet, prefix: str):
        state = {}
        for key, arr in tensors.items():
            if key.startswith(prefix):
                state[key[len(prefix) :]] = torch.from_numpy(np.ascontiguousarray(arr))
        module.load_state_dict(state, strict=True)

    load_into(denoiser.net, "weights/")
    load_into(denoiser.ema, "ema/")
    denoiser.net.eval()
    denoiser.ema.eval()
    return denoiser, sched, echo
