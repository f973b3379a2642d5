"""Counterfactual diffusion toolkit for weakly supervised lesion localization."""

from .conditions import Condition
from .net import CondUNet, Denoiser, NetConfig, denoise_predict
from .pipeline import CounterfactualResult, counterfactual, decode, encode, heatmap, segment
from .sampler import SamplerConfig, dynamic_normalize, guided_epsilon
from .schedule import NoiseSchedule, build_schedule, noise_sample, training_loss
from .synthetic import CorpusSpec, LabelledSlice, generate_corpus, normalize_scan, slice_label
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Condition",
    "CondUNet",
    "CorpusSpec",
    "CounterfactualResult",
    "Denoiser",
    "LabelledSlice",
    "NetConfig",
    "NoiseSchedule",
    "SamplerConfig",
    "TrainConfig",
    "build_schedule",
    "counterfactual",
    "decode",
    "denoise_predict",
    "dynamic_normalize",
    "encode",
    "generate_corpus",
    "guided_epsilon",
    "heatmap",
    "noise_sample",
    "normalize_scan",
    "segment",
    "slice_label",
    "train",
    "training_loss",
]
