"""Evaluation harnesses: per-method reports, hyperparameter sweep, ablation.

Every report carries enough metadata (method tag, w, L, s, seed, data hash)
to re-run its cell. Sweep cells may run on a small thread pool; results are
merged by cell index so worker count never changes the output.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .container import atomic_write_text
from .metrics import auprc, ceil_dice, dice_threshold_curve, threshold_baseline
from .pipeline import counterfactual, to_model_range
from .sampler import PredictFn, SamplerConfig
from .schedule import NoiseSchedule

ABLATION_VARIANTS = (
    "cdpm",
    "implicit_guidance",
    "attention_conditioning",
    "dynamic_normalization",
)


@dataclass
class EvalReport:
    method: str
    auprc: float
    ceil_dice: float
    best_threshold: float
    dice_curve: tuple[np.ndarray, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)
    error: str | None = None

    def csv_row(self) -> dict:
        row = {
            "method": self.method,
            "auprc": "" if self.error else f"{self.auprc:.6f}",
            "ceil_dice": "" if self.error else f"{self.ceil_dice:.6f}",
            "best_threshold": "" if self.error else f"{self.best_threshold:.6f}",
        }
        for key in ("w", "L", "s", "normalization", "seed", "data_hash"):
            row[key] = str(self.meta.get(key, ""))
        row["error"] = self.error or ""
        return row


CSV_FIELDS = (
    "method",
    "w",
    "L",
    "s",
    "normalization",
    "seed",
    "auprc",
    "ceil_dice",
    "best_threshold",
    "data_hash",
    "error",
)


def data_hash(images: np.ndarray, masks: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images).tobytes())
    h.update(np.ascontiguousarray(masks).tobytes())
    return h.hexdigest()[:16]


def evaluate_heatmaps(
    heatmaps: np.ndarray, masks: np.ndarray, method: str, meta: dict | None = None
) -> EvalReport:
    heats = [h for h in heatmaps]
    gts = [m for m in masks]
    best, threshold = ceil_dice(heats, gts)
    pooled = np.concatenate([h.ravel() for h in heats])
    pooled_gt = np.concatenate([np.asarray(m).astype(bool).ravel() for m in gts])
    return EvalReport(
        method=method,
        auprc=auprc(pooled, pooled_gt),
        ceil_dice=best,
        best_threshold=threshold,
        dice_curve=dice_threshold_curve(heats, gts),
        meta=meta or {},
    )


def counterfactual_heatmaps(
    images: np.ndarray,
    cfg: SamplerConfig,
    predict: PredictFn,
    sched: NoiseSchedule,
    batch: int = 64,
) -> np.ndarray:
    """Run the pipeline over a split in chunks; images are normalized [0, 1.5]."""
    x = to_model_range(np.asarray(images, dtype=np.float32))
    out = []
    for start in range(0, x.shape[0], batch):
        result = counterfactual(x[start : start + batch], cfg, predict, sched)
        out.append(result.heatmap)
    return np.concatenate(out, axis=0)


def evaluate_counterfactual(
    images: np.ndarray,
    masks: np.ndarray,
    cfg: SamplerConfig,
    predict: PredictFn,
    sched: NoiseSchedule,
    method: str = "counterfactual",
    seed: int | None = None,
    batch: int = 64,
) -> EvalReport:
    heatmaps = counterfactual_heatmaps(images, cfg, predict, sched, batch=batch)
    meta = {
        "w": cfg.w,
        "L": cfg.L,
        "s": cfg.s,
        "normalization": cfg.normalization,
        "seed": "" if seed is None else seed,
        "data_hash": data_hash(images, masks),
    }
    return evaluate_heatmaps(heatmaps, masks, method, meta)


def evaluate_baseline(images: np.ndarray, masks: np.ndarray) -> EvalReport:
    heatmaps = threshold_baseline(np.asarray(images))
    return evaluate_heatmaps(
        heatmaps, masks, "thresholding", {"data_hash": data_hash(images, masks)}
    )


def sweep(
    images: np.ndarray,
    masks: np.ndarray,
    w_grid: list[float],
    l_fractions: list[float],
    base_cfg: SamplerConfig,
    predict: PredictFn,
    sched: NoiseSchedule,
    workers: int = 1,
    seed: int | None = None,
) -> list[EvalReport]:
    """Dice over the (w, L) grid on a validation split.

    Cell failures are recorded in the report rather than aborting the sweep.
    """
    if not w_grid or not l_fractions:
        raise ValueError("sweep grids must be nonempty")
    cells = [(w, frac) for w in w_grid for frac in l_fractions]

    def run_cell(cell):
        w, frac = cell
        try:
            cfg = replace(base_cfg, w=w).with_depth_fraction(frac)
            report = evaluate_counterfactual(
                images, masks, cfg, predict, sched, method="sweep", seed=seed
            )
            report.meta["l_fraction"] = frac
            return report
        except Exception as exc:  # noqa: BLE001 - per-cell isolation is the contract
            return EvalReport(
                method="sweep",
                auprc=float("nan"),
                ceil_dice=float("nan"),
                best_threshold=float("nan"),
                meta={"w": w, "l_fraction": frac, "L": ""},
                error=f"{type(exc).__name__}: {exc}",
            )

    if workers <= 1:
        return [run_cell(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, cells))


def ablation_suite(
    images: np.ndarray,
    masks: np.ndarray,
    predictors: dict[str, PredictFn],
    configs: dict[str, SamplerConfig],
    sched: NoiseSchedule,
    seed: int | None = None,
) -> list[EvalReport]:
    """The four-variant component study on identical data.

    ``predictors``/``configs`` must cover every name in ABLATION_VARIANTS:
    plain conditional decoding, then adding implicit guidance, attention
    conditioning and dynamic normalization.
    """
    missing = [v for v in ABLATION_VARIANTS if v not in predictors or v not in configs]
    if missing:
        raise ValueError(f"missing ablation variants: {missing}")
    reports = []
    for name in ABLATION_VARIANTS:
        reports.append(
            evaluate_counterfactual(
                images, masks, configs[name], predictors[name], sched, method=name, seed=seed
            )
        )
    return reports


def reports_to_csv(reports: list[EvalReport], path: str | Path):
    lines = [",".join(CSV_FIELDS)]
    for report in reports:
        row = report.csv_row()
        lines.append(",".join(row.get(f, "") for f in CSV_FIELDS))
    atomic_write_text(path, "\n".join(lines) + "\n")


def summary_table(reports: list[EvalReport]) -> str:
    width = max(len(r.method) for r in reports) + 2
    lines = [f"{'method':<{width}} {'w':>5} {'L':>4} {'auprc':>8} {'ceil_dice':>10}"]
    for r in reports:
        if r.error:
            lines.append(f"{r.method:<{width}} failed: {r.error}")
        else:
            w = str(r.meta.get("w", ""))
            L = str(r.meta.get("L", ""))
            lines.append(f"{r.method:<{width}} {w:>5} {L:>4} {r.auprc:>8.4f} {r.ceil_dice:>10.4f}")
    return "\n".join(lines)
