"""Pixel-level localization metrics: AUPRC, Dice and the oracle-threshold Dice.

AUPRC integrates the exact step-wise precision-recall curve over descending
unique score thresholds with ties grouped. The ceiling Dice pools pixels over
the whole test set, sweeps every achievable binarization (all distinct
heatmap values plus 0) with one global threshold, and reports the best.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


def _flat_pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"{what}: length mismatch {a.size} vs {b.size}")
    return a, b


def auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the pixel-level precision-recall curve.

    Thresholds are the unique score values in descending order; tied scores
    enter together. The area is the step integral sum((R_k - R_{k-1}) * P_k)
    starting from recall 0 with no extrapolated precision.
    """
    scores, labels = _flat_pair(scores, labels, "auprc")
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("auprc: no positive labels")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    # indices (1-based counts) where a tie group ends
    boundary = np.nonzero(np.diff(s_sorted))[0] + 1
    ks = np.append(boundary, s_sorted.size)
    tp = np.cumsum(l_sorted)[ks - 1].astype(np.float64)
    recall = tp / n_pos
    precision = tp / ks
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap 2|P&G| / (|P| + |G|); two empty masks count as 1.0."""
    pred, gt = _flat_pair(pred, gt, "dice")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def _pool(heatmaps: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if len(heatmaps) == 0 or len(heatmaps) != len(gts):
        raise ValueError("need equally many nonempty heatmap and ground-truth collections")
    vals = np.concatenate([np.asarray(h, dtype=np.float64).ravel() for h in heatmaps])
    gt = np.concatenate([np.asarray(g).astype(bool).ravel() for g in gts])
    if vals.shape != gt.shape:
        raise ValueError("pooled heatmap and ground-truth sizes differ")
    return vals, gt


def ceil_dice(heatmaps: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> tuple[float, float]:
    """Best test-set-wide Dice over one global binarization threshold.

    Pixels are pooled across the whole collection; candidate thresholds are
    every distinct heatmap value plus 0, which covers every mask achievable
    as ``heatmap > threshold`` with a nonnegative threshold. Returns
    (best dice, threshold attaining it).
    """
    vals, gt = _pool(heatmaps, gts)
    n_pos = int(gt.sum())
    order = np.argsort(-vals, kind="stable")
    v_sorted = vals[order]
    tp_cum = np.concatenate([[0], np.cumsum(gt[order])])
    thresholds = np.unique(np.concatenate([vals, [0.0]]))
    # prefix size for v > th, via descending-sorted values
    ks = np.searchsorted(-v_sorted, -thresholds, side="left")
    with np.errstate(invalid="ignore"):
        dices = np.where(ks + n_pos > 0, 2.0 * tp_cum[ks] / (ks + n_pos), 1.0)
    best = int(np.argmax(dices))
    return float(dices[best]), float(thresholds[best])


def ceil_dice_per_image(heatmaps: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    """Mean over images of the per-image best Dice (comparison mode only).

    The reported metric pools pixels with one global threshold; this variant
    sweeps each image separately and is exposed for comparison.
    """
    if len(heatmaps) == 0 or len(heatmaps) != len(gts):
        raise ValueError("need equally many nonempty heatmap and ground-truth collections")
    return float(np.mean([ceil_dice([h], [g])[0] for h, g in zip(heatmaps, gts)]))


def dice_threshold_curve(
    heatmaps: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    resolution: float = 0.005,
) -> tuple[np.ndarray, np.ndarray]:
    """Pooled Dice sampled at quantile thresholds, for reporting.

    The quantile grid (plus 0 and the max value) is diagnostic only; ceil_dice
    itself sweeps every distinct value.
    """
    if not 0.0 < resolution <= 1.0:
        raise ValueError("resolution must lie in (0, 1]")
    vals, gt = _pool(heatmaps, gts)
    n_pos = int(gt.sum())
    qs = np.quantile(vals, np.linspace(0.0, 1.0, round(1.0 / resolution) + 1))
    thresholds = np.unique(np.concatenate([qs, [0.0, vals.max()]]))
    order = np.argsort(-vals, kind="stable")
    v_sorted = vals[order]
    tp_cum = np.concatenate([[0], np.cumsum(gt[order])])
    ks = np.searchsorted(-v_sorted, -thresholds, side="left")
    with np.errstate(invalid="ignore"):
        dices = np.where(ks + n_pos > 0, 2.0 * tp_cum[ks] / (ks + n_pos), 1.0)
    return thresholds, dices


def threshold_baseline(image: np.ndarray) -> np.ndarray:
    """Hyper-intensity anomaly score: the lesion-salient channel used as-is.

    Channel 0 plays the FLAIR role in the synthetic corpus, so its intensity
    is the whole heatmap.
    """
    image = np.asarray(image)
    if image.ndim == 3:
        return image[0:1].copy()
    if image.ndim == 4:
        return image[:, 0:1].copy()
    raise ValueError(f"expected [B, M, H, W] or [M, H, W], got shape {image.shape}")
