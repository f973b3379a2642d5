"""Deterministic synthetic corpus of two-channel brain-like slices.

Each slice is a smooth elliptical "brain" on a zero background. Unhealthy
slices carry 1-3 soft-edged lesion disks with a strong channel-0 and weak
channel-1 intensity shift plus a mild radial displacement of the surrounding
texture. A configurable fraction of healthy slices gets a bright rim arc so
that raw hyper-intensity is an imperfect lesion cue. Every slice is rendered
from its own random stream derived from (seed, patient index), so generation
order does not matter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .conditions import Condition

_PLACEMENT_RETRIES = 50


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    train_count: int = 384
    val_count: int = 64
    test_count: int = 128
    size: int = 32
    lesion_prob: float = 0.5
    lesion_radius: tuple[float, float] = (3.0, 5.2)
    lesion_shift: tuple[tuple[float, float], tuple[float, float]] = ((0.12, 0.38), (0.12, 0.22))
    ellipse_axes: tuple[tuple[float, float], tuple[float, float]] = ((9.5, 12.5), (8.5, 11.5))
    texture_amp: float = 0.09
    confounder_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if min(self.train_count, self.val_count, self.test_count) <= 0:
            raise ValueError("split counts must be positive")
        if not 0.0 <= self.lesion_prob <= 1.0:
            raise ValueError("lesion probability must lie in [0, 1]")
        if not 0.0 <= self.confounder_prob <= 1.0:
            raise ValueError("confounder probability must lie in [0, 1]")
        if self.lesion_radius[0] < 1.0:
            raise ValueError("lesion radius must be >= 1 pixel")
        if self.size < 16:
            raise ValueError("slice size must be >= 16")

    @property
    def split_counts(self) -> dict[str, int]:
        return {"train": self.train_count, "val": self.val_count, "test": self.test_count}


@dataclass
class LabelledSlice:
    image: np.ndarray  # float32 [2, H, W], normalized intensities
    mask: np.ndarray  # uint8 [H, W]
    label: Condition
    patient_id: str
    split: str


def slice_label(mask: np.ndarray) -> Condition:
    """Unhealthy iff the mask contains at least one positive pixel."""
    return Condition.UNHEALTHY if np.any(np.asarray(mask) > 0) else Condition.HEALTHY


def normalize_scan(
    image: np.ndarray,
    foreground: np.ndarray,
    reference: np.ndarray | None = None,
) -> np.ndarray:
    """Rescale each channel by its 99th-percentile foreground intensity.

    The percentile is taken from ``reference`` when given (the generator
    passes the paired lesion-free render, standing in for the scan-level
    statistic a whole volume would provide) and from the image itself
    otherwise. The result is clipped to [0, 1.5]; mapping into the model's
    [-1, 1] happens downstream. Scale-invariant by construction.
    """
    image = np.asarray(image, dtype=np.float64)
    foreground = np.asarray(foreground).astype(bool)
    ref = image if reference is None else np.asarray(reference, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected [M, H, W], got shape {image.shape}")
    if ref.shape != image.shape:
        raise ValueError("reference shape must match the image")
    if foreground.shape != image.shape[1:]:
        raise ValueError("foreground mask shape must match the spatial dims")
    if not foreground.any():
        raise ValueError("normalize_scan: empty foreground")
    out = np.empty_like(image)
    for m in range(image.shape[0]):
        p = np.percentile(ref[m][foreground], 99)
        if p <= 0:
            raise ValueError(f"normalize_scan: nonpositive 99th percentile in channel {m}")
        out[m] = image[m] / p
    return np.clip(out, 0.0, 1.5)


def _slice_rng(seed: int, patient_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, patient_index))))


def _bilinear_field(low: np.ndarray, size: int) -> "_Field":
    return _Field(low, size)


class _Field:
    """Low-resolution noise grid sampled bilinearly at float coordinates."""

    def __init__(self, low: np.ndarray, size: int):
        self.low = low
        self.scale = (low.shape[0] - 1) / (size - 1)

    def sample(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        n = self.low.shape[0] - 1
        fy = np.clip(ys * self.scale, 0.0, n)
        fx = np.clip(xs * self.scale, 0.0, n)
        y0 = np.minimum(fy.astype(int), n - 1)
        x0 = np.minimum(fx.astype(int), n - 1)
        wy = fy - y0
        wx = fx - x0
        g = self.low
        return (
            g[y0, x0] * (1 - wy) * (1 - wx)
            + g[y0 + 1, x0] * wy * (1 - wx)
            + g[y0, x0 + 1] * (1 - wy) * wx
            + g[y0 + 1, x0 + 1] * wy * wx
        )


def _render(spec: CorpusSpec, rng: np.random.Generator, force_lesion: bool | None = None):
    """Render one raw (unnormalized) slice; returns (with, without, mask, fg).

    All randomness is drawn up front so the paired lesion-free render shares
    geometry, texture and confounders exactly.
    """
    n = spec.size
    cy, cx = n / 2 - 0.5 + rng.uniform(-1.5, 1.5, size=2)
    ax_y = rng.uniform(*spec.ellipse_axes[1])
    ax_x = rng.uniform(*spec.ellipse_axes[0])
    theta = rng.uniform(0.0, np.pi)
    base_levels = (0.50, 0.70)
    low = [rng.standard_normal((9, 9)) for _ in range(2)]

    lesion = rng.random() < spec.lesion_prob if force_lesion is None else force_lesion
    n_lesions = int(rng.choice([1, 2, 3], p=[0.6, 0.3, 0.1]))
    lesion_params = []
    for _ in range(n_lesions):
        lesion_params.append(
            dict(
                radius=rng.uniform(*spec.lesion_radius),
                shift=(rng.uniform(*spec.lesion_shift[0]), rng.uniform(*spec.lesion_shift[1])),
                warp=rng.uniform(0.8, 1.8),
                u=rng.random(size=(_PLACEMENT_RETRIES, 2)),
            )
        )
    confounder = rng.random() < spec.confounder_prob
    conf_params = [
        dict(
            angle=rng.uniform(0.0, 2 * np.pi),
            width=rng.uniform(1.0, 2.0),
            radius=rng.uniform(0.76, 0.90),
            shift=(rng.uniform(0.25, 0.55), rng.uniform(0.0, 0.06)),
        )
        for _ in range(int(rng.integers(2, 5)))
    ]
    # small hyper-intense dots: lesion-bright in channel 0 but tiny and
    # without the channel-1 co-elevation
    dot_params = [
        dict(
            radius=rng.uniform(0.9, 1.7),
            shift=(rng.uniform(0.16, 0.44), rng.uniform(0.0, 0.05)),
            u=rng.random(size=(_PLACEMENT_RETRIES, 2)),
        )
        for _ in range(int(rng.integers(2, 5)))
    ]

    ys, xs = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    ct, st = np.cos(theta), np.sin(theta)
    u = (xs - cx) * ct + (ys - cy) * st
    v = -(xs - cx) * st + (ys - cy) * ct
    re2 = (u / ax_x) ** 2 + (v / ax_y) ** 2
    fg = re2 <= 1.0
    if fg.sum() < 40:
        raise GenerationError("degenerate foreground ellipse")

    def elliptical_radius(py: float, px: float) -> float:
        uu = (px - cx) * ct + (py - cy) * st
        vv = -(px - cx) * st + (py - cy) * ct
        return float(np.sqrt((uu / ax_x) ** 2 + (vv / ax_y) ** 2))

    def place(params, what: str, ring: tuple[float, float]):
        placed = []
        for p in params:
            for ur, uphi in p["u"]:
                # most of the disk must fit; rim overhang is clipped to fg
                margin = 0.6 * p["radius"] / min(ax_x, ax_y)
                hi = min(ring[1], 0.98 - margin)
                if hi <= ring[0]:
                    continue
                r_e = ring[0] + ur * (hi - ring[0])
                phi = uphi * 2 * np.pi
                uu = r_e * ax_x * np.cos(phi)
                vv = r_e * ax_y * np.sin(phi)
                py = cy + uu * st + vv * ct
                px = cx + uu * ct - vv * st
                if elliptical_radius(py, px) + margin <= 0.98:
                    placed.append((py, px, p))
                    break
            else:
                raise GenerationError(f"{what} cannot fit inside the foreground")
        return placed

    # lesions favour the dimmer periphery so raw brightness alone stays an
    # ambiguous cue; dots sit anywhere in the interior
    centers = place(lesion_params, "lesion", (0.0, 0.75)) if lesion else []
    dot_centers = place(dot_params, "confounder dot", (0.0, 0.75)) if confounder else []

    # warped texture coordinates (deformation confound around each lesion)
    wys, wxs = ys.copy(), xs.copy()
    for py, px, p in centers:
        dy = ys - py
        dx = xs - px
        dist = np.sqrt(dy**2 + dx**2) + 1e-9
        push = p["warp"] * np.exp(-(dist**2) / (2 * (1.6 * p["radius"]) ** 2))
        wys -= push * dy / dist
        wxs -= push * dx / dist

    def compose(with_lesion: bool, with_confounder: bool) -> np.ndarray:
        img = np.zeros((2, n, n), dtype=np.float64)
        ty, tx = (wys, wxs) if with_lesion else (ys, xs)
        for m in range(2):
            tex = _bilinear_field(low[m], n).sample(ty, tx)
            chan = base_levels[m] * (1.0 - 0.30 * re2) + spec.texture_amp * tex
            img[m] = np.where(fg, np.clip(chan, 0.05, None), 0.0)
        if with_lesion:
            for py, px, p in centers:
                dist = np.sqrt((ys - py) ** 2 + (xs - px) ** 2)
                r = p["radius"]
                prof = np.clip((r + 1.0 - dist) / (0.45 * r + 1.0), 0.0, 1.0)
                for m in range(2):
                    img[m] += p["shift"][m] * prof * fg
        if with_confounder and confounder:
            ang = np.arctan2(v, u)
            for cp in conf_params:
                dang = np.abs((ang - cp["angle"] + np.pi) % (2 * np.pi) - np.pi)
                rim = np.exp(-((np.sqrt(re2) - cp["radius"]) ** 2) / (2 * 0.08**2))
                arc = rim * np.clip(1.0 - dang / cp["width"], 0.0, 1.0)
                for m in range(2):
                    img[m] += cp["shift"][m] * arc * fg
            for py, px, p in dot_centers:
                dist = np.sqrt((ys - py) ** 2 + (xs - px) ** 2)
                prof = np.clip(p["radius"] + 0.5 - dist, 0.0, 1.0)
                for m in range(2):
                    img[m] += p["shift"][m] * prof * fg
        return img

    mask = np.zeros((n, n), dtype=np.uint8)
    if lesion:
        for py, px, p in centers:
            dist = np.sqrt((ys - py) ** 2 + (xs - px) ** 2)
            mask |= (dist <= p["radius"]).astype(np.uint8)
        mask &= fg.astype(np.uint8)
    # the tissue-only render stands in for the scan-level normalization
    # statistic: neither lesion nor hyper-intense-but-healthy structures
    # should dominate the percentile
    observed = compose(lesion, True)
    paired_clean = compose(False, True)
    reference = compose(False, False)
    return observed, paired_clean, mask, fg, reference


def render_pair(spec: CorpusSpec, patient_index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw lesioned and lesion-free renders of the same patient, plus the mask."""
    rng = _slice_rng(spec.seed, patient_index)
    with_lesion, without, mask, _, _ = _render(spec, rng, force_lesion=True)
    return with_lesion, without, mask


def _patient_splits(spec: CorpusSpec) -> Iterator[tuple[str, int]]:
    idx = 0
    for split, count in spec.split_counts.items():
        for _ in range(count):
            yield split, idx
            idx += 1


def generate_slice(spec: CorpusSpec, split: str, patient_index: int) -> LabelledSlice:
    rng = _slice_rng(spec.seed, patient_index)
    raw, _, mask, fg, reference = _render(spec, rng)
    image = normalize_scan(raw, fg, reference=reference).astype(np.float32)
    return LabelledSlice(
        image=image,
        mask=mask,
        label=slice_label(mask),
        patient_id=f"p{patient_index:05d}",
        split=split,
    )


def generate_corpus(spec: CorpusSpec) -> dict[str, list[LabelledSlice]]:
    """Generate all splits; deterministic for a fixed spec."""
    corpus: dict[str, list[LabelledSlice]] = {name: [] for name in spec.split_counts}
    for split, idx in _patient_splits(spec):
        corpus[split].append(generate_slice(spec, split, idx))
    return corpus


def slices_to_arrays(slices: list[LabelledSlice]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a split into (images f32 [N,2,H,W], masks u8 [N,H,W], labels i64 [N])."""
    if not slices:
        raise ValueError("empty slice collection")
    images = np.stack([s.image for s in slices]).astype(np.float32)
    masks = np.stack([s.mask for s in slices]).astype(np.uint8)
    labels = np.array([int(s.label) for s in slices], dtype=np.int64)
    return images, masks, labels
