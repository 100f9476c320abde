"""Integrated-gradients attribution over instance features, score
normalization, cohort grouping, and overlap-averaged heatmap volumes.

Attributions are taken at the instance-feature level: the attributed function
F maps the whole bag {h_j} to the predicted probability. The path integral
runs from the zero-feature baseline to the input along the straight line, with
all instances scaled jointly, and is discretized as a midpoint Riemann sum
with M steps:

    IG(h_j) = sum_k h_jk * (1/M) * sum_{m=1..M} dF({((m-1/2)/M) h_j}_j) / dh_jk

Midpoint nodes give an O(1/M^2) completeness gap; endpoint nodes would decay
only as O(1/M), which is too loose at the default step counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mil import MILModel, probability_input_gradient
from .preprocess import PatchGrid
from .store import FeatureBag, Volume

HEATMAP_SENTINEL = np.float32(np.nan)   # uncovered voxels; 0 is a real IG value


@dataclass
class IGResult:
    raw: np.ndarray            # (J,) per-instance attribution
    normalized: np.ndarray     # (J,) in [-1, 1], per-sign scaled
    M: int
    completeness_gap: float    # |sum(raw) - (F(x) - F(baseline))|
    value: float               # F(x)
    baseline_value: float      # F(0)


def integrate_fn(fn, X: np.ndarray, M: int):
    """Generic midpoint path integral for fn(X) -> (value, grad).

    Returns (per-row raw IG, F(X), F(0), completeness gap). The model-based
    entry point wraps this with the network's input-gradient pass; tests wrap
    it with linear maps where the sum rule is exact.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    grad_sum = np.zeros_like(X)
    for m in range(1, M + 1):
        _, g = fn(((m - 0.5) / M) * X)
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient along the IG path")
        grad_sum += g
    avg_grad = grad_sum / M
    raw = (X * avg_grad).sum(axis=tuple(range(1, X.ndim)))
    value, _ = fn(X)
    baseline, _ = fn(np.zeros_like(X))
    gap = abs(float(raw.sum()) - (value - baseline))
    return raw, float(value), float(baseline), gap


def integrated_gradients(model: MILModel, bag, M: int = 128) -> IGResult:
    """Per-instance attribution of the predicted probability."""
    H = bag.features.astype(np.float64) if isinstance(bag, FeatureBag) else \
        np.asarray(bag, dtype=np.float64)

    def fn(X):
        return probability_input_gradient(model, X)

    raw, value, baseline, gap = integrate_fn(fn, H, M)
    return IGResult(raw=raw, normalized=normalize_ig(raw), M=M,
                    completeness_gap=gap, value=value, baseline_value=baseline)


def normalize_ig(raw: np.ndarray) -> np.ndarray:
    """Scale negatives by max |negative| and positives by max positive so the
    sign and relative influence of a patch never flip."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("need at least one score")
    out = np.zeros_like(raw)
    neg = raw < 0
    pos = raw > 0
    if neg.any():
        out[neg] = raw[neg] / (-raw[neg].min())
    if pos.any():
        out[pos] = raw[pos] / raw[pos].max()
    return out


@dataclass
class IGGroups:
    labels: np.ndarray            # (N,) strings: high / middle / low / none
    high_threshold: float
    low_threshold: float
    middle_band: tuple[float, float]
    per_sample: list[dict] = field(default_factory=list)


def ig_group_assignment(scores_by_sample: list[np.ndarray]) -> IGGroups:
    """Pool scores across the cohort and mark the top decile (high), bottom
    decile (low), and the 10-percentile band centered on score 0 (middle).
    Emits per-sample group fractions and the high/low count ratio."""
    pooled = np.concatenate([np.asarray(s, dtype=np.float64).ravel()
                             for s in scores_by_sample])
    if pooled.size < 10:
        raise ValueError("need at least 10 instances cohort-wide")
    hi = float(np.quantile(pooled, 0.9))
    lo = float(np.quantile(pooled, 0.1))
    rank_of_zero = float(np.mean(pooled <= 0.0))
    band_lo = float(np.quantile(pooled, max(0.0, rank_of_zero - 0.05)))
    band_hi = float(np.quantile(pooled, min(1.0, rank_of_zero + 0.05)))

    def assign(s: np.ndarray) -> np.ndarray:
        lab = np.full(s.shape, "none", dtype=object)
        lab[(s >= band_lo) & (s <= band_hi)] = "middle"
        lab[s <= lo] = "low"
        lab[s >= hi] = "high"
        return lab

    labels = []
    per_sample = []
    for i, s in enumerate(scores_by_sample):
        s = np.asarray(s, dtype=np.float64).ravel()
        lab = assign(s)
        labels.append(lab)
        n_high = int((lab == "high").sum())
        n_low = int((lab == "low").sum())
        per_sample.append({
            "sample_index": i,
            "n_instances": int(s.size),
            "high_fraction": n_high / s.size,
            "low_fraction": n_low / s.size,
            "middle_fraction": float((lab == "middle").mean()),
            "high_low_ratio": n_high / n_low if n_low else float("inf"),
        })
    return IGGroups(labels=np.concatenate(labels), high_threshold=hi,
                    low_threshold=lo, middle_band=(band_lo, band_hi),
                    per_sample=per_sample)


@dataclass
class HeatmapVolume:
    values: np.ndarray     # (D, H, W) float32, NaN where uncovered
    coverage: np.ndarray   # (D, H, W) uint16 covering-patch counts

    def __post_init__(self):
        if self.values.shape != self.coverage.shape:
            raise ValueError("values and coverage shapes differ")


def heatmap_overlaps(patch_shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Default rendering overlaps: 50% along depth, 75% in plane."""
    d, h, w = patch_shape
    return (d // 2, (3 * h) // 4, (3 * w) // 4)


def build_heatmap(volume_shape: tuple[int, int, int], grid: PatchGrid,
                  raw_ig: np.ndarray) -> HeatmapVolume:
    """Average raw attributions of overlapping patches into voxels, then apply
    per-sign normalization volume-wide. Accumulation walks entries in grid
    order, so the result is independent of how the scores were produced."""
    raw_ig = np.asarray(raw_ig, dtype=np.float64)
    if len(raw_ig) != len(grid):
        raise ValueError("one attribution per grid entry required")
    sums = np.zeros(volume_shape, dtype=np.float64)
    counts = np.zeros(volume_shape, dtype=np.uint16)
    pd, ph, pw = grid.patch_shape
    for (d0, h0, w0), score in zip(grid.entries, raw_ig):
        sl = (slice(d0, d0 + pd), slice(h0, h0 + ph), slice(w0, w0 + pw))
        sums[sl] += score
        counts[sl] += 1
    covered = counts > 0
    values = np.full(volume_shape, HEATMAP_SENTINEL, dtype=np.float32)
    if covered.any():
        avg = sums[covered] / counts[covered]
        values[covered] = normalize_ig(avg).astype(np.float32)
    return HeatmapVolume(values=values, coverage=counts)


def heatmap_to_volume(h: HeatmapVolume, voxel_size=(1.0, 1.0, 1.0)) -> Volume:
    """Package the value grid as a single-channel f32 volume for storage."""
    return Volume(data=h.values[None, ...].astype(np.float32),
                  voxel_size=tuple(voxel_size))
