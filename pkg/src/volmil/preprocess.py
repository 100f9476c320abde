"""Tissue segmentation and 2D/3D patch grids.

The volume is treated as a stack of planes. Planes that are mostly air are
dropped, the rest are median-blurred, thresholded, and cleaned into per-plane
tissue masks. Patch grids then tile either every kept plane (2D mode) or
replicate in-plane tiles along depth from the largest-tissue reference plane
(3D cuboid mode).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .store import Volume


@dataclass
class SegParams:
    air_mean_threshold: float = 1.0
    median_kernel: int = 3          # odd, voxels
    binarize_threshold: float = 0.0
    min_tissue_area: int = 1        # voxels per plane
    closing_radius: int = 0         # >0 bridges sparse structures into one region
    otsu: bool = False              # automatic threshold instead of the fixed one

    def __post_init__(self):
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError("median_kernel must be odd and >= 1")


@dataclass
class MaskStack:
    """Per-plane binary tissue masks aligned to the source volume."""

    mask: np.ndarray                 # (D, H, W) bool
    areas: np.ndarray                # (D,) tissue voxels per plane
    kept_planes: list[int]

    def __post_init__(self):
        if self.mask.ndim != 3:
            raise ValueError("mask must be (D, H, W)")
        self.kept_planes = sorted(self.kept_planes)

    @property
    def empty(self) -> bool:
        return not self.kept_planes

    def reference_plane(self) -> int:
        """Largest plane by tissue area; ties broken by lowest index."""
        if self.empty:
            raise ValueError("no kept planes: segmentation found no tissue")
        best = self.kept_planes[0]
        for d in self.kept_planes:
            if self.areas[d] > self.areas[best]:
                best = d
        return best


@dataclass
class PatchGrid:
    mode: str                                 # "planes2d" | "cuboids3d"
    patch_shape: tuple[int, int, int]         # (d, h, w); d == 1 in 2D mode
    overlaps: tuple[int, int, int] = (0, 0, 0)
    reference_plane: int | None = None
    entries: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.int64).reshape(-1, 3)
        if self.mode not in ("planes2d", "cuboids3d"):
            raise ValueError(f"unknown grid mode {self.mode!r}")

    def __len__(self) -> int:
        return len(self.entries)


def _otsu_threshold(values: np.ndarray) -> float:
    hist, edges = np.histogram(values, bins=256)
    mids = (edges[:-1] + edges[1:]) / 2
    total = hist.sum()
    if total == 0:
        return 0.0
    w0 = np.cumsum(hist)
    w1 = total - w0
    sum_all = (hist * mids).sum()
    sum0 = np.cumsum(hist * mids)
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return float(mids[0])
    mu0 = np.where(valid, sum0 / np.maximum(w0, 1), 0)
    mu1 = np.where(valid, (sum_all - sum0) / np.maximum(w1, 1), 0)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1)
    return float(mids[int(np.argmax(between))])


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    return (y * y + x * x) <= r * r


def segment_volume(v: Volume, p: SegParams) -> MaskStack:
    """Per-plane tissue masks. An all-air volume yields an empty kept set
    rather than an error."""
    intensity = v.intensity()
    d_planes = intensity.shape[0]
    mask = np.zeros(intensity.shape, dtype=bool)
    areas = np.zeros(d_planes, dtype=np.int64)

    plane_means = intensity.mean(axis=(1, 2))
    candidates = np.nonzero(plane_means >= p.air_mean_threshold)[0]

    structure = _disk(p.closing_radius) if p.closing_radius > 0 else None
    for d in candidates:
        plane = ndimage.median_filter(intensity[d], size=p.median_kernel)
        threshold = _otsu_threshold(plane.ravel()) if p.otsu else p.binarize_threshold
        binary = plane > threshold
        if structure is not None:
            binary = ndimage.binary_closing(binary, structure=structure)
        binary = ndimage.binary_fill_holes(binary)
        mask[d] = binary
        areas[d] = int(binary.sum())

    kept = [int(d) for d in candidates if areas[d] >= p.min_tissue_area]
    for d in range(d_planes):
        if d not in set(kept):
            mask[d] = False
            areas[d] = 0
    return MaskStack(mask=mask, areas=areas, kept_planes=kept)


def _tile_origins(lo: int, hi: int, size: int, step: int, bound: int) -> list[int]:
    # tiles laid from the bounding-box start; if the box is narrower than one
    # patch, fall back to a single in-bounds tile anchored at the box
    if hi - lo >= size:
        return list(range(lo, hi - size + 1, step))
    return [min(lo, bound - size)] if bound >= size else []


def build_patch_grid(m: MaskStack, mode: str, patch_shape: tuple[int, int, int],
                     overlaps: tuple[int, int, int] = (0, 0, 0),
                     planes: list[int] | None = None) -> PatchGrid:
    """Tessellate the masked volume.

    2D mode: non-overlapping tiles over each kept plane's tissue bounding box;
    tiles without any tissue are dropped. ``planes`` restricts to a subset of
    kept planes (single-plane experiments).

    3D mode: in-plane tile coordinates are computed once on the reference
    plane and replicated at depth steps of (d - depth_overlap) in both
    directions from it; cuboids whose extent is more than 50% background (by
    mask occupancy) are removed.
    """
    pd, ph, pw = patch_shape
    d_dim, h_dim, w_dim = m.mask.shape
    if pd > d_dim or ph > h_dim or pw > w_dim:
        raise ValueError(f"patch shape {patch_shape} exceeds volume dims {m.mask.shape}")

    if mode == "planes2d":
        if pd != 1:
            raise ValueError("2D grids require patch depth 1")
        use = m.kept_planes if planes is None else [d for d in planes if d in m.kept_planes]
        entries = []
        for d in use:
            plane = m.mask[d]
            rows = np.nonzero(plane.any(axis=1))[0]
            cols = np.nonzero(plane.any(axis=0))[0]
            if rows.size == 0:
                continue
            for h0 in _tile_origins(int(rows[0]), int(rows[-1]) + 1, ph, ph, h_dim):
                for w0 in _tile_origins(int(cols[0]), int(cols[-1]) + 1, pw, pw, w_dim):
                    if plane[h0:h0 + ph, w0:w0 + pw].any():
                        entries.append((d, h0, w0))
        return PatchGrid(mode=mode, patch_shape=patch_shape, overlaps=(0, 0, 0),
                         entries=np.array(entries, dtype=np.int64).reshape(-1, 3))

    if mode == "cuboids3d":
        ref = m.reference_plane()
        plane = m.mask[ref]
        rows = np.nonzero(plane.any(axis=1))[0]
        cols = np.nonzero(plane.any(axis=0))[0]
        if rows.size == 0:
            raise ValueError("reference plane has no tissue")
        step_h = ph - overlaps[1]
        step_w = pw - overlaps[2]
        if step_h <= 0 or step_w <= 0:
            raise ValueError("in-plane overlaps must be smaller than the patch")
        inplane = []
        for h0 in _tile_origins(int(rows[0]), int(rows[-1]) + 1, ph, step_h, h_dim):
            for w0 in _tile_origins(int(cols[0]), int(cols[-1]) + 1, pw, step_w, w_dim):
                if plane[h0:h0 + ph, w0:w0 + pw].any():
                    inplane.append((h0, w0))

        step_d = pd - overlaps[0]
        if step_d <= 0:
            raise ValueError("depth overlap must be smaller than the patch depth")
        k_lo = int(np.ceil(-ref / step_d))
        k_hi = int(np.floor((d_dim - pd - ref) / step_d))
        depths = [ref + k * step_d for k in range(k_lo, k_hi + 1)]

        entries = []
        for d0 in depths:
            for h0, w0 in inplane:
                block = m.mask[d0:d0 + pd, h0:h0 + ph, w0:w0 + pw]
                # removal rule is "more than half background", so exactly half
                # tissue stays in
                if block.mean() >= 0.5:
                    entries.append((d0, h0, w0))
        return PatchGrid(mode=mode, patch_shape=patch_shape, overlaps=overlaps,
                         reference_plane=ref,
                         entries=np.array(entries, dtype=np.int64).reshape(-1, 3))

    raise ValueError(f"unknown grid mode {mode!r}")


def tissue_fraction(m: MaskStack, entry, patch_shape: tuple[int, int, int]) -> float:
    d0, h0, w0 = (int(x) for x in entry)
    pd, ph, pw = patch_shape
    return float(m.mask[d0:d0 + pd, h0:h0 + ph, w0:w0 + pw].mean())


# ---------------------------------------------------------------------------
# Normalization

@dataclass
class NormParams:
    lower_clip: float = 0.0
    upper_clip: float | None = None      # absolute; None -> use percentile
    upper_top_percent: float | None = 1.0  # top-k% of volume intensities
    invert: bool = False

    def __post_init__(self):
        if self.upper_clip is None and self.upper_top_percent is None:
            raise ValueError("either upper_clip or upper_top_percent must be set")
        if self.upper_top_percent is not None and not 0 < self.upper_top_percent < 100:
            raise ValueError("upper_top_percent must be in (0, 100)")


@dataclass
class ResolvedNorm:
    lower: float
    upper: float
    invert: bool
    degenerate: bool = False


def resolve_norm(v: Volume, n: NormParams) -> ResolvedNorm:
    """Resolve the upper clip from the volume when configured as a percentile.
    A degenerate window (all voxels equal) maps everything to zero."""
    lower = float(n.lower_clip)
    if n.upper_clip is not None:
        upper = float(n.upper_clip)
    else:
        upper = float(np.percentile(v.data, 100.0 - n.upper_top_percent))
    if upper <= lower:
        warnings.warn(f"degenerate clip window [{lower}, {upper}]; patches will be zero")
        return ResolvedNorm(lower=lower, upper=upper, invert=n.invert, degenerate=True)
    return ResolvedNorm(lower=lower, upper=upper, invert=n.invert)


def extract_patch(v: Volume, entry, patch_shape: tuple[int, int, int],
                  n: ResolvedNorm) -> np.ndarray:
    """Dense (L, d, h, w) float64 patch clipped and mapped to [0, 1]."""
    d0, h0, w0 = (int(x) for x in entry)
    pd, ph, pw = patch_shape
    raw = v.data[:, d0:d0 + pd, h0:h0 + ph, w0:w0 + pw].astype(np.float64)
    if n.degenerate:
        return np.zeros_like(raw)
    x = np.clip(raw, n.lower, n.upper)
    x = (x - n.lower) / (n.upper - n.lower)
    return 1.0 - x if n.invert else x


# ---------------------------------------------------------------------------
# Patch-level augmentations (applied before encoding when training straight
# from volumes; the analytic encoders are flip-invariant, so these mainly
# matter for external encoders)

def rotate_patch(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random axis-aligned in-plane rotation (quarter turns in h, w)."""
    k = int(rng.integers(0, 4))
    return np.rot90(patch, k=k, axes=(2, 3)) if k else patch


def jitter_intensity(patch: np.ndarray, rng: np.random.Generator,
                     magnitude: float = 0.05) -> np.ndarray:
    """Multiplicative intensity jitter, +/- magnitude, clipped back to [0, 1]."""
    factor = 1.0 + rng.uniform(-magnitude, magnitude)
    return np.clip(patch * factor, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Grid serialization (delimited text for auditability)

def write_patch_grid(g: PatchGrid, path) -> None:
    lines = [
        f"mode\t{g.mode}",
        f"patch_shape\t{g.patch_shape[0]}\t{g.patch_shape[1]}\t{g.patch_shape[2]}",
        f"overlaps\t{g.overlaps[0]}\t{g.overlaps[1]}\t{g.overlaps[2]}",
        f"reference_plane\t{'' if g.reference_plane is None else g.reference_plane}",
        "origins",
    ]
    for d, h, w in g.entries:
        lines.append(f"{d}\t{h}\t{w}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_patch_grid(path) -> PatchGrid:
    lines = Path(path).read_text().strip().split("\n")
    fields = {}
    origins: list[tuple[int, int, int]] = []
    in_origins = False
    for ln in lines:
        if ln == "origins":
            in_origins = True
            continue
        parts = ln.split("\t")
        if in_origins:
            origins.append((int(parts[0]), int(parts[1]), int(parts[2])))
        else:
            fields[parts[0]] = parts[1:]
    ref = fields["reference_plane"][0] if fields["reference_plane"] else None
    return PatchGrid(
        mode=fields["mode"][0],
        patch_shape=tuple(int(x) for x in fields["patch_shape"]),
        overlaps=tuple(int(x) for x in fields["overlaps"]),
        reference_plane=int(ref) if ref else None,
        entries=np.array(origins, dtype=np.int64).reshape(-1, 3),
    )
