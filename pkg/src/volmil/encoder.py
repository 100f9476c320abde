"""Patch-to-feature encoders and the adapter forward math.

Encoders map a normalized patch to a fixed-length descriptor h. Three analytic
built-ins are provided (pooled grid averages, intensity/shape moments, seeded
random projection) plus import of externally computed feature bags. The
trainable adapter z = GeLU(W_enc h + b_enc) lives here as pure forward math;
its parameters are owned and trained by the MIL module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special

from .parallel import indexed_map
from .preprocess import PatchGrid, ResolvedNorm, extract_patch
from .store import FeatureBag, Volume, read_feature_bag

ENCODER_KINDS = ("pooled_downsample", "moments", "random_projection", "external")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact form x * Phi(x) via the error function (not the tanh fit)."""
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + special.erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    phi = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + special.erf(x / _SQRT2)) + x * phi


@dataclass
class EncoderSpec:
    kind: str = "moments"
    pool_shape: tuple[int, int, int] = (2, 4, 4)   # coarse grid for pooling kinds
    moment_order: int = 3                          # mean/std/skew at 3
    intensity_threshold: float = 0.5               # high-intensity cutoff in [0,1]
    projection_seed: int = 0
    K: int | None = None
    external_path: str | None = None

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "external":
            if self.external_path is None:
                raise ValueError("external encoder requires external_path")
            return
        if self.moment_order < 1:
            raise ValueError("moment_order must be >= 1")
        derived = self._derived_dim()
        if self.K is None:
            self.K = derived
        elif derived is not None and self.K != derived:
            raise ValueError(f"K={self.K} conflicts with derived dim {derived}")
        if self.K is None or self.K < 1:
            raise ValueError("K must be >= 1")

    def _derived_dim(self) -> int | None:
        if self.kind == "pooled_downsample":
            return 3 * int(np.prod(self.pool_shape))
        if self.kind == "moments":
            return 3 * self.moment_order + 4
        return self.K  # random_projection: K is free


def replicate_channels(patch: np.ndarray) -> np.ndarray:
    """Emulate a 3-channel input: 1 channel is tripled, 2 channels become
    (ch1, ch1, ch2), 3 channels pass through."""
    if patch.ndim != 4:
        raise ValueError("patch must be (L, d, h, w)")
    L = patch.shape[0]
    if L == 3:
        return patch
    if L == 1:
        return np.repeat(patch, 3, axis=0)
    if L == 2:
        return np.stack([patch[0], patch[0], patch[1]])
    raise ValueError(f"cannot replicate {L} channels to 3")


def adaptive_avg_pool(x: np.ndarray, out_shape: tuple[int, int, int]) -> np.ndarray:
    """Average pooling with bin edges floor(i*n/m)..ceil((i+1)*n/m): output
    size is fixed regardless of input size."""
    c, d, h, w = x.shape
    od, oh, ow = out_shape
    out = np.empty((c, od, oh, ow), dtype=np.float64)

    def edges(n: int, m: int, i: int) -> tuple[int, int]:
        return (i * n) // m, -((-(i + 1) * n) // m)

    for i in range(od):
        d0, d1 = edges(d, od, i)
        for j in range(oh):
            h0, h1 = edges(h, oh, j)
            for k in range(ow):
                w0, w1 = edges(w, ow, k)
                out[:, i, j, k] = x[:, d0:d1, h0:h1, w0:w1].mean(axis=(1, 2, 3))
    return out


def _moment_features(patch3: np.ndarray, order: int, threshold: float) -> np.ndarray:
    feats: list[float] = []
    for c in range(3):
        # moments of the foreground intensity distribution; restricting to
        # bright voxels keeps these features about intensity, not about how
        # much foreground the patch happens to contain
        vals = patch3[c].ravel()
        vals = vals[vals > threshold]
        if vals.size == 0:
            feats.extend([0.0] * order)
            continue
        mean = float(vals.mean())
        sd = float(vals.std())
        feats.append(mean)
        if order >= 2:
            feats.append(sd)
        if order >= 3:
            feats.append(float(((vals - mean) ** 3).mean() / sd**3) if sd > 1e-12 else 0.0)
        for k in range(4, order + 1):
            feats.append(float(((vals - mean) ** k).mean() / sd**k) if sd > 1e-12 else 0.0)

    # shape descriptor from the largest connected bright region of the mean
    # channel: sorted trace-normalized covariance eigenvalues expose
    # eccentricity regardless of axis or absolute size; restricting to one
    # connected component keeps unrelated neighbours in the same patch from
    # blending into a spurious elongated signature
    intensity = patch3.mean(axis=0)
    fg = intensity > threshold
    coords = np.zeros((0, 3))
    if fg.any():
        labels, n_cc = ndimage.label(fg, structure=np.ones((3, 3, 3), dtype=bool))
        sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, n_cc + 1))
        coords = np.argwhere(labels == 1 + int(np.argmax(sizes))).astype(np.float64)
    if len(coords) >= 2:
        cov = np.cov(coords.T)
        cov = np.atleast_2d(cov)
        eig = np.linalg.eigvalsh(cov)[::-1]          # descending
        eig = np.clip(eig, 0.0, None)
        trace = float(eig.sum())
        norm_eig = eig / trace if trace > 0 else np.zeros(3)
        anisotropy = 1.0 - (eig[-1] / eig[0]) if eig[0] > 0 else 0.0
        feats.extend([*norm_eig.tolist(), anisotropy])
    else:
        feats.extend([0.0] * 4)
    return np.array(feats, dtype=np.float64)


_projection_cache: dict[tuple[int, int, int], np.ndarray] = {}


def _projection_matrix(seed: int, n_in: int, k: int) -> np.ndarray:
    key = (seed, n_in, k)
    if key not in _projection_cache:
        rng = np.random.default_rng(seed)
        _projection_cache[key] = rng.standard_normal((k, n_in)) / math.sqrt(k)
    return _projection_cache[key]


def encode_patch(patch: np.ndarray, spec: EncoderSpec) -> np.ndarray:
    """Fixed-length descriptor for one normalized patch."""
    if spec.kind == "external":
        raise ValueError("external features are imported, not encoded per patch")
    p3 = replicate_channels(np.asarray(patch, dtype=np.float64))
    if spec.kind == "pooled_downsample":
        h = adaptive_avg_pool(p3, spec.pool_shape).ravel()
    elif spec.kind == "moments":
        h = _moment_features(p3, spec.moment_order, spec.intensity_threshold)
    elif spec.kind == "random_projection":
        pooled = adaptive_avg_pool(p3, spec.pool_shape).ravel()
        h = _projection_matrix(spec.projection_seed, pooled.size, spec.K) @ pooled
    else:  # pragma: no cover
        raise ValueError(spec.kind)
    if h.shape != (spec.K,):
        raise ValueError(f"encoder produced {h.shape}, expected ({spec.K},)")
    return h


@dataclass
class AdapterParams:
    W_enc: np.ndarray    # (256, K)
    b_enc: np.ndarray    # (256,)

    def __post_init__(self):
        self.W_enc = np.asarray(self.W_enc, dtype=np.float64)
        self.b_enc = np.asarray(self.b_enc, dtype=np.float64)
        if self.W_enc.ndim != 2 or self.b_enc.shape != (self.W_enc.shape[0],):
            raise ValueError("adapter shapes inconsistent")
        if not (np.isfinite(self.W_enc).all() and np.isfinite(self.b_enc).all()):
            raise ValueError("adapter parameters must be finite")


def adapter_forward(h: np.ndarray, a: AdapterParams) -> np.ndarray:
    """z = GeLU(W_enc h + b_enc). Accepts a single vector or a (J, K) stack."""
    h = np.asarray(h, dtype=np.float64)
    z = gelu(h @ a.W_enc.T + a.b_enc)
    if not np.isfinite(z).all():
        raise FloatingPointError("adapter produced non-finite values")
    return z


def encode_bag(v: Volume, grid: PatchGrid, spec: EncoderSpec, norm: ResolvedNorm,
               sample_id: str, adapter: AdapterParams | None = None,
               workers: int = 1) -> FeatureBag:
    """Encode every grid entry, preserving grid order, into a feature bag."""
    if spec.kind == "external":
        return load_external_bag(spec.external_path, expected_k=None)
    shape = grid.patch_shape

    def one(entry):
        patch = extract_patch(v, entry, shape, norm)
        return encode_patch(patch, spec)

    rows = indexed_map(one, [tuple(e) for e in grid.entries], workers=workers)
    feats = np.array(rows, dtype=np.float64).reshape(len(grid), spec.K)
    if adapter is not None:
        feats = adapter_forward(feats, adapter)
    coords = np.empty((len(grid), 6), dtype=np.uint32)
    coords[:, :3] = grid.entries
    coords[:, 3:] = shape
    return FeatureBag(sample_id=sample_id,
                      features=feats.astype(np.float32),
                      coords=coords)


def load_external_bag(path, expected_k: int | None = None) -> FeatureBag:
    bag = read_feature_bag(path)
    if expected_k is not None and bag.features.shape[1] != expected_k:
        raise ValueError(
            f"external bag has K={bag.features.shape[1]}, expected {expected_k}")
    return bag
