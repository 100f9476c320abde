"""Synthetic 3D cohorts of hollow spheroid cells.

Two morphological populations (near-spherical "normal" cells and stretched
"abnormal" cells of the same girth) are mixed in different proportions per
class. Because the stretch is along a random 3D axis, a single 2D plane
through the volume rarely reveals it: cross-sections of both cell types look
like rings of similar radius. That contrast is the reason this phantom
exists.

Generation is deterministic: each sample draws from its own RNG stream
derived from (seed, sample_index), so serial and parallel runs produce
identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .parallel import indexed_map
from .store import CohortManifest, ManifestRecord, Volume, write_manifest, write_volume


@dataclass
class CellTypeSpec:
    """One cell population: eccentricity and size are normal draws, clamped."""

    ecc_mean: float
    ecc_sd: float
    semi_major_mean: float      # voxels
    semi_major_sd: float
    shell_thickness: float = 3.0
    intensity_band: tuple[int, int] = (55000, 64000)  # uniform, near u16 max

    def __post_init__(self):
        if self.shell_thickness <= 0:
            raise ValueError("shell_thickness must be positive")


@dataclass
class ClassSpec:
    """Mixture of cell types populating each volume of one class."""

    mixture: dict[str, float]
    cells_per_volume: int
    volume_dims: tuple[int, int, int]  # (D, H, W)

    def __post_init__(self):
        total = sum(self.mixture.values())
        if any(f < 0 for f in self.mixture.values()) or abs(total - 1.0) > 1e-12:
            raise ValueError(f"mixture fractions must be >= 0 and sum to 1, got {total}")


@dataclass
class SurvivalSpec:
    """Cox-exponential survival times driven by per-class risk scores."""

    risk_by_class: dict[int, tuple[float, float]]  # label -> (mean, sd)
    baseline_hazard: float = 0.02                  # 1/months
    target_censor_fraction: float = 0.30

    def __post_init__(self):
        if self.baseline_hazard <= 0:
            raise ValueError("baseline_hazard must be positive")
        if not 0 <= self.target_censor_fraction < 1:
            raise ValueError("target_censor_fraction must be in [0, 1)")


@dataclass
class Spheroid:
    center: tuple[float, float, float]  # (d, h, w)
    semi_major: float
    semi_minor: float
    axis: tuple[float, float, float]    # unit vector, axis of symmetry
    shell_thickness: float
    intensity: int


def semi_minor(semi_major: float, eccentricity: float) -> float:
    return semi_major * math.sqrt(1.0 - eccentricity**2)


def default_cell_types(scale: float = 1.0) -> dict[str, CellTypeSpec]:
    """Normal/abnormal populations; ``scale`` shrinks cell sizes for desk runs.

    At scale 1 the normal population is N(0.25, 0.05^2) eccentricity with
    semi-major N(20, (10/3)^2), the abnormal one N(0.7, 0.05^2) with
    semi-major N(28, (10/3)^2), shells 3 voxels thick.
    """
    thickness = max(1.0, 3.0 * scale)
    return {
        "normal": CellTypeSpec(0.25, 0.05, 20.0 * scale, (10.0 / 3.0) * scale, thickness),
        "abnormal": CellTypeSpec(0.70, 0.05, 28.0 * scale, (10.0 / 3.0) * scale, thickness),
    }


def default_class_specs(dims: tuple[int, int, int] = (512, 1024, 1024),
                        cells_per_volume: int = 500) -> dict[int, ClassSpec]:
    """Class 0 mixes 90/10 normal/abnormal cells, class 1 mixes 66/34."""
    return {
        0: ClassSpec({"normal": 0.90, "abnormal": 0.10}, cells_per_volume, dims),
        1: ClassSpec({"normal": 0.66, "abnormal": 0.34}, cells_per_volume, dims),
    }


def sample_spheroid(spec: CellTypeSpec, dims: tuple[int, int, int],
                    rng: np.random.Generator) -> Spheroid:
    """Draw one cell: shape from the type parameters, orientation uniform on
    the sphere, center uniform within interior margins so the cell fits."""
    ecc = float(np.clip(rng.normal(spec.ecc_mean, spec.ecc_sd), 0.0, 0.99))
    a = float(max(rng.normal(spec.semi_major_mean, spec.semi_major_sd),
                  spec.shell_thickness + 1.0))
    b = semi_minor(a, ecc)

    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-9:
        axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)

    center = []
    for dim in dims:
        margin = min(a, (dim - 1) / 2.0)
        center.append(float(rng.uniform(margin, dim - 1 - margin)))

    lo, hi = spec.intensity_band
    intensity = int(rng.integers(lo, hi + 1))
    return Spheroid(tuple(center), a, b, tuple(axis), spec.shell_thickness, intensity)


def rasterize_spheroid(s: Spheroid, data: np.ndarray) -> np.ndarray:
    """Write the hollow shell of ``s`` into a (D, H, W) array in place.

    A voxel belongs to the shell when its center lies inside the outer
    spheroid (semi-axes a, b) but not inside the inner one (a - t, b - t);
    when an inner semi-axis would be non-positive the cell is solid. Voxels
    outside the array are skipped. Returns per-plane written-voxel counts
    (length D) for plane scoring.
    """
    dims = data.shape
    reach = s.semi_major
    lo = [max(0, int(math.floor(c - reach))) for c in s.center]
    hi = [min(dim, int(math.ceil(c + reach)) + 1) for c, dim in zip(s.center, dims)]
    counts = np.zeros(dims[0], dtype=np.int64)
    if any(l >= h for l, h in zip(lo, hi)):
        return counts

    dd, hh, ww = np.meshgrid(
        np.arange(lo[0], hi[0], dtype=np.float64) - s.center[0],
        np.arange(lo[1], hi[1], dtype=np.float64) - s.center[1],
        np.arange(lo[2], hi[2], dtype=np.float64) - s.center[2],
        indexing="ij",
    )
    axial = dd * s.axis[0] + hh * s.axis[1] + ww * s.axis[2]
    rad2 = dd**2 + hh**2 + ww**2 - axial**2
    np.clip(rad2, 0.0, None, out=rad2)

    outer = (axial / s.semi_major) ** 2 + rad2 / s.semi_minor**2 <= 1.0
    a_in = s.semi_major - s.shell_thickness
    b_in = s.semi_minor - s.shell_thickness
    if a_in > 0 and b_in > 0:
        inner = (axial / a_in) ** 2 + rad2 / b_in**2 < 1.0
        member = outer & ~inner
    else:
        member = outer

    block = data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    block[member] = s.intensity
    counts[lo[0]:hi[0]] = member.sum(axis=(1, 2))
    return counts


def _mixture_counts(mixture: dict[str, float], total: int) -> dict[str, int]:
    # deterministic proportions: floor then distribute remainders, largest first
    names = sorted(mixture)
    raw = {n: mixture[n] * total for n in names}
    counts = {n: int(math.floor(raw[n])) for n in names}
    short = total - sum(counts.values())
    remainders = sorted(names, key=lambda n: (-(raw[n] - counts[n]), n))
    for n in remainders[:short]:
        counts[n] += 1
    return counts


@dataclass
class GeneratedSample:
    sample_id: str
    label: int
    targeted_plane: int
    shell_counts_by_type: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def _generate_sample(sample_id: str, label: int, spec: ClassSpec,
                     cell_types: dict[str, CellTypeSpec], seed: int,
                     sample_index: int, out_dir: Path) -> GeneratedSample:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(sample_index,)))
    dims = spec.volume_dims
    data = np.zeros(dims, dtype=np.uint16)

    counts = _mixture_counts(spec.mixture, spec.cells_per_volume)
    order = [name for name, c in sorted(counts.items()) for _ in range(c)]
    rng.shuffle(order)

    per_type = {name: np.zeros(dims[0], dtype=np.int64) for name in counts}
    for name in order:
        cell = sample_spheroid(cell_types[name], dims, rng)
        per_type[name] += rasterize_spheroid(cell, data)

    volume = Volume(data=data[np.newaxis])
    write_volume(volume, out_dir / f"{sample_id}.vmil")

    # targeted plane: maximize the scarcer type's shell voxels, i.e. the plane
    # where every present cell type is visible at once
    present = [c for c in per_type.values() if c.sum() > 0]
    joint = np.minimum.reduce(present) if present else np.zeros(dims[0], dtype=np.int64)
    targeted = int(np.argmax(joint))
    return GeneratedSample(sample_id, label, targeted, per_type)


def generate_classification_cohort(class_specs: dict[int, ClassSpec],
                                   cell_types: dict[str, CellTypeSpec],
                                   n_per_class: int, seed: int, out_dir,
                                   workers: int = 1) -> CohortManifest:
    """Write ``n_per_class`` volumes per class plus manifest and plane scores."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for label, spec in class_specs.items():
        _check_dims_fit(spec, cell_types)

    jobs = []
    idx = 0
    for label in sorted(class_specs):
        for _ in range(n_per_class):
            jobs.append((f"s{idx:04d}", label, idx))
            idx += 1

    def run(job):
        sample_id, label, sample_index = job
        return _generate_sample(sample_id, label, class_specs[label], cell_types,
                                seed, sample_index, out_dir)

    samples = indexed_map(run, jobs, workers=workers)

    records = [ManifestRecord(s.sample_id, f"{s.sample_id}.vmil", label=s.label)
               for s in samples]
    manifest = CohortManifest(records=records)
    write_manifest(manifest, out_dir / "manifest.tsv")
    write_plane_scores({s.sample_id: s.targeted_plane for s in samples},
                       out_dir / "plane_scores.tsv")
    return manifest


def generate_survival_cohort(class_specs: dict[int, ClassSpec],
                             cell_types: dict[str, CellTypeSpec],
                             survival: SurvivalSpec, n_per_class: int, seed: int,
                             out_dir, workers: int = 1) -> CohortManifest:
    """Classification volumes plus Cox-exponential survival timestamps.

    Per sample, risk r is drawn from its class distribution and the survival
    time is t = -ln(U) / (hazard * exp(r)). A single cutoff at the empirical
    quantile of the generated times censors approximately the target fraction.
    """
    manifest = generate_classification_cohort(class_specs, cell_types, n_per_class,
                                              seed, out_dir, workers=workers)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xFA7E,)))
    n = len(manifest)
    risks = np.empty(n)
    for i, rec in enumerate(manifest.records):
        mean, sd = survival.risk_by_class[rec.label]
        risks[i] = rng.normal(mean, sd)
    u = rng.uniform(1e-12, 1.0, size=n)
    times = -np.log(u) / (survival.baseline_hazard * np.exp(risks))

    order = np.sort(times)
    keep = int(np.clip(round((1.0 - survival.target_censor_fraction) * n), 1, n))
    cutoff = order[keep - 1]

    records = []
    for rec, t in zip(manifest.records, times):
        observed = t <= cutoff
        records.append(ManifestRecord(rec.sample_id, rec.volume_path, label=rec.label,
                                      time=float(min(t, cutoff)),
                                      event=1 if observed else 0))
    manifest = CohortManifest(records=records)
    write_manifest(manifest, Path(out_dir) / "manifest.tsv")
    return manifest


def _check_dims_fit(spec: ClassSpec, cell_types: dict[str, CellTypeSpec]) -> None:
    largest = max(cell_types[name].semi_major_mean for name in spec.mixture)
    if min(spec.volume_dims) <= 2 * largest:
        raise ValueError(
            f"volume dims {spec.volume_dims} too small for cells with mean "
            f"semi-major {largest}"
        )


def write_plane_scores(targeted: dict[str, int], path) -> None:
    lines = ["sample_id\ttargeted_plane"]
    for sid in targeted:
        lines.append(f"{sid}\t{targeted[sid]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_plane_scores(path) -> dict[str, int]:
    lines = Path(path).read_text().strip().split("\n")
    out = {}
    for ln in lines[1:]:
        sid, plane = ln.split("\t")
        out[sid] = int(plane)
    return out
