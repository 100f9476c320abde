"""How much signal survives each volume-sampling strategy?

The scientific core of the pipeline: the same cohort is encoded four ways and
cross-validated with identical training settings. Expected ranking, from most
to least informative,

    3D cuboids  >  all 2D planes  >  best single plane  >  random single plane

because full 3D context sees cell shape directly, many sections recover it
statistically, one well-chosen section sees only a slice of it, and one
random section is near chance. This is the pocket rehearsal of the full
desk-scale experiment in the acceptance tests.

    python3 demos/sampling_mode_comparison.py      (about two minutes)
"""

import tempfile
from pathlib import Path

import numpy as np

from volmil import (
    EncoderSpec,
    NormParams,
    SegParams,
    TrainConfig,
    build_patch_grid,
    cross_validate,
    default_cell_types,
    default_class_specs,
    encode_bag,
    generate_classification_cohort,
    read_manifest,
    read_volume,
    resolve_norm,
    segment_volume,
    stratified_splits,
)
from volmil.phantom import read_plane_scores

DIMS = (32, 128, 128)
CELLS = 128
N_PER_CLASS = 12
SEED = 0
FOLDS = 3

SEG = SegParams(air_mean_threshold=-1.0, binarize_threshold=-1.0,
                median_kernel=1, closing_radius=0, min_tissue_area=1)
NORM = NormParams(lower_clip=0.0, upper_clip=65535.0, upper_top_percent=None,
                  invert=False)


def main():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        print(f"simulating {2 * N_PER_CLASS} volumes of {DIMS} ...")
        generate_classification_cohort(default_class_specs(DIMS, CELLS),
                                       default_cell_types(0.125),
                                       N_PER_CLASS, SEED, root)
        manifest = read_manifest(root / "manifest.tsv")
        targeted_plane = read_plane_scores(root / "plane_scores.tsv")

        spec = EncoderSpec(kind="moments", moment_order=3)
        bags = {m: [] for m in ("cuboids", "planes", "targeted", "random")}
        labels = []
        print("encoding four bag variants per volume ...")
        for i, rec in enumerate(manifest.records):
            volume = read_volume(root / rec.volume_path)
            stack = segment_volume(volume, SEG)
            norm = resolve_norm(volume, NORM)
            rng = np.random.default_rng(
                np.random.SeedSequence(SEED, spawn_key=(0x91A4E, i)))
            grids = {
                "cuboids": build_patch_grid(stack, "cuboids3d", (16, 16, 16),
                                            overlaps=(8, 0, 0)),
                "planes": build_patch_grid(stack, "planes2d", (1, 32, 32)),
                "targeted": build_patch_grid(
                    stack, "planes2d", (1, 32, 32),
                    planes=[targeted_plane[rec.sample_id]]),
                "random": build_patch_grid(
                    stack, "planes2d", (1, 32, 32),
                    planes=[int(rng.choice(stack.kept_planes))]),
            }
            for mode, grid in grids.items():
                bags[mode].append(encode_bag(volume, grid, spec, norm,
                                             rec.sample_id))
            labels.append(rec.label)
        labels = np.array(labels)
        sizes = {m: bags[m][0].j for m in bags}
        print(f"bag sizes: {sizes}\n")

        plan = stratified_splits(labels, FOLDS, SEED)
        cfg = TrainConfig(lr0=5e-3, seed=SEED)
        results = {}
        for mode in ("cuboids", "planes", "targeted", "random"):
            res = cross_validate(bags[mode], labels.tolist(), cfg, plan)
            results[mode] = res.metrics["auc"]
            print(f"  {mode:10s} {FOLDS}-fold AUC {results[mode]:.3f}")

        print("\nranking (most informative first):")
        for mode in sorted(results, key=results.get, reverse=True):
            print(f"  {results[mode]:.3f}  {mode}")
        print("\nAt this pocket scale the ranking is noisy; the acceptance "
              "test runs the calibrated 64x128x128 protocol with 50 volumes "
              "per class, three seeds, and 5-fold splits.")


if __name__ == "__main__":
    main()
