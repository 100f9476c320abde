"""Command-line pipeline orchestration.

Each stage reads its prerequisites from fixed subdirectories of the output
root and writes to its own subdirectory, so stages can run in one invocation
or separately. A machine-readable run summary records per-stage durations and
input/output hashes for provenance.

Exit codes: 0 success, 1 usage or configuration error, 2 data error (missing
or malformed artifacts), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import interpret, phantom, store
from .config import (ConfigError, RunConfig, config_hash, dump_config,
                     parse_config)
from .encoder import EncoderSpec, encode_bag
from .mil import (MILModel, TrainConfig, model_from_checkpoint,
                  model_to_checkpoint, predict, train)
from .parallel import indexed_map
from .preprocess import (MaskStack, NormParams, PatchGrid, SegParams,
                         build_patch_grid, read_patch_grid, resolve_norm,
                         segment_volume, write_patch_grid)

STAGES = ("simulate", "segment", "patch", "encode", "train", "predict",
          "heatmap", "ig-groups", "evaluate", "partial-volume",
          "plane-variability", "bench")


class UsageError(Exception):
    pass


class MissingPrerequisiteError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Provenance helpers

def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_path(path: Path) -> str:
    path = Path(path)
    if path.is_file():
        return _hash_file(path)
    digest = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            digest.update(p.relative_to(path).as_posix().encode())
            digest.update(bytes.fromhex(_hash_file(p)))
    return digest.hexdigest()


def _require(path: Path, hint: str) -> Path:
    if not Path(path).exists():
        raise MissingPrerequisiteError(
            f"missing prerequisite {path} (run the {hint!r} stage first)")
    return Path(path)


def _write_tsv(path: Path, header: list[str], rows) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(_fmt(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------------------
# Config -> module parameter objects (validated inside the usage boundary)

def _seg_params(cfg: RunConfig) -> SegParams:
    s = cfg.seg
    return SegParams(air_mean_threshold=s.air_mean_threshold,
                     median_kernel=s.median_kernel,
                     binarize_threshold=s.binarize_threshold,
                     min_tissue_area=s.min_tissue_area,
                     closing_radius=s.closing_radius, otsu=s.otsu)


def _norm_params(cfg: RunConfig) -> NormParams:
    n = cfg.norm
    return NormParams(lower_clip=n.lower_clip, upper_clip=n.upper_clip,
                      upper_top_percent=n.upper_top_percent, invert=n.invert)


def _encoder_spec(cfg: RunConfig) -> EncoderSpec:
    e = cfg.encoder
    return EncoderSpec(kind=e.kind, pool_shape=tuple(e.pool_shape),
                       moment_order=e.moment_order,
                       intensity_threshold=e.intensity_threshold,
                       projection_seed=e.projection_seed, K=e.K,
                       external_path=e.external_path)


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, lr0=t.lr0, lr_min=t.lr_min,
                       beta1=t.beta1, beta2=t.beta2, eps=t.eps,
                       weight_decay=t.weight_decay, grad_accum=t.grad_accum,
                       patch_sample_rate=t.patch_sample_rate, dropout=t.dropout,
                       attention_dropout=t.attention_dropout,
                       augment_rotations=t.augment_rotations,
                       augment_jitter=t.augment_jitter, seed=cfg.seed)


def _validate(cfg: RunConfig) -> None:
    _seg_params(cfg)
    _norm_params(cfg)
    _encoder_spec(cfg)
    _train_config(cfg)
    if cfg.patch.mode not in ("cuboids3d", "planes2d"):
        raise ConfigError(f"unknown patch.mode {cfg.patch.mode!r}")
    if cfg.ig.group_scores not in ("normalized", "raw"):
        raise ConfigError(f"unknown ig.group_scores {cfg.ig.group_scores!r}")
    if cfg.patch.plane_select not in ("all", "top", "targeted", "random"):
        raise ConfigError(f"unknown patch.plane_select {cfg.patch.plane_select!r}")


# ---------------------------------------------------------------------------
# Shared loading

def _manifest(cfg: RunConfig):
    path = _require(Path(cfg.out_dir) / "simulate" / "manifest.tsv", "simulate")
    return store.read_manifest(path), path


def _mask_stack(cfg: RunConfig, sample_id: str) -> MaskStack:
    path = _require(Path(cfg.out_dir) / "segment" / f"{sample_id}.mask.vmil",
                    "segment")
    mask = store.read_volume(path).data[0].astype(bool)
    areas = mask.sum(axis=(1, 2)).astype(np.int64)
    kept = [int(d) for d in np.nonzero(areas > 0)[0]]
    return MaskStack(mask=mask, areas=areas, kept_planes=kept)


def _load_bags(cfg: RunConfig, manifest) -> list[store.FeatureBag]:
    bag_dir = _require(Path(cfg.out_dir) / "encode", "encode")
    bags = []
    for rec in manifest.records:
        bags.append(store.read_feature_bag(
            _require(bag_dir / f"{rec.sample_id}.fbag", "encode")))
    return bags


def _load_model(cfg: RunConfig) -> tuple[MILModel, Path]:
    path = _require(Path(cfg.out_dir) / "train" / "model.ckpt", "train")
    model, _ = model_from_checkpoint(store.read_checkpoint(path))
    return model, path


def _labels(manifest) -> list[int]:
    return manifest.labels().tolist()


# ---------------------------------------------------------------------------
# Stages

def stage_simulate(cfg: RunConfig) -> tuple[dict, dict]:
    out = Path(cfg.out_dir) / "simulate"
    out.mkdir(parents=True, exist_ok=True)
    p = cfg.phantom
    cell_types = phantom.default_cell_types(p.cell_scale)
    class_specs = phantom.default_class_specs(tuple(p.dims), p.cells_per_volume)
    if p.survival:
        survival = phantom.SurvivalSpec(
            risk_by_class={0: (p.risk_mean_low, p.risk_sd),
                           1: (p.risk_mean_high, p.risk_sd)},
            baseline_hazard=p.baseline_hazard,
            target_censor_fraction=p.censor_fraction)
        phantom.generate_survival_cohort(class_specs, cell_types, survival,
                                         p.n_per_class, cfg.seed, out,
                                         workers=cfg.workers)
    else:
        phantom.generate_classification_cohort(class_specs, cell_types,
                                               p.n_per_class, cfg.seed, out,
                                               workers=cfg.workers)
    return {}, {"simulate": _hash_path(out)}


def stage_segment(cfg: RunConfig) -> tuple[dict, dict]:
    manifest, mpath = _manifest(cfg)
    out = Path(cfg.out_dir) / "segment"
    out.mkdir(parents=True, exist_ok=True)
    params = _seg_params(cfg)

    def one(rec):
        volume = store.read_volume(store.resolve_volume_path(mpath, rec))
        stack = segment_volume(volume, params)
        mask_vol = store.Volume(data=stack.mask[None].astype(np.uint8),
                                voxel_size=volume.voxel_size)
        store.write_volume(mask_vol, out / f"{rec.sample_id}.mask.vmil")
        return [(rec.sample_id, d, int(stack.areas[d]), int(d in set(stack.kept_planes)))
                for d in range(stack.mask.shape[0])]

    rows = indexed_map(one, manifest.records, workers=cfg.workers)
    _write_tsv(out / "areas.tsv", ["sample_id", "plane", "area", "kept"],
               [r for rs in rows for r in rs])
    return {"manifest": _hash_path(mpath)}, {"segment": _hash_path(out)}


def _planes_for(cfg: RunConfig, sample_id: str, sample_index: int,
                stack: MaskStack, targeted: dict[str, int] | None):
    select = cfg.patch.plane_select
    if cfg.patch.mode != "planes2d" or select == "all":
        return None
    if select == "top":
        return [stack.reference_plane()]
    if select == "targeted":
        if targeted is None or sample_id not in targeted:
            raise MissingPrerequisiteError(
                "targeted plane selection needs plane_scores.tsv from simulate")
        return [targeted[sample_id]]
    rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(0x91A4E, sample_index)))
    return [int(rng.choice(stack.kept_planes))]


def stage_patch(cfg: RunConfig) -> tuple[dict, dict]:
    manifest, mpath = _manifest(cfg)
    out = Path(cfg.out_dir) / "patch"
    out.mkdir(parents=True, exist_ok=True)
    scores_path = Path(cfg.out_dir) / "simulate" / "plane_scores.tsv"
    targeted = phantom.read_plane_scores(scores_path) if scores_path.exists() else None
    shape = tuple(cfg.patch.shape)
    if cfg.patch.mode == "planes2d":
        shape = (1, shape[1], shape[2])

    def one(job):
        index, rec = job
        stack = _mask_stack(cfg, rec.sample_id)
        planes = _planes_for(cfg, rec.sample_id, index, stack, targeted)
        grid = build_patch_grid(stack, cfg.patch.mode, shape,
                                overlaps=tuple(cfg.patch.overlaps), planes=planes)
        write_patch_grid(grid, out / f"{rec.sample_id}.grid.tsv")
        return len(grid)

    indexed_map(one, list(enumerate(manifest.records)), workers=cfg.workers)
    return {"segment": _hash_path(Path(cfg.out_dir) / "segment")}, \
           {"patch": _hash_path(out)}


def stage_encode(cfg: RunConfig) -> tuple[dict, dict]:
    manifest, mpath = _manifest(cfg)
    out = Path(cfg.out_dir) / "encode"
    out.mkdir(parents=True, exist_ok=True)
    spec = _encoder_spec(cfg)

    if spec.kind == "external":
        src = _require(Path(spec.external_path), "external features")
        for rec in manifest.records:
            bag = store.read_feature_bag(_require(src / f"{rec.sample_id}.fbag",
                                                  "external features"))
            store.write_feature_bag(bag, out / f"{rec.sample_id}.fbag")
        return {"external": _hash_path(src)}, {"encode": _hash_path(out)}

    grid_dir = _require(Path(cfg.out_dir) / "patch", "patch")
    norm_cfg = _norm_params(cfg)

    def one(rec):
        volume = store.read_volume(store.resolve_volume_path(mpath, rec))
        grid = read_patch_grid(_require(grid_dir / f"{rec.sample_id}.grid.tsv",
                                        "patch"))
        bag = encode_bag(volume, grid, spec, resolve_norm(volume, norm_cfg),
                         rec.sample_id)
        store.write_feature_bag(bag, out / f"{rec.sample_id}.fbag")
        return bag.j

    indexed_map(one, manifest.records, workers=cfg.workers)
    return {"patch": _hash_path(grid_dir)}, {"encode": _hash_path(out)}


def stage_train(cfg: RunConfig) -> tuple[dict, dict]:
    manifest, _ = _manifest(cfg)
    bags = _load_bags(cfg, manifest)
    out = Path(cfg.out_dir) / "train"
    out.mkdir(parents=True, exist_ok=True)
    model, log, state = train(bags, _labels(manifest), _train_config(cfg))
    ckpt = model_to_checkpoint(model, state, config_hash(cfg), cfg.seed)
    store.write_checkpoint(ckpt, out / "model.ckpt")
    _write_tsv(out / "train_log.tsv", ["epoch", "loss", "lr"],
               [(e["epoch"], e["loss"], e["lr"]) for e in log.epochs])
    return {"encode": _hash_path(Path(cfg.out_dir) / "encode")}, \
           {"train": _hash_path(out)}


def stage_predict(cfg: RunConfig) -> tuple[dict, dict]:
    manifest, _ = _manifest(cfg)
    model, ckpt_path = _load_model(cfg)
    bags = _load_bags(cfg, manifest)
    out = Path(cfg.out_dir) / "predict"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for bag in bags:
        pred = predict(model, bag)
        rows.append((pred.sample_id, pred.p, pred.logit))
    _write_tsv(out / "predictions.tsv", ["sample_id", "p", "logit"], rows)
    return {"checkpoint": _hash_path(ckpt_path)}, {"predict": _hash_path(out)}


def stage_heatmap(cfg: RunConfig) -> tuple[dict, dict]:
    manifest, mpath = _manifest(cfg)
    model, ckpt_path = _load_model(cfg)
    out = Path(cfg.out_dir) / "heatmap"
    out.mkdir(parents=True, exist_ok=True)
    spec = _encoder_spec(cfg)
    norm_cfg = _norm_params(cfg)
    shape = tuple(cfg.patch.shape)
    overlaps = interpret.heatmap_overlaps(shape)

    def one(rec):
        volume = store.read_volume(store.resolve_volume_path(mpath, rec))
        stack = _mask_stack(cfg, rec.sample_id)
        grid = build_patch_grid(stack, "cuboids3d", shape, overlaps=overlaps)
        bag = encode_bag(volume, grid, spec, resolve_norm(volume, norm_cfg),
                         rec.sample_id)
        result = interpret.integrated_gradients(model, bag, M=cfg.ig.steps)
        heat = interpret.build_heatmap(volume.dims, grid, result.raw)
        store.write_volume(interpret.heatmap_to_volume(heat, volume.voxel_size),
                           out / f"{rec.sample_id}.heatmap.vmil")
        store.write_volume(store.Volume(data=heat.coverage[None],
                                        voxel_size=volume.voxel_size),
                           out / f"{rec.sample_id}.coverage.vmil")
        _write_tsv(out / f"{rec.sample_id}.ig.tsv",
                   ["d", "h", "w", "raw_ig", "normalized_ig"],
                   [(int(e[0]), int(e[1]), int(e[2]), float(r), float(s))
                    for e, r, s in zip(grid.entries, result.raw, result.normalized)])
        return result.completeness_gap

    indexed_map(one, manifest.records, workers=cfg.workers)
    return {"checkpoint": _hash_path(ckpt_path)}, {"heatmap": _hash_path(out)}


def stage_ig_groups(cfg: RunConfig) -> tuple[dict, dict]:
    manifest, _ = _manifest(cfg)
    model, ckpt_path = _load_model(cfg)
    bags = _load_bags(cfg, manifest)
    out = Path(cfg.out_dir) / "ig-groups"
    out.mkdir(parents=True, exist_ok=True)

    normalized = []
    pooled_scores = []
    risks = []
    for bag in bags:
        result = interpret.integrated_gradients(model, bag, M=cfg.ig.steps)
        normalized.append(result.normalized)
        pooled_scores.append(result.normalized
                             if cfg.ig.group_scores == "normalized"
                             else result.raw)
        risks.append(predict(model, bag).p)
    groups = interpret.ig_group_assignment(pooled_scores)
    rows = []
    for rec, stats_row, scores, risk in zip(manifest.records, groups.per_sample,
                                            normalized, risks):
        rows.append((rec.sample_id, stats_row["n_instances"],
                     stats_row["high_fraction"], stats_row["middle_fraction"],
                     stats_row["low_fraction"], stats_row["high_low_ratio"],
                     float(np.mean(scores)), risk))
    _write_tsv(out / "ig_groups.tsv",
               ["sample_id", "n_instances", "high_fraction", "middle_fraction",
                "low_fraction", "high_low_ratio", "mean_normalized_ig", "risk"],
               rows)
    corr = ev.association_stats([r[6] for r in rows], risks)
    _write_tsv(out / "ig_risk_correlation.tsv",
               ["pearson_r", "pearson_p", "spearman_r", "spearman_p"],
               [(corr.pearson_r, corr.pearson_p, corr.spearman_r, corr.spearman_p)])
    return {"checkpoint": _hash_path(ckpt_path)}, {"ig-groups": _hash_path(out)}


def stage_evaluate(cfg: RunConfig) -> tuple[dict, dict]:
    manifest, _ = _manifest(cfg)
    bags = _load_bags(cfg, manifest)
    labels = _labels(manifest)
    out = Path(cfg.out_dir) / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    times = events = None
    if all(r.time is not None for r in manifest.records):
        times = [r.time for r in manifest.records]
        events = [r.event for r in manifest.records]
    summary = ev.repeated_cross_validate(bags, labels, _train_config(cfg),
                                         cfg.eval.folds, cfg.eval.seeds,
                                         times=times, events=events)
    rows = []
    for seed, res in zip(cfg.eval.seeds, summary["results"]):
        rows.append((seed, res.metrics["auc"], res.metrics["balanced_accuracy"],
                     res.metrics["f1"]))
    _write_tsv(out / "metrics.tsv", ["seed", "auc", "balanced_accuracy", "f1"],
               rows)
    _write_tsv(out / "metrics_summary.tsv", ["auc_mean", "auc_sd"],
               [(summary["auc_mean"], summary["auc_sd"])])
    pred_rows = []
    for seed, res in zip(cfg.eval.seeds, summary["results"]):
        for sid, p, fold in zip(res.sample_ids, res.probabilities,
                                res.fold_of_sample):
            pred_rows.append((seed, sid, float(p), int(fold)))
    _write_tsv(out / "cv_predictions.tsv", ["seed", "sample_id", "p", "fold"],
               pred_rows)
    if times is not None:
        km_rows, lr_rows = [], []
        for seed, res in zip(cfg.eval.seeds, summary["results"]):
            sv = res.survival
            for group, curve in sv.curves.items():
                for t, s in zip(curve.times, curve.survival):
                    km_rows.append((seed, int(group), float(t), float(s)))
            lr_rows.append((seed, sv.statistic, sv.p_value, int(sv.degenerate)))
        _write_tsv(out / "km_curves.tsv", ["seed", "group", "time", "survival"],
                   km_rows)
        _write_tsv(out / "logrank.tsv", ["seed", "statistic", "p", "degenerate"],
                   lr_rows)
    return {"encode": _hash_path(Path(cfg.out_dir) / "encode")}, \
           {"evaluate": _hash_path(out)}


def stage_partial_volume(cfg: RunConfig) -> tuple[dict, dict]:
    manifest, _ = _manifest(cfg)
    model, ckpt_path = _load_model(cfg)
    bags = _load_bags(cfg, manifest)
    out = Path(cfg.out_dir) / "partial-volume"
    out.mkdir(parents=True, exist_ok=True)
    result = ev.partial_volume_experiment(
        model, bags, _labels(manifest), fraction=cfg.eval.partial_fraction,
        iterations=cfg.eval.partial_iterations, seed=cfg.seed,
        ig_steps=cfg.ig.steps)
    _write_tsv(out / "aucs.tsv", ["iteration", "auc"],
               list(enumerate(result.aucs.tolist())))
    _write_tsv(out / "summary.tsv",
               ["whole_auc", "auc_min", "auc_median", "auc_max",
                "fraction_below_whole"],
               [(result.whole_auc, result.auc_min, result.auc_median,
                 result.auc_max, result.fraction_below_whole)])
    _write_tsv(out / "rank_table.tsv",
               ["iteration", "sample_index", "instance_index", "rank_full",
                "rank_sub"],
               [(r["iteration"], r["sample_index"], r["instance_index"],
                 r["rank_full"], r["rank_sub"]) for r in result.rank_table])
    return {"checkpoint": _hash_path(ckpt_path)}, \
           {"partial-volume": _hash_path(out)}


def stage_plane_variability(cfg: RunConfig) -> tuple[dict, dict]:
    manifest, mpath = _manifest(cfg)
    model, ckpt_path = _load_model(cfg)
    out = Path(cfg.out_dir) / "plane-variability"
    out.mkdir(parents=True, exist_ok=True)
    spec = _encoder_spec(cfg)
    norm_cfg = _norm_params(cfg)
    shape = (1, cfg.patch.shape[1], cfg.patch.shape[2])

    def one(rec):
        volume = store.read_volume(store.resolve_volume_path(mpath, rec))
        stack = _mask_stack(cfg, rec.sample_id)
        norm = resolve_norm(volume, norm_cfg)
        plane_bags = []
        for plane in stack.kept_planes:
            grid = build_patch_grid(stack, "planes2d", shape, planes=[plane])
            if len(grid) == 0:
                continue
            plane_bags.append(encode_bag(volume, grid, spec, norm,
                                         f"{rec.sample_id}/plane{plane}"))
        return rec.sample_id, plane_bags

    per_sample = dict(indexed_map(one, manifest.records, workers=cfg.workers))
    results = ev.plane_variability(model, per_sample,
                                   threshold=cfg.eval.threshold)
    _write_tsv(out / "gaps.tsv",
               ["sample_id", "p5", "p95", "gap", "crosses_threshold",
                "single_plane"],
               [(r.sample_id, r.p5, r.p95, r.gap, int(r.crosses_threshold),
                 int(r.single_plane)) for r in results])
    trace_rows = []
    for r in results:
        for plane_pos, risk in enumerate(r.risks.tolist()):
            trace_rows.append((r.sample_id, plane_pos, risk))
    _write_tsv(out / "traces.tsv", ["sample_id", "plane_position", "risk"],
               trace_rows)
    return {"checkpoint": _hash_path(ckpt_path)}, \
           {"plane-variability": _hash_path(out)}


def stage_bench(cfg: RunConfig) -> tuple[dict, dict]:
    out = Path(cfg.out_dir) / "bench"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    patch_shape = (8, 16, 16)
    patches = rng.random((64, 1, *patch_shape))
    spec = EncoderSpec(kind=cfg.encoder.kind if cfg.encoder.kind != "external"
                       else "moments")
    from .encoder import encode_patch
    t0 = time.perf_counter()
    for p in patches:
        encode_patch(p, spec)
    encode_rate = len(patches) / (time.perf_counter() - t0)

    j, k = 64, spec.K
    bags = []
    for i in range(20):
        feats = rng.standard_normal((j, k)).astype(np.float32)
        coords = np.zeros((j, 6), dtype=np.uint32)
        coords[:, 0] = np.arange(j) % 4
        coords[:, 3:] = patch_shape
        bags.append(store.FeatureBag(sample_id=f"bench{i}", features=feats,
                                     coords=coords))
    labels = [i % 2 for i in range(20)]
    bench_cfg = replace(_train_config(cfg), epochs=5)
    t0 = time.perf_counter()
    model, _, _ = train(bags, labels, bench_cfg)
    train_rate = (5 * len(bags)) / (time.perf_counter() - t0)

    t0 = time.perf_counter()
    for bag in bags:
        predict(model, bag)
    predict_rate = len(bags) / (time.perf_counter() - t0)

    _write_tsv(out / "bench.tsv",
               ["encode_patches_per_s", "train_samples_per_s",
                "predict_samples_per_s"],
               [(encode_rate, train_rate, predict_rate)])
    return {}, {"bench": _hash_path(out)}


_STAGE_FUNCS = {
    "simulate": stage_simulate,
    "segment": stage_segment,
    "patch": stage_patch,
    "encode": stage_encode,
    "train": stage_train,
    "predict": stage_predict,
    "heatmap": stage_heatmap,
    "ig-groups": stage_ig_groups,
    "evaluate": stage_evaluate,
    "partial-volume": stage_partial_volume,
    "plane-variability": stage_plane_variability,
    "bench": stage_bench,
}


def run_pipeline(cfg: RunConfig, stages: list[str]) -> dict:
    """Execute stages in order; write the resolved config and a run summary
    with per-stage durations and input/output hashes."""
    for stage in stages:
        if stage not in _STAGE_FUNCS:
            raise UsageError(f"unknown stage {stage!r}; expected one of {STAGES}")
    _validate(cfg)
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_root / "config.resolved.yaml")

    summary_path = out_root / "run_summary.json"
    summary = {"config_hash": config_hash(cfg).hex(), "stages": {}}
    if summary_path.exists():
        try:
            summary = json.loads(summary_path.read_text())
            summary["config_hash"] = config_hash(cfg).hex()
            summary.setdefault("stages", {})
        except json.JSONDecodeError:
            pass

    for stage in stages:
        start = time.perf_counter()
        stage_dir = out_root / stage
        try:
            inputs, outputs = _STAGE_FUNCS[stage](cfg)
        except Exception as exc:
            stage_dir.mkdir(parents=True, exist_ok=True)
            (stage_dir / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
            raise
        failed = stage_dir / "FAILED"
        if failed.exists():
            failed.unlink()
        summary["stages"][stage] = {
            "duration_s": time.perf_counter() - start,
            "inputs": inputs,
            "outputs": outputs,
        }
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# Entry point

def _build_parser() -> _Parser:
    parser = _Parser(prog="volmil",
                     description="volumetric multiple-instance pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--preset", help="modality preset: otls, microct, phantom")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       dest="overrides", help="dotted-path override")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", help="output root (default $VOLMIL_OUT or ./runs)")

    run = sub.add_parser("run", help="run a list of stages in order")
    run.add_argument("stages", nargs="+", choices=STAGES)
    common(run)

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        common(p)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = parse_config(args.config, overrides=args.overrides,
                           preset=args.preset)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            cfg.workers = args.workers
        if args.out is not None:
            cfg.out_dir = args.out
        stages = args.stages if args.command == "run" else [args.command]
        _validate(cfg)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1

    try:
        run_pipeline(cfg, stages)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (MissingPrerequisiteError, store.StoreError, FileNotFoundError,
            ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
