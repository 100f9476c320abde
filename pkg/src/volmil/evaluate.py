"""Cross-validation, classification metrics, survival statistics, association
tests, and the robustness experiments (partial-volume sampling, depth-fraction
ablation, per-plane risk variability).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .interpret import integrated_gradients
from .mil import MILModel, TrainConfig, predict, train
from .store import FeatureBag


# ---------------------------------------------------------------------------
# Splits

@dataclass
class SplitPlan:
    folds: list[tuple[np.ndarray, np.ndarray]]   # (train_idx, test_idx) per fold
    k: int
    seed: int

    def __post_init__(self):
        seen = np.concatenate([test for _, test in self.folds])
        if len(seen) != len(set(seen.tolist())):
            raise ValueError("test folds overlap")


def stratified_splits(labels, k: int, seed: int) -> SplitPlan:
    """Shuffle within each class, deal round-robin to k folds: test folds
    partition the cohort and each fold's class ratio is within one sample of
    the cohort's."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5B117,)))
    fold_members: list[list[int]] = [[] for _ in range(k)]
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        if len(idx) < k:
            raise ValueError(f"class {cls} has {len(idx)} samples, fewer than k={k}")
        idx = idx[rng.permutation(len(idx))]
        for pos, sample in enumerate(idx):
            fold_members[pos % k].append(int(sample))
    all_idx = np.arange(len(labels))
    folds = []
    for members in fold_members:
        test = np.array(sorted(members), dtype=np.int64)
        train_idx = np.setdiff1d(all_idx, test)
        folds.append((train_idx, test))
    return SplitPlan(folds=folds, k=k, seed=seed)


# ---------------------------------------------------------------------------
# Classification metrics

def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC via average ranks; ties credited half. Exactly equal
    to counting wins + half-ties over all positive-negative pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined with a single class")
    ranks = stats.rankdata(scores, method="average")
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def classification_metrics(scores, labels, threshold: float = 0.5) -> dict:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred = (scores >= threshold).astype(np.int64)
    tp = int(((pred == 1) & (labels == 1)).sum())
    tn = int(((pred == 0) & (labels == 0)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    tpr = tp / (tp + fn) if tp + fn else 0.0
    tnr = tn / (tn + fp) if tn + fp else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    return {"auc": auc_score(scores, labels),
            "balanced_accuracy": (tpr + tnr) / 2.0,
            "f1": f1}


# ---------------------------------------------------------------------------
# Survival statistics

@dataclass
class KMCurve:
    times: np.ndarray        # distinct observed-event times, ascending
    survival: np.ndarray     # product-limit estimate after each time
    at_risk: np.ndarray
    events: np.ndarray


def km_curve(times, events) -> KMCurve:
    """Kaplan-Meier product-limit estimator; steps only at observed events."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    order = np.argsort(times, kind="stable")
    times, events = times[order], events[order]
    step_times, surv, at_risk_out, d_out = [], [], [], []
    s = 1.0
    n = len(times)
    i = 0
    while i < n:
        t = times[i]
        j = i
        d = 0
        while j < n and times[j] == t:
            d += events[j]
            j += 1
        if d > 0:
            n_at_risk = n - i
            s *= 1.0 - d / n_at_risk
            step_times.append(t)
            surv.append(s)
            at_risk_out.append(n_at_risk)
            d_out.append(d)
        i = j
    return KMCurve(times=np.array(step_times), survival=np.array(surv),
                   at_risk=np.array(at_risk_out, dtype=np.int64),
                   events=np.array(d_out, dtype=np.int64))


@dataclass
class SurvivalResult:
    curves: dict
    statistic: float
    p_value: float
    degenerate: bool = False


def survival_analysis(times, events, groups) -> SurvivalResult:
    """Per-group KM curves plus the two-group log-rank test against chi
    squared with one degree of freedom."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    if len(uniq) != 2:
        raise ValueError(f"log-rank needs exactly 2 groups, got {len(uniq)}")
    curves = {g: km_curve(times[groups == g], events[groups == g]) for g in uniq}

    g0 = groups == uniq[0]
    event_times = np.unique(times[events == 1])
    observed_minus_expected = 0.0
    variance = 0.0
    for t in event_times:
        at_risk = times >= t
        n_j = int(at_risk.sum())
        n0 = int((at_risk & g0).sum())
        d_j = int(((times == t) & (events == 1)).sum())
        d0 = int(((times == t) & (events == 1) & g0).sum())
        observed_minus_expected += d0 - d_j * n0 / n_j
        if n_j > 1:
            variance += d_j * (n0 / n_j) * (1 - n0 / n_j) * (n_j - d_j) / (n_j - 1)
    if variance <= 0:
        return SurvivalResult(curves=curves, statistic=0.0, p_value=1.0,
                              degenerate=True)
    statistic = observed_minus_expected**2 / variance
    return SurvivalResult(curves=curves, statistic=statistic,
                          p_value=float(stats.chi2.sf(statistic, df=1)))


def median_risk_groups(probabilities) -> np.ndarray:
    """High-risk group = probability at or above the cohort median (the 50th
    percentile threshold)."""
    p = np.asarray(probabilities, dtype=np.float64)
    return (p >= np.median(p)).astype(np.int64)


# ---------------------------------------------------------------------------
# Association tests

@dataclass
class CorrelationStats:
    pearson_r: float
    pearson_p: float
    spearman_r: float
    spearman_p: float


def association_stats(x, y) -> CorrelationStats:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 3:
        raise ValueError("correlation needs n >= 3")
    if x.std() == 0 or y.std() == 0:
        raise ValueError("zero-variance input")
    pr = stats.pearsonr(x, y)
    sr = stats.spearmanr(x, y)
    return CorrelationStats(pearson_r=float(pr.statistic), pearson_p=float(pr.pvalue),
                            spearman_r=float(sr.statistic), spearman_p=float(sr.pvalue))


def group_difference(a, b, welch: bool = True) -> tuple[float, float]:
    """Two-sided unpaired t-test; Welch (unequal variances) by default."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("both groups need >= 2 members")
    if a.std() == 0 and b.std() == 0:
        raise ValueError("zero-variance input")
    res = stats.ttest_ind(a, b, equal_var=not welch)
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# Cross-validation

@dataclass
class CohortResult:
    sample_ids: list[str]
    probabilities: np.ndarray
    logits: np.ndarray
    fold_of_sample: np.ndarray
    metrics: dict
    survival: SurvivalResult | None = None
    models: list[MILModel] = field(default_factory=list)


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(0xF01D, fold))
               .generate_state(1)[0])


def cross_validate(bags: list[FeatureBag], labels, cfg: TrainConfig,
                   plan: SplitPlan, times=None, events=None,
                   keep_models: bool = False) -> CohortResult:
    """One model per fold; test-fold predictions pooled over the cohort and
    scored once (fold-aggregated metrics)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(bags)
    probs = np.full(n, np.nan)
    logits = np.full(n, np.nan)
    fold_of = np.full(n, -1, dtype=np.int64)
    models = []
    for fold, (train_idx, test_idx) in enumerate(plan.folds):
        fold_cfg = replace(cfg, seed=_fold_seed(cfg.seed, fold))
        model, _, _ = train([bags[i] for i in train_idx],
                            labels[train_idx].tolist(), fold_cfg)
        for i in test_idx:
            pred = predict(model, bags[i])
            probs[i] = pred.p
            logits[i] = pred.logit
            fold_of[i] = fold
        if keep_models:
            models.append(model)
    if np.isnan(probs).any():
        raise ValueError("split plan does not cover the cohort")
    metrics = classification_metrics(probs, labels)
    survival = None
    if times is not None:
        survival = survival_analysis(times, events, median_risk_groups(probs))
    return CohortResult(sample_ids=[b.sample_id for b in bags],
                        probabilities=probs, logits=logits,
                        fold_of_sample=fold_of, metrics=metrics,
                        survival=survival, models=models)


def repeated_cross_validate(bags, labels, cfg: TrainConfig, k: int,
                            seeds, times=None, events=None) -> dict:
    """Independent splits and trainings per seed; per-seed metrics plus
    mean and standard deviation."""
    results = []
    for seed in seeds:
        plan = stratified_splits(labels, k, seed)
        results.append(cross_validate(bags, labels, replace(cfg, seed=seed),
                                      plan, times=times, events=events))
    aucs = np.array([r.metrics["auc"] for r in results])
    return {"results": results, "auc_mean": float(aucs.mean()),
            "auc_sd": float(aucs.std(ddof=1)) if len(aucs) > 1 else 0.0,
            "auc_per_seed": aucs.tolist()}


def cross_cohort_validate(bags_a, labels_a, bags_b, labels_b,
                          cfg: TrainConfig, k: int, seed: int) -> dict:
    """Train fold models on cohort A, apply every fold model to cohort B, and
    score B on the fold-averaged probabilities."""
    plan = stratified_splits(labels_a, k, seed)
    probs_b = np.zeros(len(bags_b))
    for fold, (train_idx, _) in enumerate(plan.folds):
        fold_cfg = replace(cfg, seed=_fold_seed(seed, fold))
        model, _, _ = train([bags_a[i] for i in train_idx],
                            [int(labels_a[i]) for i in train_idx], fold_cfg)
        probs_b += np.array([predict(model, b).p for b in bags_b])
    probs_b /= k
    return {"probabilities": probs_b,
            "metrics": classification_metrics(probs_b, labels_b)}


# ---------------------------------------------------------------------------
# Robustness experiments

def depth_fraction_subbag(bag: FeatureBag, fraction: float) -> FeatureBag:
    """Instances fully inside the leading fraction of the volume's depth."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    ends = bag.coords[:, 0].astype(np.int64) + bag.coords[:, 3].astype(np.int64)
    cutoff = math.ceil(fraction * int(ends.max()))
    keep = np.nonzero(ends <= cutoff)[0]
    if len(keep) == 0:
        keep = np.array([int(np.argmin(ends))])   # retain at least the shallowest
    return FeatureBag(sample_id=bag.sample_id, features=bag.features[keep],
                      coords=bag.coords[keep])


def _subsample_bag(bag: FeatureBag, fraction: float,
                   rng: np.random.Generator) -> FeatureBag:
    j = len(bag.features)
    n_keep = math.ceil(fraction * j)
    if n_keep == 0:
        raise ValueError("fraction yields zero instances")
    idx = np.sort(rng.choice(j, size=n_keep, replace=False))
    return FeatureBag(sample_id=bag.sample_id, features=bag.features[idx],
                      coords=bag.coords[idx])


@dataclass
class PartialVolumeResult:
    aucs: np.ndarray
    whole_auc: float
    auc_min: float
    auc_median: float
    auc_max: float
    fraction_below_whole: float
    rank_table: list[dict]       # per retained instance: rank in full vs sub bag
    rank_correlations: list[dict]


def partial_volume_experiment(model: MILModel, bags: list[FeatureBag], labels,
                              fraction: float = 0.15, iterations: int = 50,
                              seed: int = 0, ig_steps: int = 32,
                              rank_iterations: int = 1) -> PartialVolumeResult:
    """Repeatedly predict on random instance subsets of each bag and track the
    pooled AUC spread; on the first rank_iterations iterations also compare
    each retained instance's attribution rank inside the sub-bag against its
    rank inside the full bag."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    whole_auc = auc_score([predict(model, b).p for b in bags], labels)

    full_ranks = None
    aucs = np.empty(iterations)
    rank_table: list[dict] = []
    rank_corrs: list[dict] = []
    for it in range(iterations):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(it,)))
        sub_bags = [_subsample_bag(b, fraction, rng) for b in bags]
        aucs[it] = auc_score([predict(model, b).p for b in sub_bags], labels)
        if it < rank_iterations:
            if full_ranks is None:
                full_ranks = [stats.rankdata(integrated_gradients(
                    model, b, M=ig_steps).raw) for b in bags]
            for si, (bag, sub) in enumerate(zip(bags, sub_bags)):
                kept = _match_rows(bag, sub)
                sub_ig = integrated_gradients(model, sub, M=ig_steps).raw
                sub_ranks = stats.rankdata(sub_ig)
                for pos, orig in enumerate(kept):
                    rank_table.append({
                        "iteration": it, "sample_index": si,
                        "instance_index": int(orig),
                        "rank_full": float(full_ranks[si][orig]),
                        "rank_sub": float(sub_ranks[pos]),
                    })
                if len(kept) >= 3:
                    rho = stats.spearmanr(full_ranks[si][kept], sub_ranks).statistic
                    rank_corrs.append({"iteration": it, "sample_index": si,
                                       "spearman_rho": float(rho)})
    return PartialVolumeResult(
        aucs=aucs, whole_auc=whole_auc, auc_min=float(aucs.min()),
        auc_median=float(np.median(aucs)), auc_max=float(aucs.max()),
        fraction_below_whole=float((aucs < whole_auc).mean()),
        rank_table=rank_table, rank_correlations=rank_corrs)


def _match_rows(full: FeatureBag, sub: FeatureBag) -> np.ndarray:
    """Indices in the full bag of each sub-bag row, matched by coordinates."""
    key = {tuple(c): i for i, c in enumerate(full.coords.tolist())}
    return np.array([key[tuple(c)] for c in sub.coords.tolist()], dtype=np.int64)


@dataclass
class PlaneVariability:
    sample_id: str
    risks: np.ndarray           # depth-ordered per-plane risks
    p5: float
    p95: float
    gap: float
    crosses_threshold: bool
    single_plane: bool


def plane_variability(model: MILModel, plane_bags_per_sample: dict,
                      threshold: float = 0.5) -> list[PlaneVariability]:
    """Per sample: predict each plane separately and report the spread between
    the 5th and 95th percentile risks, flagging samples whose spread straddles
    the decision threshold."""
    out = []
    for sample_id, plane_bags in plane_bags_per_sample.items():
        risks = np.array([predict(model, b).p for b in plane_bags])
        single = len(risks) < 2
        if single:
            p5 = p95 = float(risks[0])
        else:
            p5 = float(np.percentile(risks, 5))
            p95 = float(np.percentile(risks, 95))
        gap = p95 - p5
        out.append(PlaneVariability(
            sample_id=sample_id, risks=risks, p5=p5, p95=p95, gap=gap,
            crosses_threshold=bool(p5 <= threshold <= p95) and not single,
            single_plane=single))
    return out
