"""Attribution-driven pruning and self-influence label audits.

The pruning protocol: train a baseline, collect misclassified validation
visits, take each visit's most-attended instance as a target, score every
training instance against the targets, flag the top-k per target, clear
the flagged instances' presence bits and retrain from the same seed.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .influence import (InfluenceTable, influence_table, instance_key, rank_bags_by_self_influence,
                        self_influence_scores, singletons)
from .metrics import DetectionCurve, MetricBundle, MetricError, evaluate_probs
from .model import Bag, ModelConfig, ModelParams, as_singleton_bag, most_attended_instance, predict_probs
from .rng import substream
from .synth import SynthDataset
from .train import Archive, RunManifest, TrainConfig, apply_removals, train

log = logging.getLogger(__name__)

RANKING_MODES = ("per_target_topk_union", "cumulative_sum")
ORIENTATIONS = ("harmful", "helpful")
SEED_POLICIES = ("same_as_baseline", "fresh")


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    k: int = 50
    ks: Tuple[int, ...] = ()
    variant: str = "preconditioned_ip"
    checkpoint_mode: str = "strict"
    ranking: str = "per_target_topk_union"
    orientation: str = "harmful"
    seed_policy: str = "same_as_baseline"

    def __post_init__(self):
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if self.k < 1 or any(k < 1 for k in self.ks):
            raise ValueError("k must be >= 1")
        if self.ranking not in RANKING_MODES:
            raise ValueError(f"unknown ranking mode {self.ranking!r}")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if self.seed_policy not in SEED_POLICIES:
            raise ValueError(f"unknown seed policy {self.seed_policy!r}")

    @property
    def k_values(self) -> Tuple[int, ...]:
        return self.ks or (self.k,)


def find_misclassified(params: ModelParams, val_bags: Sequence[Bag]) -> List[int]:
    """Ids of bags whose argmax class (lowest index on ties) differs from reader 1."""
    if not val_bags:
        raise PruneError("empty validation set")
    probs = predict_probs(params, val_bags)
    pred = np.argmax(probs, axis=1)
    return [b.id for b, p in zip(val_bags, pred) if p != b.reader1]


def build_targets(params: ModelParams, misclassified: Sequence[int], val_bags: Sequence[Bag]) -> List[Bag]:
    by_id = {b.id: b for b in val_bags}
    out = []
    for i in misclassified:
        if i not in by_id:
            raise PruneError(f"bag {i} is not in the validation set")
        bag = by_id[i]
        out.append(as_singleton_bag(bag, most_attended_instance(params, bag)))
    return out


def _harm(table: InfluenceTable, orientation: str) -> np.ndarray:
    return -table.scores if orientation == "harmful" else table.scores


def _top(values: np.ndarray, ids: Sequence[str], k: int) -> List[str]:
    # descending value, ties by ascending candidate id
    order = sorted(range(len(ids)), key=lambda j: (-values[j], instance_sort_key(ids[j])))
    return [ids[j] for j in order[:k]]


def instance_sort_key(key: str):
    parts = key.split(":")
    return tuple(int(p) for p in parts) if all(p.lstrip("-").isdigit() for p in parts) else (key,)


def flag_per_target(table: InfluenceTable, k: int, orientation: str = "harmful") -> Dict[str, List[str]]:
    values = _harm(table, orientation)
    return {t: _top(values[i], table.candidate_ids, k) for i, t in enumerate(table.target_ids)}


def flag_removals(table: InfluenceTable, k: int, ranking: str = "per_target_topk_union",
                  orientation: str = "harmful") -> Set[str]:
    """Candidate ids to remove.

    ``orientation="harmful"`` ranks by how much a candidate *raised* the
    target's loss (negated score); ``"helpful"`` ranks by the raw score.
    """
    if ranking not in RANKING_MODES:
        raise PruneError(f"unknown ranking mode {ranking!r}")
    if k < 1:
        raise PruneError("k must be >= 1")
    n_cand = len(table.candidate_ids)
    if k > n_cand:
        warnings.warn(f"k={k} exceeds the {n_cand} candidates; flagging all of them", stacklevel=2)
    if not table.target_ids:
        return set()
    if ranking == "per_target_topk_union":
        flagged: Set[str] = set()
        for ids in flag_per_target(table, k, orientation).values():
            flagged.update(ids)
        return flagged
    total = _harm(table, orientation).sum(axis=0)
    budget = min(len(table.target_ids) * k, n_cand)
    return set(_top(total, table.candidate_ids, budget))


def count_instances(bags: Iterable[Bag]) -> int:
    return int(sum(b.n_present for b in bags))


def format_removal(removed: int, total: int) -> str:
    """``"p% (u/total)"`` with one decimal and thousands separators."""
    pct = 100.0 * removed / total if total else 0.0
    return f"{pct:.1f}% ({removed:,}/{total:,})"


def retrain_without(train_bags: Sequence[Bag], val_bags: Sequence[Bag], removed: Iterable[str],
                    config: TrainConfig, model_config: Optional[ModelConfig] = None,
                    seed_policy: str = "same_as_baseline",
                    dataset_fingerprint: str = "") -> Tuple[RunManifest, Archive]:
    removed = sorted(set(removed), key=instance_sort_key)
    bags = apply_removals(train_bags, removed)
    kept = []
    for b in bags:
        if b.n_present == 0:
            warnings.warn(f"bag {b.id} lost every instance and is dropped", stacklevel=2)
        else:
            kept.append(b)
    if not kept:
        raise PruneError("removal empties the entire training set")
    if seed_policy == "fresh":
        config = dataclasses.replace(config, seed=int(substream(config.seed, "retrain.fresh").integers(2 ** 31)))
    return train(config, kept, val_bags, model_config, dataset_fingerprint, removed_instances=removed)


def evaluate(params: ModelParams, bags: Sequence[Bag]) -> Dict[str, MetricBundle]:
    """Metric bundles against reader 1 and, where available, reader 2."""
    probs = predict_probs(params, bags)
    out = {"reader1": evaluate_probs(probs, [b.reader1 for b in bags], "reader1")}
    if bags and all(b.reader2 is not None for b in bags):
        try:
            out["reader2"] = evaluate_probs(probs, [b.reader2 for b in bags], "reader2")
        except MetricError:
            pass
    return out


@dataclass
class ReportRow:
    label: str
    k: Optional[int]
    removed: int
    total: int
    metrics: Dict[str, MetricBundle]

    @property
    def removal(self) -> str:
        return format_removal(self.removed, self.total)

    def to_dict(self) -> dict:
        return {"label": self.label, "k": self.k, "removed": self.removed, "total": self.total,
                "removal": self.removal, "metrics": {r: m.to_dict() for r, m in self.metrics.items()}}


@dataclass
class PruneReport:
    encoder: str
    misclassified: List[int]
    flagged: Dict[int, Dict[str, List[str]]]
    rows: List[ReportRow]
    variant: str = ""
    checkpoint_mode: str = ""

    @property
    def baseline(self) -> ReportRow:
        return self.rows[0]

    def to_dict(self) -> dict:
        return {"encoder": self.encoder, "misclassified_count": len(self.misclassified),
                "misclassified": self.misclassified, "variant": self.variant,
                "checkpoint_mode": self.checkpoint_mode,
                "flagged": {str(k): v for k, v in self.flagged.items()},
                "rows": [r.to_dict() for r in self.rows]}

    def render_table(self) -> str:
        readers = [r for r in ("reader1", "reader2") if all(r in row.metrics for row in self.rows)]
        head = ["Encoder", "k-value", "% Training Images Removed"]
        for r in readers:
            name = "Reader " + r[-1]
            head += [f"{name} Kappa", f"{name} AUC"]
        lines = [head]
        for i, row in enumerate(self.rows):
            cells = [self.encoder if i == 0 else "", row.label, row.removal]
            for r in readers:
                cells += [f"{row.metrics[r].kappa:.2f}", f"{row.metrics[r].auc:.2f}"]
            lines.append(cells)
        widths = [max(len(l[c]) for l in lines) for c in range(len(head))]
        fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        sep = "-+-".join("-" * w for w in widths)
        return "\n".join([fmt(lines[0]), sep] + [fmt(l) for l in lines[1:]]) + "\n"


def compare_report(baseline: Dict[str, MetricBundle], retrained: Sequence[Tuple[int, int, Dict[str, MetricBundle]]],
                   total: int, encoder: str = "mlp", misclassified: Sequence[int] = (),
                   flagged: Optional[Dict[int, Dict[str, List[str]]]] = None, variant: str = "",
                   checkpoint_mode: str = "") -> PruneReport:
    """Assemble a report; ``retrained`` holds ``(k, union size, metrics)`` per k."""
    rows = [ReportRow("Baseline", None, 0, total, baseline)]
    for k, removed, metrics in retrained:
        rows.append(ReportRow(f"Top {k} removed", k, removed, total, metrics))
    return PruneReport(encoder, list(misclassified), flagged or {}, rows, variant, checkpoint_mode)


@dataclass
class PipelineResult:
    report: PruneReport
    baseline: Tuple[RunManifest, Archive]
    table: Optional[InfluenceTable]
    removed: Dict[int, Set[str]]
    retrained: Dict[int, Tuple[RunManifest, Archive]] = field(default_factory=dict)


def attribute(archive: Archive, dataset: SynthDataset, config: PruneConfig,
              params: Optional[ModelParams] = None) -> Tuple[List[int], Optional[InfluenceTable]]:
    """Misclassified validation ids and the target x training-instance table."""
    params = archive.best().params if params is None else params
    mis = find_misclassified(params, dataset.val)
    if not mis:
        log.info("no misclassified validation bags; nothing to prune")
        return mis, None
    targets = build_targets(params, mis, dataset.val)
    candidates = singletons(dataset.train)
    return mis, influence_table(archive, targets, candidates, config.variant, config.checkpoint_mode)


def run_pipeline(dataset: SynthDataset, train_config: TrainConfig, prune_config: PruneConfig,
                 model_config: Optional[ModelConfig] = None, encoder: str = "mlp",
                 baseline: Optional[Tuple[RunManifest, Archive]] = None) -> PipelineResult:
    """Baseline -> one attribution pass -> retrain for every k -> report on the test split."""
    fp = dataset.fingerprint()
    if baseline is None:
        baseline = train(train_config, dataset.train, dataset.val, model_config, fp)
    manifest, archive = baseline
    model_config = archive.model_config
    base_params = archive.best().params
    total = count_instances(dataset.train)
    mis, table = attribute(archive, dataset, prune_config, base_params)
    base_metrics = evaluate(base_params, dataset.test)

    rows = []
    removed: Dict[int, Set[str]] = {}
    flagged: Dict[int, Dict[str, List[str]]] = {}
    retrained = {}
    for k in prune_config.k_values:
        if table is None:
            removed[k] = set()
            rows.append((k, 0, base_metrics))
            continue
        flags = flag_removals(table, k, prune_config.ranking, prune_config.orientation)
        removed[k] = flags
        flagged[k] = flag_per_target(table, k, prune_config.orientation)
        run = retrain_without(dataset.train, dataset.val, flags, train_config, model_config,
                              prune_config.seed_policy, fp)
        retrained[k] = run
        rows.append((k, len(flags), evaluate(run[1].best().params, dataset.test)))
    report = compare_report(base_metrics, rows, total, encoder, mis, flagged,
                            prune_config.variant, prune_config.checkpoint_mode)
    return PipelineResult(report, baseline, table, removed, retrained)


# -- label audit ----------------------------------------------------------------


def detection_curve(ranked_ids: Sequence, flags: Dict) -> DetectionCurve:
    """Fraction inspected vs fraction of flagged bags found, one point per position."""
    missing = [i for i in ranked_ids if i not in flags]
    if missing:
        raise PruneError(f"no disagreement flag for bags {missing[:5]}")
    hits = np.array([bool(flags[i]) for i in ranked_ids], dtype=float)
    n_flagged = hits.sum()
    if n_flagged == 0:
        raise PruneError("no disagreements to detect")
    B = len(ranked_ids)
    return DetectionCurve(np.arange(1, B + 1) / B, np.cumsum(hits) / n_flagged, list(ranked_ids))


def stratified_subset(bags: Sequence[Bag], size: Optional[int], seed: int) -> List[Bag]:
    """Random subset keeping the pool's agree:disagree ratio (rounded)."""
    if size is None or size >= len(bags):
        return list(bags)
    rng = substream(seed, "audit.subset")
    diff = [b for b in bags if b.reader1 != b.reader2]
    same = [b for b in bags if b.reader1 == b.reader2]
    n_diff = int(np.floor(size * len(diff) / len(bags) + 0.5))
    n_diff = min(n_diff, len(diff))
    n_same = min(size - n_diff, len(same))
    pick_d = rng.choice(len(diff), size=n_diff, replace=False) if n_diff else []
    pick_s = rng.choice(len(same), size=n_same, replace=False) if n_same else []
    chosen = [diff[i] for i in pick_d] + [same[i] for i in pick_s]
    return sorted(chosen, key=lambda b: b.id)


@dataclass
class AuditResult:
    ranked: List[int]
    curve: DetectionCurve
    scores: Dict[int, float]
    subset: List[int]


def simulate_dual_reader_audit(dataset: SynthDataset, archive: Archive, variant: str = "preconditioned_ip",
                               subset_size: Optional[int] = None, seed: int = 0,
                               mode: str = "strict") -> AuditResult:
    """Rank doubly-read training bags by self-influence and score the ranking
    against reader disagreement."""
    pool = [b for b in dataset.train if b.reader2 is not None]
    if not pool:
        raise PruneError("no doubly labeled bags")
    subset = stratified_subset(pool, subset_size, seed)
    flags = {b.id: b.reader1 != b.reader2 for b in subset}
    if not any(flags.values()):
        raise PruneError("no disagreements to detect")
    scores = self_influence_scores(archive, subset, variant, mode)
    ranked = rank_bags_by_self_influence(scores)
    return AuditResult(ranked, detection_curve(ranked, flags), scores, [b.id for b in subset])
