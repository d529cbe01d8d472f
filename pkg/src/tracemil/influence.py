"""TracIn-style influence over Adam checkpoints.

For each stored checkpoint ``t`` (learning rate ``lr_t``, raw moments
``m_t``, ``v_t``) and singleton examples ``z'`` (target) and ``z``
(candidate) with loss gradients ``g'`` and ``g``, the per-checkpoint
contribution is

* ``literal``:           lr_t * sum_p m_p / (sqrt(v_p) + eps) * g'_p * g_p
* ``update_dot``:        lr_t * sum_p g'_p * m_p / (sqrt(v_p) + eps)
* ``preconditioned_ip``: lr_t * sum_p g'_p * g_p / (sqrt(v_p) + eps)

summed over included checkpoints and divided by the training batch size.
Positive scores mean the candidate lowered the target's loss.

In ``strict`` mode a checkpoint counts only if the candidate's bag was drawn
in some minibatch since the previous checkpoint; ``tracincp`` mode counts
every checkpoint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import Bag, ModelParams, as_singleton_bag, bag_loss_and_grad
from .train import AdamState, Archive

VARIANTS = ("literal", "update_dot", "preconditioned_ip")
MODES = ("strict", "tracincp")
TABLE_HEADER = ("target_id", "candidate_id", "variant", "checkpoints_used", "score")

# candidates per chunk in the elementwise product kernel
_CHUNK = 128


class InfluenceError(ValueError):
    pass


def instance_key(bag_id: int, instance: int) -> str:
    return f"{bag_id}:{instance}"


def parse_key(key: str) -> Tuple[int, int]:
    bag, idx = key.split(":")
    return int(bag), int(idx)


def singleton_key(bag: Bag) -> str:
    present = bag.present_ids()
    if len(present) != 1:
        raise InfluenceError(f"bag {bag.id} has {len(present)} present instances; a singleton is required")
    return instance_key(bag.id, present[0])


def singletons(bags: Sequence[Bag]) -> List[Bag]:
    """Every present instance of every bag as a singleton bag, in key order."""
    out = []
    for b in sorted(bags, key=lambda b: b.id):
        out.extend(as_singleton_bag(b, i) for i in b.present_ids())
    return out


@dataclass(frozen=True)
class InfluenceScore:
    target_id: str
    candidate_id: str
    variant: str
    score: float
    checkpoints_used: int


@dataclass
class InfluenceTable:
    target_ids: List[str]
    candidate_ids: List[str]
    variant: str
    mode: str
    scores: np.ndarray
    checkpoints_used: np.ndarray

    def score(self, target_id: str, candidate_id: str) -> InfluenceScore:
        i = self.target_ids.index(target_id)
        j = self.candidate_ids.index(candidate_id)
        return InfluenceScore(target_id, candidate_id, self.variant, float(self.scores[i, j]),
                              int(self.checkpoints_used[j]))

    def rows(self):
        for i, t in enumerate(self.target_ids):
            for j, c in enumerate(self.candidate_ids):
                yield InfluenceScore(t, c, self.variant, float(self.scores[i, j]), int(self.checkpoints_used[j]))

    def write_tsv(self, path) -> None:
        write_scores_tsv(path, self.rows())


def write_scores_tsv(path, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for s in scores:
            w.writerow([s.target_id, s.candidate_id, s.variant, s.checkpoints_used, repr(float(s.score))])


def read_table_tsv(path) -> InfluenceTable:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if tuple(reader.fieldnames or ()) != TABLE_HEADER:
            raise InfluenceError(f"{path}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    targets = list(dict.fromkeys(r["target_id"] for r in rows))
    cands = list(dict.fromkeys(r["candidate_id"] for r in rows))
    variants = {r["variant"] for r in rows}
    if len(variants) > 1:
        raise InfluenceError(f"{path}: mixed variants {sorted(variants)}")
    scores = np.full((len(targets), len(cands)), np.nan)
    used = np.zeros(len(cands), dtype=int)
    ti = {t: i for i, t in enumerate(targets)}
    ci = {c: j for j, c in enumerate(cands)}
    for r in rows:
        scores[ti[r["target_id"]], ci[r["candidate_id"]]] = float(r["score"])
        used[ci[r["candidate_id"]]] = int(r["checkpoints_used"])
    if np.isnan(scores).any():
        raise InfluenceError(f"{path}: table is incomplete")
    return InfluenceTable(targets, cands, variants.pop() if variants else "literal", "unknown", scores, used)


def _check_variant(variant: str, mode: str) -> None:
    if variant not in VARIANTS:
        raise InfluenceError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    if mode not in MODES:
        raise InfluenceError(f"unknown checkpoint mode {mode!r}; valid: {', '.join(MODES)}")


def singleton_grad(params: ModelParams, bag: Bag) -> np.ndarray:
    """Loss gradient of a singleton bag under its visit's reader-1 label."""
    singleton_key(bag)
    _, g = bag_loss_and_grad(params, bag.compact(), bag.reader1)
    return g.values


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[i, j] = sum_p a[i, p] * b[j, p]`` with a per-pair summation order
    that does not depend on how many rows are evaluated together."""
    out = np.empty((a.shape[0], b.shape[0]))
    for s in range(0, b.shape[0], _CHUNK):
        blk = b[s:s + _CHUNK]
        out[:, s:s + blk.shape[0]] = np.sum(a[:, None, :] * blk[None, :, :], axis=-1)
    return out


def checkpoint_contribution(adam: AdamState, eps: float, variant: str,
                            gt: np.ndarray, gc: np.ndarray) -> np.ndarray:
    """Unnormalized (targets x candidates) scores at one checkpoint from stacked gradients."""
    # coordinates with no gradient history (v == 0, hence m == 0) get no weight
    v = adam.v
    pre = np.where(v > 0, 1.0 / (np.sqrt(v) + eps), 0.0)
    lr = adam.lr
    if variant == "literal":
        return lr * _rowdot(gt * (adam.m * pre), gc)
    if variant == "preconditioned_ip":
        return lr * _rowdot(gt * pre, gc)
    direction = (adam.m * pre)[None, :]
    col = lr * _rowdot(gt, direction)
    return np.repeat(col, gc.shape[0], axis=1)


def influence_table(archive: Archive, targets: Sequence[Bag], candidates: Sequence[Bag],
                    variant: str = "literal", mode: str = "strict",
                    batch_size: Optional[int] = None) -> InfluenceTable:
    """Score every (target, candidate) pair; rows and columns keep input order."""
    _check_variant(variant, mode)
    if not targets or not candidates:
        raise InfluenceError("targets and candidates must be non-empty")
    t_keys = [singleton_key(b) for b in targets]
    c_keys = [singleton_key(b) for b in candidates]
    b = archive.config.batch_size if batch_size is None else batch_size
    eps = archive.config.eps
    total = np.zeros((len(targets), len(candidates)))
    used = np.zeros(len(candidates), dtype=int)
    grad_cache: Dict[str, np.ndarray] = {}
    for rec in archive.checkpoints:
        if mode == "strict":
            drawn = rec.bag_ids()
            include = np.array([c.id in drawn for c in candidates])
        else:
            include = np.ones(len(candidates), dtype=bool)
        if not include.any():
            continue
        grad_cache.clear()

        def grad(bag, key):
            if key not in grad_cache:
                grad_cache[key] = singleton_grad(rec.params, bag)
            return grad_cache[key]

        gt = np.array([grad(bag, k) for bag, k in zip(targets, t_keys)])
        idx = np.flatnonzero(include)
        gc = np.array([grad(candidates[j], c_keys[j]) for j in idx])
        contrib = checkpoint_contribution(rec.adam, eps, variant, gt, gc)
        total[:, idx] += contrib
        used[idx] += 1
    return InfluenceTable(t_keys, c_keys, variant, mode, total / b, used)


def tracin_pair(archive: Archive, z_prime: Bag, z: Bag, variant: str = "literal",
                mode: str = "strict", batch_size: Optional[int] = None) -> InfluenceScore:
    table = influence_table(archive, [z_prime], [z], variant, mode, batch_size)
    return table.score(table.target_ids[0], table.candidate_ids[0])


@dataclass
class SelfInfluenceMatrix:
    bag_id: int
    instance_ids: List[int]
    matrix: np.ndarray
    variant: str

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.matrix)


def self_influence_matrix(archive: Archive, bag: Bag, variant: str = "literal",
                          mode: str = "strict") -> SelfInfluenceMatrix:
    """Pairwise scores among the bag's present instances, each as a singleton."""
    if bag.n_present < 1:
        raise InfluenceError(f"bag {bag.id} has no present instances")
    ids = bag.present_ids()
    singles = [as_singleton_bag(bag, i) for i in ids]
    table = influence_table(archive, singles, singles, variant, mode)
    return SelfInfluenceMatrix(bag.id, ids, table.scores, variant)


def bag_self_influence_score(matrix: SelfInfluenceMatrix) -> float:
    return float(np.max(matrix.diagonal))


def self_influence_scores(archive: Archive, bags: Sequence[Bag], variant: str = "preconditioned_ip",
                          mode: str = "strict") -> Dict[int, float]:
    return {b.id: bag_self_influence_score(self_influence_matrix(archive, b, variant, mode)) for b in bags}


def rank_bags_by_self_influence(scores: Dict) -> List:
    """Bag ids by descending score; equal scores in ascending id order."""
    for k, s in scores.items():
        if not np.isfinite(s):
            raise InfluenceError(f"non-finite self-influence for bag {k}")
    return sorted(scores, key=lambda k: (-scores[k], k))


def write_ranking_tsv(path, scores: Dict, variant: str, checkpoints_used: int = 0) -> List:
    """Self-influence ranking in the influence-table layout (target = candidate = bag)."""
    ranked = rank_bags_by_self_influence(scores)
    write_scores_tsv(path, (InfluenceScore(str(k), str(k), variant, float(scores[k]), checkpoints_used)
                            for k in ranked))
    return ranked
