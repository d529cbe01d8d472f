"""Adam training loop with inverse-frequency sampling, step-level minibatch
logging, checkpoint archives and bit-exact replay verification."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import container
from .autodiff import GradientVector, NonFiniteError
from .metrics import MetricError, micro_auc, weighted_kappa
from .model import (N_CLASSES, Bag, ModelConfig, ModelParams, bag_loss_and_grad, init_params,
                    predict_probs)
from .rng import substream

log = logging.getLogger(__name__)

ARCHIVE_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = "non-finite loss"):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


class ReplayError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint cadence must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    t: int
    m: np.ndarray
    v: np.ndarray
    lr: float

    @classmethod
    def zeros(cls, n: int, lr: float) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n), lr)

    def copy(self) -> "AdamState":
        return AdamState(self.t, self.m.copy(), self.v.copy(), self.lr)


def adam_step(state: AdamState, params: np.ndarray, grads, config: TrainConfig) -> Tuple[np.ndarray, AdamState]:
    """One Adam update with raw (not bias-corrected) moments and decoupled decay.

    ``m <- b1 m + (1 - b1) g``, ``v <- b2 v + (1 - b2) g^2``, then
    ``w <- w - lr * wd * w - lr * m / (sqrt(v) + eps)``.
    """
    g = grads.values if isinstance(grads, GradientVector) else np.asarray(grads, dtype=np.float64)
    w = params.flat if isinstance(params, ModelParams) else np.asarray(params, dtype=np.float64)
    if g.shape != w.shape or state.m.shape != w.shape:
        raise ValueError("gradient, parameter and moment shapes differ")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient entries")
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * (g * g)
    lr = state.lr
    new_w = w - lr * config.weight_decay * w
    new_w = new_w - lr * m / (np.sqrt(v) + config.eps)
    return new_w, AdamState(state.t + 1, m, v, lr)


def weighted_sampler(labels, seed, ids: Optional[Sequence] = None,
                     n_classes: Optional[int] = None) -> List:
    """Draw ``len(labels)`` bag ids with replacement, P(bag) ~ 1 / |its class|.

    ``seed`` may be an int or a ``numpy.random.Generator`` (consumed in place).
    When ``n_classes`` is given every class in ``range(n_classes)`` must occur.
    """
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("cannot sample from an empty dataset")
    ids = list(range(labels.size)) if ids is None else list(ids)
    counts = np.bincount(labels, minlength=n_classes or 0)
    if n_classes is not None:
        missing = [c for c in range(n_classes) if counts[c] == 0]
        if missing:
            raise ValueError(f"class(es) {missing} have zero bags")
    p = 1.0 / counts[labels]
    p = p / p.sum()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picks = rng.choice(labels.size, size=labels.size, replace=True, p=p)
    return [ids[i] for i in picks]


@dataclass
class CheckpointRecord:
    index: int
    step: int
    epoch: int
    params: ModelParams
    adam: AdamState
    membership: List[Tuple[int, List[int]]] = field(default_factory=list)

    def bag_ids(self) -> set:
        return {i for _, ids in self.membership for i in ids}


@dataclass
class Archive:
    """The initial state plus every stored checkpoint of one training run."""

    config: TrainConfig
    model_config: ModelConfig
    initial: CheckpointRecord
    checkpoints: List[CheckpointRecord]
    best_index: Optional[int] = None

    def best(self) -> CheckpointRecord:
        if self.best_index is None:
            return self.checkpoints[-1]
        return next(c for c in self.checkpoints if c.index == self.best_index)

    @property
    def final(self) -> CheckpointRecord:
        return self.checkpoints[-1] if self.checkpoints else self.initial


@dataclass
class RunManifest:
    config_hash: str
    train_config: dict
    model_config: dict
    dataset_fingerprint: str
    seed: int
    checkpoint_files: List[str]
    metrics: List[dict]
    best_checkpoint: Optional[int]
    removed_instances: List[str] = field(default_factory=list)
    file_hashes: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)

    def best_metrics(self) -> Optional[dict]:
        for row in self.metrics:
            if row.get("checkpoint") == self.best_checkpoint:
                return row
        return None


def config_hash(*configs) -> str:
    payload = [dataclasses.asdict(c) if dataclasses.is_dataclass(c) else c for c in configs]
    return hashlib.sha256(container.canonical_json(payload).encode()).hexdigest()


def minibatch_step(params: np.ndarray, state: AdamState, batch: Sequence[Bag], model_config: ModelConfig,
                    config: TrainConfig, step: int) -> Tuple[np.ndarray, AdamState, float]:
    # overflow is detected explicitly below and reported as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        mp = ModelParams(model_config, params)
        total = np.zeros_like(params)
        loss = 0.0
        for bag in batch:
            try:
                l, g = bag_loss_and_grad(mp, bag)
            except NonFiniteError as exc:
                raise TrainingDiverged(step, str(exc)) from None
            total += g.values
            loss += l
        loss /= len(batch)
        if not np.isfinite(loss):
            raise TrainingDiverged(step)
        try:
            new_params, new_state = adam_step(state, params, total / len(batch), config)
        except ValueError as exc:
            raise TrainingDiverged(step, str(exc)) from None
        if not np.all(np.isfinite(new_params)):
            raise TrainingDiverged(step, "non-finite parameters")
    return new_params, new_state, loss


def _val_metrics(params: ModelParams, val_bags: Sequence[Bag]) -> Tuple[Optional[float], Optional[float]]:
    if not val_bags:
        return None, None
    probs = predict_probs(params, val_bags)
    labels = [b.reader1 for b in val_bags]
    try:
        auc = micro_auc(probs, labels)
    except MetricError:
        auc = None
    return auc, weighted_kappa(np.argmax(probs, axis=1), labels)


def train(config: TrainConfig, train_bags: Sequence[Bag], val_bags: Sequence[Bag],
          model_config: Optional[ModelConfig] = None, dataset_fingerprint: str = "",
          removed_instances: Sequence[str] = ()) -> Tuple[RunManifest, Archive]:
    """Train from ``substream(config.seed, "train.init")`` and return (manifest, archive).

    Bags whose presence mask is empty are skipped. The best checkpoint is the
    stored one with the highest validation micro-AUC (reader 1), earliest on
    ties.
    """
    if config.epochs < 1:
        raise ValueError("epochs must be >= 1")
    bags = [b for b in train_bags if b.n_present > 0]
    if not bags:
        raise ValueError("training set is empty")
    if model_config is None:
        model_config = ModelConfig(in_dim=bags[0].instances.shape[1])
    by_id = {b.id: b for b in bags}
    labels = [b.reader1 for b in bags]
    ids = [b.id for b in bags]

    params = init_params(model_config, substream(config.seed, "train.init")).flat
    state = AdamState.zeros(params.size, config.lr)
    initial = CheckpointRecord(0, 0, 0, ModelParams(model_config, params.copy()), state.copy())
    sampler_rng = substream(config.seed, "train.sampler")

    checkpoints: List[CheckpointRecord] = []
    metrics: List[dict] = []
    membership: List[Tuple[int, List[int]]] = []
    for epoch in range(1, config.epochs + 1):
        schedule = weighted_sampler(labels, sampler_rng, ids=ids)
        losses = []
        for start in range(0, len(schedule), config.batch_size):
            batch_ids = schedule[start:start + config.batch_size]
            step = state.t + 1
            params, state, loss = minibatch_step(params, state, [by_id[i] for i in batch_ids],
                                                  model_config, config, step)
            membership.append((state.t, list(batch_ids)))
            losses.append(loss)
        current = ModelParams(model_config, params)
        auc, kappa = _val_metrics(current, val_bags)
        row = {"epoch": epoch, "step": state.t, "train_loss": float(np.mean(losses)),
               "val_micro_auc": auc, "val_kappa": kappa, "checkpoint": None}
        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            rec = CheckpointRecord(len(checkpoints) + 1, state.t, epoch, ModelParams(model_config, params.copy()),
                                   state.copy(), membership)
            checkpoints.append(rec)
            membership = []
            row["checkpoint"] = rec.index
        metrics.append(row)
        log.debug("epoch %d loss %.4f val auc %s", epoch, row["train_loss"], auc)

    best = None
    best_auc = -np.inf
    for row in metrics:
        if row["checkpoint"] is not None and row["val_micro_auc"] is not None and row["val_micro_auc"] > best_auc:
            best_auc = row["val_micro_auc"]
            best = row["checkpoint"]
    if best is None:
        best = checkpoints[-1].index
    archive = Archive(config, model_config, initial, checkpoints, best)
    manifest = RunManifest(
        config_hash=config_hash(config, model_config),
        train_config=dataclasses.asdict(config),
        model_config=_model_config_dict(model_config),
        dataset_fingerprint=dataset_fingerprint,
        seed=config.seed,
        checkpoint_files=[_ckpt_name(c.index) for c in checkpoints],
        metrics=metrics,
        best_checkpoint=best,
        removed_instances=sorted(removed_instances, key=_instance_sort_key),
    )
    return manifest, archive


def _instance_sort_key(key: str):
    bag, idx = key.split(":")
    return int(bag), int(idx)


def _model_config_dict(mc: ModelConfig) -> dict:
    d = dataclasses.asdict(mc)
    d["encoder_hidden"] = list(mc.encoder_hidden)
    return d


def model_config_from_dict(d: Mapping) -> ModelConfig:
    return ModelConfig(**{**d, "encoder_hidden": tuple(d["encoder_hidden"])})


def _ckpt_name(index: int) -> str:
    return f"ckpt_{index:04d}.tmil"


# -- persistence ----------------------------------------------------------------


def _record_meta(rec: CheckpointRecord, archive: Archive) -> dict:
    return {
        "format_version": ARCHIVE_FORMAT_VERSION,
        "index": rec.index, "step": rec.step, "epoch": rec.epoch,
        "t": rec.adam.t, "lr": rec.adam.lr,
        "membership": [[s, list(ids)] for s, ids in rec.membership],
        "model_config": _model_config_dict(archive.model_config),
        "layout": [[b.name, b.offset, list(b.shape)] for b in archive.model_config.layout.blocks],
    }


def encode_record(rec: CheckpointRecord, archive: Archive) -> bytes:
    return container.encode("tracemil.checkpoint",
                            {"params": rec.params.flat, "m": rec.adam.m, "v": rec.adam.v},
                            _record_meta(rec, archive))


def decode_record(data: bytes) -> CheckpointRecord:
    kind, arrays, meta = container.decode(data)
    if kind != "tracemil.checkpoint":
        raise container.ContainerError(f"expected a checkpoint container, found {kind!r}")
    mc = model_config_from_dict(meta["model_config"])
    return CheckpointRecord(
        index=meta["index"], step=meta["step"], epoch=meta["epoch"],
        params=ModelParams(mc, arrays["params"]),
        adam=AdamState(meta["t"], arrays["m"], arrays["v"], meta["lr"]),
        membership=[(s, list(ids)) for s, ids in meta["membership"]],
    )


def save_run(run_dir, manifest: RunManifest, archive: Archive) -> RunManifest:
    """Write ``initial.tmil``, one container per checkpoint and ``manifest.json``."""
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name, rec in [("initial.tmil", archive.initial)] + [(_ckpt_name(c.index), c) for c in archive.checkpoints]:
        data = encode_record(rec, archive)
        (out / name).write_bytes(data)
        hashes[name] = hashlib.sha256(data).hexdigest()
    manifest = dataclasses.replace(manifest, file_hashes=hashes)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_run(run_dir) -> Tuple[RunManifest, Archive]:
    src = Path(run_dir)
    path = src / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {src}")
    manifest = RunManifest.from_dict(json.loads(path.read_text()))
    config = TrainConfig(**manifest.train_config)
    mc = model_config_from_dict(manifest.model_config)
    initial = decode_record((src / "initial.tmil").read_bytes())
    checkpoints = [decode_record((src / name).read_bytes()) for name in manifest.checkpoint_files]
    return manifest, Archive(config, mc, initial, checkpoints, manifest.best_checkpoint)


def apply_removals(bags: Sequence[Bag], removed: Sequence[str]) -> List[Bag]:
    """Clear presence flags for ``"bag:index"`` keys."""
    drop: Dict[int, List[int]] = {}
    for key in removed:
        b, i = _instance_sort_key(key)
        drop.setdefault(b, []).append(i)
    out = []
    for bag in bags:
        if bag.id in drop:
            mask = bag.presence.copy()
            mask[drop[bag.id]] = False
            bag = bag.with_presence(mask)
        out.append(bag)
    return out


def replay_verify(manifest: RunManifest, archive: Archive, train_bags: Sequence[Bag]) -> bool:
    """Re-run every logged step between consecutive checkpoints and compare bit-exactly."""
    bags = {b.id: b for b in apply_removals(train_bags, manifest.removed_instances)}
    config, mc = archive.config, archive.model_config
    prev = archive.initial
    for rec in archive.checkpoints:
        steps = [s for s, _ in rec.membership]
        if steps != list(range(prev.step + 1, rec.step + 1)):
            raise ReplayError(f"checkpoint {rec.index}: membership log does not cover steps "
                              f"{prev.step + 1}..{rec.step}")
        params, state = prev.params.flat.copy(), prev.adam.copy()
        for step, ids in rec.membership:
            missing = [i for i in ids if i not in bags]
            if missing:
                raise ReplayError(f"step {step}: bags {missing} not in the dataset")
            try:
                params, state, _ = minibatch_step(params, state, [bags[i] for i in ids], mc, config, step)
            except TrainingDiverged:
                return False
        if not (np.array_equal(params, rec.params.flat) and np.array_equal(state.m, rec.adam.m)
                and np.array_equal(state.v, rec.adam.v) and state.t == rec.adam.t):
            return False
        prev = rec
    return True


def archive_bytes(run_dir) -> Dict[str, bytes]:
    """All files of a saved run keyed by name (for determinism checks)."""
    return {p.name: p.read_bytes() for p in sorted(Path(run_dir).iterdir()) if p.is_file()}
