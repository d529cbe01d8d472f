"""Synthetic multi-instance severity datasets.

Every bag carries a latent severity score thresholded into mild / moderate /
severe. A few "signal" instances per bag hold a class prototype scaled by
where the score sits inside its class range; all other instances are
background noise. The last feature dimension is reserved for a spurious
artifact channel (zero unless :func:`plant_spurious` is applied).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import container
from .model import N_CLASSES, Bag
from .rng import substream

SPLITS = ("train", "val", "test")
# class ranges for sampling latent severity; mild tops out at 5, moderate at 10
SEVERITY_RANGES = ((0.0, 5.0), (5.0, 10.0), (10.0, 20.0))
DATASET_FORMAT_VERSION = 1


def severity_to_class(score: float) -> int:
    """0 = mild for [0, 5], 1 = moderate for (5, 10], 2 = severe above 10."""
    if not score >= 0:
        raise ValueError(f"severity must be non-negative, got {score!r}")
    if score <= 5.0:
        return 0
    if score <= 10.0:
        return 1
    return 2


@dataclass(frozen=True)
class SynthConfig:
    n_bags: int = 300
    instances_per_bag: int = 46
    feature_dim: int = 16
    signal_instances: int = 4
    signal_strength: float = 2.5
    noise_std: float = 1.0
    class_weights: Tuple[float, float, float] = (0.45, 0.35, 0.20)
    spurious_rate: float = 0.0
    spurious_strength: float = 3.0
    spurious_signal_keep: float = 0.25
    disagreement_rate: float = 0.16
    noisy_reader: str = "reader1"
    exact_counts: bool = True
    splits: Tuple[float, float, float] = (0.70, 0.10, 0.20)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        object.__setattr__(self, "splits", tuple(float(s) for s in self.splits))
        if self.n_bags < 1 or self.instances_per_bag < 1:
            raise ValueError("n_bags and instances_per_bag must be >= 1")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2 (one dimension is the spurious channel)")
        if not 0 <= self.signal_instances <= self.instances_per_bag:
            raise ValueError("signal_instances must lie in [0, instances_per_bag]")
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) < 0:
            raise ValueError("split fractions must be three non-negative numbers summing to 1")
        if len(self.class_weights) != 3 or min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
            raise ValueError("class_weights must be three non-negative numbers")
        for name in ("spurious_rate", "disagreement_rate", "spurious_signal_keep"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noisy_reader not in ("reader1", "reader2"):
            raise ValueError("noisy_reader must be 'reader1' or 'reader2'")


@dataclass
class SynthDataset:
    config: SynthConfig
    bags: List[Bag]
    prototypes: np.ndarray

    def split(self, name: str) -> List[Bag]:
        return [b for b in self.bags if b.split == name]

    @property
    def train(self) -> List[Bag]:
        return self.split("train")

    @property
    def val(self) -> List[Bag]:
        return self.split("val")

    @property
    def test(self) -> List[Bag]:
        return self.split("test")

    def by_id(self) -> Dict[int, Bag]:
        return {b.id: b for b in self.bags}

    def replace_bags(self, bags: Sequence[Bag]) -> "SynthDataset":
        return dataclasses.replace(self, bags=list(bags))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in SPLITS:
            h.update(hashlib.sha256(_encode_split(self, name)).digest())
        return h.hexdigest()


def _signal_vector(prototypes: np.ndarray, severity: float, strength: float) -> np.ndarray:
    cls = severity_to_class(severity)
    lo, hi = SEVERITY_RANGES[cls]
    position = (min(severity, hi) - lo) / (hi - lo)
    return strength * (0.5 + position) * prototypes[cls]


def _exact_or_bernoulli(rng: np.random.Generator, n: int, rate: float, exact: bool) -> np.ndarray:
    if exact:
        count = int(np.floor(rate * n + 0.5))
        chosen = np.zeros(n, dtype=bool)
        chosen[rng.choice(n, size=count, replace=False)] = True
        return chosen
    return rng.random(n) < rate


def split_sizes(n: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    n_train = int(np.floor(fractions[0] * n + 0.5))
    n_val = int(np.floor(fractions[1] * n + 0.5))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def generate(config: SynthConfig) -> SynthDataset:
    """Clean dataset: severity, labels, signal instances and splits only."""
    B, N, F = config.n_bags, config.instances_per_bag, config.feature_dim
    proto_rng = substream(config.seed, "synth.prototypes")
    raw = proto_rng.normal(size=(F - 1, N_CLASSES))
    if F - 1 >= N_CLASSES:
        raw, _ = np.linalg.qr(raw)
    prototypes = np.zeros((N_CLASSES, F))
    prototypes[:, :F - 1] = (raw / np.linalg.norm(raw, axis=0)).T

    rng = substream(config.seed, "synth.bags")
    weights = np.asarray(config.class_weights) / sum(config.class_weights)
    classes = rng.choice(N_CLASSES, size=B, p=weights)
    split_rng = substream(config.seed, "synth.splits")
    order = split_rng.permutation(B)
    n_train, n_val, _ = split_sizes(B, config.splits)
    split_of = np.empty(B, dtype=object)
    split_of[order[:n_train]] = "train"
    split_of[order[n_train:n_train + n_val]] = "val"
    split_of[order[n_train + n_val:]] = "test"

    bags = []
    for i in range(B):
        lo, hi = SEVERITY_RANGES[classes[i]]
        severity = float(rng.uniform(lo, hi))
        label = severity_to_class(severity)
        x = rng.normal(scale=config.noise_std, size=(N, F))
        x[:, -1] = 0.0
        signal_ids = tuple(sorted(int(j) for j in rng.choice(N, size=config.signal_instances, replace=False)))
        for j in signal_ids:
            x[j] += _signal_vector(prototypes, severity, config.signal_strength)
        bags.append(Bag(id=i, instances=x, reader1=label, reader2=None, latent_severity=severity,
                        split=str(split_of[i]), signal_ids=signal_ids))
    return SynthDataset(config, bags, prototypes)


def plant_spurious(dataset: SynthDataset, rate: float, strength: float, seed: int,
                   signal_keep: Optional[float] = None) -> SynthDataset:
    """Add a label-correlated artifact channel to a ``rate`` fraction of training bags.

    In corrupted training bags the last feature of every instance is set to
    ``strength * (label - 1)`` (plus small noise) and the genuine class signal
    is damped to ``signal_keep`` of its size. Validation and test bags get the
    same channel with a label-independent class code, so the artifact carries
    no information outside training.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    cfg = dataset.config
    keep = cfg.spurious_signal_keep if signal_keep is None else signal_keep
    if rate == 0.0:
        return dataset.replace_bags([dataclasses.replace(b, spurious=False) for b in dataset.bags])

    rng = substream(seed, "synth.spurious")
    train_idx = [i for i, b in enumerate(dataset.bags) if b.split == "train"]
    chosen = set(np.asarray(train_idx)[_exact_or_bernoulli(rng, len(train_idx), rate, cfg.exact_counts)].tolist())
    jitter = 0.1 * cfg.noise_std

    out = []
    for i, b in enumerate(dataset.bags):
        x = b.instances.copy()
        if b.split == "train":
            if i not in chosen:
                out.append(dataclasses.replace(b, spurious=False))
                continue
            code = b.reader1
            signal = _signal_vector(dataset.prototypes, b.latent_severity, cfg.signal_strength)
            for j in b.signal_ids:
                x[j] -= (1.0 - keep) * signal
        else:
            code = int(rng.integers(N_CLASSES))
        x[:, -1] = strength * (code - 1) + jitter * rng.normal(size=b.n)
        out.append(dataclasses.replace(b, instances=x, spurious=True))
    return dataset.replace_bags(out)


def simulate_second_reader(dataset: SynthDataset, rate: float, seed: int,
                           noisy_reader: Optional[str] = None) -> SynthDataset:
    """Give a ``rate`` fraction of bags an adjacent-class second opinion.

    With ``noisy_reader == "reader1"`` the training label (reader 1) is the
    one moved off the thresholded class and reader 2 keeps it; with
    ``"reader2"`` the roles are swapped.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    cfg = dataset.config
    noisy_reader = cfg.noisy_reader if noisy_reader is None else noisy_reader
    rng = substream(seed, "synth.reader2")
    flip = _exact_or_bernoulli(rng, len(dataset.bags), rate, cfg.exact_counts)
    coin = rng.random(len(dataset.bags))
    out = []
    for i, b in enumerate(dataset.bags):
        clean = b.reader1
        if not flip[i]:
            out.append(dataclasses.replace(b, reader2=clean, disagreement=False))
            continue
        other = adjacent_class(clean, coin[i])
        if noisy_reader == "reader1":
            out.append(dataclasses.replace(b, reader1=other, reader2=clean, disagreement=True))
        else:
            out.append(dataclasses.replace(b, reader2=other, disagreement=True))
    return dataset.replace_bags(out)


def adjacent_class(label: int, u: float) -> int:
    if label == 0:
        return 1
    if label == 2:
        return 1
    return 0 if u < 0.5 else 2


def make_dataset(config: SynthConfig) -> SynthDataset:
    """generate -> plant_spurious -> simulate_second_reader, all from config.seed."""
    ds = generate(config)
    ds = plant_spurious(ds, config.spurious_rate, config.spurious_strength, config.seed)
    return simulate_second_reader(ds, config.disagreement_rate, config.seed)


# -- persistence ----------------------------------------------------------------


def _config_dict(config: SynthConfig) -> dict:
    d = dataclasses.asdict(config)
    d["class_weights"] = list(config.class_weights)
    d["splits"] = list(config.splits)
    return d


def _encode_split(dataset: SynthDataset, name: str) -> bytes:
    bags = dataset.split(name)
    F = dataset.config.feature_dim
    features = np.concatenate([b.instances for b in bags]) if bags else np.zeros((0, F))
    presence = np.concatenate([b.presence.astype(np.float64) for b in bags]) if bags else np.zeros(0)
    records = [{
        "id": b.id, "reader1": b.reader1, "reader2": b.reader2,
        "latent_severity": b.latent_severity, "n": b.n,
        "spurious": b.spurious, "disagreement": b.disagreement,
        "signal_ids": list(b.signal_ids),
    } for b in bags]
    meta = {"format_version": DATASET_FORMAT_VERSION, "split": name, "feature_dim": F, "bags": records}
    return container.encode("tracemil.dataset_split",
                            {"features": features, "presence": presence, "prototypes": dataset.prototypes},
                            meta)


def save_dataset(dataset: SynthDataset, out_dir) -> str:
    """Write one container per split plus ``dataset.json``; returns the fingerprint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in SPLITS:
        data = _encode_split(dataset, name)
        path = out / f"{name}.tmil"
        path.write_bytes(data)
        files[name] = hashlib.sha256(data).hexdigest()
    fp = dataset.fingerprint()
    index = {"format_version": DATASET_FORMAT_VERSION, "config": _config_dict(dataset.config),
             "fingerprint": fp, "files": {f"{k}.tmil": v for k, v in files.items()}}
    (out / "dataset.json").write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")
    return fp


def load_dataset(in_dir) -> SynthDataset:
    src = Path(in_dir)
    index_path = src / "dataset.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no dataset.json in {src}")
    index = json.loads(index_path.read_text())
    cfg = index["config"]
    config = SynthConfig(**{**cfg, "class_weights": tuple(cfg["class_weights"]), "splits": tuple(cfg["splits"])})
    bags = []
    prototypes = None
    for name in SPLITS:
        arrays, meta = container.read(src / f"{name}.tmil", "tracemil.dataset_split")
        prototypes = arrays["prototypes"]
        start = 0
        for r in meta["bags"]:
            n = r["n"]
            bags.append(Bag(id=r["id"], instances=arrays["features"][start:start + n],
                            reader1=r["reader1"], reader2=r["reader2"],
                            latent_severity=r["latent_severity"],
                            presence=arrays["presence"][start:start + n] > 0.5, split=name,
                            spurious=r["spurious"], disagreement=r["disagreement"],
                            signal_ids=tuple(r["signal_ids"])))
            start += n
    bags.sort(key=lambda b: b.id)
    return SynthDataset(config, bags, prototypes)
