"""Attention-MIL bag classifier built on :mod:`tracemil.autodiff`.

Each instance is embedded by a small MLP encoder, instances are pooled with
tanh attention ``w . tanh(V h_i)`` under a presence mask (absent instances
get an additive -inf before the softmax, so their weight is exactly zero),
and a two-layer head maps the pooled embedding to three class logits.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Graph, GradientVector, ParamLayout

CLASSES = ("mild", "moderate", "severe")
N_CLASSES = len(CLASSES)


class EmptyBagError(ValueError):
    def __init__(self, msg: str = "empty bag"):
        super().__init__(msg)


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    encoder_hidden: Tuple[int, ...] = (32,)
    embed_dim: int = 32
    attn_dim: int = 16
    head_hidden: int = 16
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        shapes = []
        dims = (self.in_dim,) + self.encoder_hidden + (self.embed_dim,)
        for i in range(len(dims) - 1):
            shapes.append((f"enc.W{i + 1}", (dims[i], dims[i + 1])))
            shapes.append((f"enc.b{i + 1}", (dims[i + 1],)))
        shapes += [
            ("attn.V", (self.embed_dim, self.attn_dim)),
            ("attn.w", (self.attn_dim,)),
            ("head.W1", (self.embed_dim, self.head_hidden)),
            ("head.b1", (self.head_hidden,)),
            ("head.W2", (self.head_hidden, N_CLASSES)),
            ("head.b2", (N_CLASSES,)),
        ]
        return shapes

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout.from_shapes(self.param_shapes())


@dataclass
class ModelParams:
    """Flat float64 parameter vector plus the layout that names its blocks."""

    config: ModelConfig
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.config.layout.size,):
            raise ValueError(
                f"parameter vector has {self.flat.size} entries, model needs {self.config.layout.size}")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("non-finite parameters")

    @property
    def layout(self) -> ParamLayout:
        return self.config.layout

    def blocks(self) -> Dict[str, np.ndarray]:
        return self.layout.split(self.flat)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat.copy())

    @classmethod
    def from_blocks(cls, config: ModelConfig, blocks: Dict[str, np.ndarray]) -> "ModelParams":
        return cls(config, config.layout.flatten(blocks))

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(config, np.zeros(config.layout.size))


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    blocks = {}
    for name, shape in config.param_shapes():
        if ".b" in name:
            blocks[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            fan_out = shape[1] if len(shape) > 1 else 1
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            blocks[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams.from_blocks(config, blocks)


@dataclass
class Bag:
    """One visit: N instance feature vectors sharing a bag-level label."""

    id: int
    instances: np.ndarray
    reader1: int
    reader2: Optional[int] = None
    latent_severity: float = 0.0
    presence: Optional[np.ndarray] = None
    split: str = "train"
    spurious: bool = False
    disagreement: bool = False
    signal_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ValueError("a bag needs an (N, F) instance array with N >= 1")
        if self.presence is None:
            self.presence = np.ones(self.n, dtype=bool)
        else:
            self.presence = np.asarray(self.presence, dtype=bool)
            if self.presence.shape != (self.n,):
                raise ValueError("presence mask length must equal instance count")
        if self.reader1 not in range(N_CLASSES):
            raise ValueError(f"invalid label {self.reader1!r}")
        if self.reader2 is not None and self.reader2 not in range(N_CLASSES):
            raise ValueError(f"invalid label {self.reader2!r}")

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def n_present(self) -> int:
        return int(self.presence.sum())

    def present_ids(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.presence)]

    def with_presence(self, presence) -> "Bag":
        return dataclasses.replace(self, presence=np.asarray(presence, dtype=bool).copy())

    def compact(self) -> "Bag":
        """The physically reduced bag holding only present instances."""
        keep = self.presence
        signal = tuple(int(j) for j, i in enumerate(np.flatnonzero(keep)) if i in self.signal_ids)
        return dataclasses.replace(self, instances=self.instances[keep].copy(), presence=None,
                                   signal_ids=signal)


@dataclass
class BagOutput:
    probs: np.ndarray
    attention: np.ndarray
    bag_embedding: np.ndarray
    logits: np.ndarray

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probs))


@lru_cache(maxsize=None)
def build_graph(config: ModelConfig) -> Graph:
    g = Graph()
    x = g.input("instances")
    mask = g.input("mask")
    target = g.input("target")
    p = {name: g.param(name, shape) for name, shape in config.param_shapes()}
    act = g.relu if config.activation == "relu" else g.tanh

    h = x
    n_layers = len(config.encoder_hidden) + 1
    for i in range(1, n_layers + 1):
        h = act(g.affine(h, p[f"enc.W{i}"], p[f"enc.b{i}"]))
    g.output("embeddings", h)

    scores = g.affine(g.tanh(g.affine(h, p["attn.V"])), p["attn.w"], name="attn_scores")
    attn = g.output("attention", g.masked_softmax(scores, mask, name="attention"))
    pooled = g.output("bag_embedding", g.weighted_sum(attn, h, name="pool"))

    hidden = act(g.affine(pooled, p["head.W1"], p["head.b1"]))
    logits = g.output("logits", g.affine(hidden, p["head.W2"], p["head.b2"], name="logits"))
    g.output("probs", g.masked_softmax(logits, name="probs"))
    g.output("loss", g.set_loss(g.cross_entropy(logits, target, name="loss")))
    return g


def _one_hot(label: Optional[int]) -> np.ndarray:
    t = np.zeros(N_CLASSES)
    if label is not None:
        t[label] = 1.0
    return t


def graph_inputs(params: ModelParams, instances: np.ndarray, mask: np.ndarray, label: Optional[int]):
    if instances.shape[1] != params.config.in_dim:
        raise ValueError(f"feature length {instances.shape[1]} != model input dim {params.config.in_dim}")
    inputs = params.blocks()
    inputs["instances"] = instances
    inputs["mask"] = np.asarray(mask, dtype=np.float64)
    inputs["target"] = _one_hot(label)
    return inputs


def encode_instance(params: ModelParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (params.config.in_dim,):
        raise ValueError(f"feature length {features.shape} != model input dim {params.config.in_dim}")
    g = build_graph(params.config)
    out = g.forward(graph_inputs(params, features[None, :], np.ones(1), None))
    return out["embeddings"][0].copy()


def attention_pool(params: ModelParams, embeddings: np.ndarray, presence) -> Tuple[np.ndarray, np.ndarray]:
    """Pool precomputed embeddings; returns (bag_embedding, attention weights)."""
    presence = np.asarray(presence, dtype=bool)
    if not presence.any():
        raise EmptyBagError()
    b = params.blocks()
    scores = np.tanh(embeddings @ b["attn.V"]) @ b["attn.w"]
    z = np.where(presence, scores, -np.inf)
    e = np.exp(z - z[presence].max())
    a = e / e.sum()
    return np.tensordot(a, embeddings, axes=1), a


def classify_bag(params: ModelParams, bag: Bag) -> BagOutput:
    if bag.n_present == 0:
        raise EmptyBagError()
    g = build_graph(params.config)
    out = g.forward(graph_inputs(params, bag.instances, bag.presence, None))
    return BagOutput(out["probs"].copy(), out["attention"].copy(), out["bag_embedding"].copy(),
                     out["logits"].copy())


def bag_loss_and_grad(params: ModelParams, bag: Bag, label: Optional[int] = None) -> Tuple[float, GradientVector]:
    """Cross-entropy of the bag prediction against ``label`` (default reader 1)."""
    label = bag.reader1 if label is None else label
    if label not in range(N_CLASSES):
        raise ValueError(f"invalid label {label!r}")
    if bag.n_present == 0:
        raise EmptyBagError()
    g = build_graph(params.config)
    out = g.forward(graph_inputs(params, bag.instances, bag.presence, label))
    return float(out["loss"]), g.backward()


def bag_loss(params: ModelParams, bag: Bag, label: Optional[int] = None) -> float:
    label = bag.reader1 if label is None else label
    g = build_graph(params.config)
    return float(g.forward(graph_inputs(params, bag.instances, bag.presence, label))["loss"])


def most_attended_instance(params: ModelParams, bag: Bag) -> int:
    attention = classify_bag(params, bag).attention
    # argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(np.where(bag.presence, attention, -1.0)))


def as_singleton_bag(bag: Bag, instance_id: int) -> Bag:
    if not 0 <= instance_id < bag.n or not bag.presence[instance_id]:
        raise ValueError(f"instance {instance_id} is absent or out of range for bag {bag.id}")
    mask = np.zeros(bag.n, dtype=bool)
    mask[instance_id] = True
    return bag.with_presence(mask)


def predict_probs(params: ModelParams, bags) -> np.ndarray:
    return np.array([classify_bag(params, b).probs for b in bags]).reshape(-1, N_CLASSES)
