"""Small feed-forward classifiers over a flat parameter vector.

All model weights live in one flat float64 vector with a named layout, so
merging arithmetic and mask learning can treat a network as a point in R^d.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import engine
from .engine import AdamState, GradTape, Tensor, adam_step
from .errors import ContractError, DomainError, ShapeError

SPLITS = ("train", "test", "unlabeled")


class LayoutEntry(NamedTuple):
    name: str
    shape: tuple[int, ...]
    offset: int
    size: int


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a ReLU multi-layer perceptron classifier."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ContractError("an MLP needs at least input and output sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ContractError("all layer sizes must be >= 1")
        if self.activation != "relu":
            raise ContractError(f"unsupported activation '{self.activation}'")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def fingerprint(self) -> str:
        text = f"mlp|{','.join(map(str, self.layer_sizes))}|{self.activation}|{self.seed}"
        return hashlib.sha1(text.encode()).hexdigest()


def build_layout(spec: MlpSpec) -> tuple[LayoutEntry, ...]:
    """Named (weight, bias) blocks per layer, contiguous in the flat vector."""
    entries = []
    offset = 0
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        for suffix, shape in (("weight", (fan_in, fan_out)), ("bias", (fan_out,))):
            size = int(np.prod(shape))
            entries.append(LayoutEntry(f"layer{i}.{suffix}", shape, offset, size))
            offset += size
    return tuple(entries)


def layout_dim(layout: Sequence[LayoutEntry]) -> int:
    return sum(e.size for e in layout)


@dataclass(frozen=True)
class ParamVector:
    """Flat model parameters plus the layout that maps them to layer tensors."""

    data: np.ndarray
    layout: tuple[LayoutEntry, ...]
    spec_hash: str

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        d = layout_dim(self.layout)
        if arr.ndim != 1 or arr.shape[0] != d:
            raise ShapeError(f"parameter vector length {arr.shape} does not match layout dim {d}")
        offset = 0
        for e in self.layout:
            if e.offset != offset:
                raise ContractError(f"layout offsets are not contiguous at '{e.name}'")
            offset += e.size
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(data, self.layout, self.spec_hash)

    def block(self, name: str) -> np.ndarray:
        for e in self.layout:
            if e.name == name:
                return self.data[e.offset : e.offset + e.size].reshape(e.shape)
        raise KeyError(name)


@dataclass(frozen=True)
class Dataset:
    """A labelled sample batch tagged with its split role."""

    features: np.ndarray
    labels: np.ndarray
    split: str

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ShapeError(f"features must be 2-D, got {feats.shape}")
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ShapeError("label count must equal feature row count")
        if labels.size and labels.min() < 0:
            raise DomainError("labels must be non-negative class ids")
        if self.split not in SPLITS:
            raise ContractError(f"unknown split '{self.split}'")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.batch_size <= 0 or self.learning_rate <= 0:
            raise ContractError("batch size and learning rate must be positive")


def init_pretrained(spec: MlpSpec) -> ParamVector:
    """Deterministic scaled-uniform fan-in init; biases start at zero."""
    layout = build_layout(spec)
    rng = np.random.default_rng(spec.seed)
    data = np.zeros(layout_dim(layout))
    for e in layout:
        if e.name.endswith("weight"):
            bound = np.sqrt(6.0 / e.shape[0])
            data[e.offset : e.offset + e.size] = rng.uniform(-bound, bound, size=e.size)
    return ParamVector(data, layout, spec.fingerprint())


def _check_params(params: ParamVector, spec: MlpSpec) -> None:
    if params.spec_hash != spec.fingerprint():
        raise ContractError("parameter vector was built for a different model spec")


def forward_tensor(theta: Tensor, layout: Sequence[LayoutEntry], features: np.ndarray) -> Tensor:
    """Differentiable forward pass reading weights out of a flat graph tensor."""
    d = layout_dim(layout)
    if theta.shape != (d,):
        raise ContractError(f"theta shape {theta.shape} does not match layout dim {d}")
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layout[0].shape[0]:
        raise ContractError(f"feature width {x.shape} does not match input size {layout[0].shape[0]}")
    h = Tensor(x)
    n_layers = len(layout) // 2
    ones = Tensor(np.ones((x.shape[0], 1)))
    for i in range(n_layers):
        w_e = layout[2 * i]
        b_e = layout[2 * i + 1]
        w = engine.reshape(engine.narrow(theta, 0, w_e.offset, w_e.size), w_e.shape)
        b = engine.reshape(engine.narrow(theta, 0, b_e.offset, b_e.size), (1, b_e.size))
        h = engine.add(engine.matmul(h, w), engine.matmul(ones, b))
        if i < n_layers - 1:
            h = engine.relu(h)
    return h


def forward(params: ParamVector, spec: MlpSpec, features: np.ndarray) -> np.ndarray:
    """Plain-array forward pass for evaluation; no gradient bookkeeping."""
    _check_params(params, spec)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ContractError(f"feature width {x.shape} does not match input size {spec.input_dim}")
    h = x
    layout = params.layout
    n_layers = len(layout) // 2
    ones = np.ones((x.shape[0], 1))
    for i in range(n_layers):
        w = params.block(layout[2 * i].name)
        b = params.block(layout[2 * i + 1].name).reshape(1, -1)
        h = h @ w + ones @ b
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood via max-subtracted log-softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits rows {n}")
    if labels.size and labels.max() >= c:
        raise DomainError(f"label {labels.max()} out of range for {c} classes")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = engine.tensor_sum(engine.mul(engine.log_softmax(logits, axis=1), Tensor(onehot)), axis=1)
    return engine.neg(engine.tensor_mean(picked))


def fine_tune(theta0: ParamVector, task: Dataset, spec: MlpSpec, cfg: TrainConfig) -> ParamVector:
    """Adam minimization of cross-entropy starting from the shared base weights.

    Batches are drawn by reshuffling the training split each epoch with a
    seeded generator; the trailing short batch is kept. Identical seeds give
    bit-identical results.
    """
    _check_params(theta0, spec)
    if len(task) == 0:
        raise DomainError("cannot fine-tune on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.learning_rate)
    theta = theta0.data.copy()
    n = len(task)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tape = GradTape()
            leaf = tape.leaf(theta)
            logits = forward_tensor(leaf, theta0.layout, task.features[idx])
            loss = cross_entropy(logits, task.labels[idx])
            grad = tape.gradient(loss, leaf)
            theta = adam_step(state, {"theta": theta}, {"theta": grad})["theta"]
    return theta0.with_data(theta)


def evaluate(params: ParamVector, spec: MlpSpec, dataset: Dataset) -> float:
    """Top-1 accuracy of argmax predictions on a labelled split."""
    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty split")
    logits = forward(params, spec, dataset.features)
    predictions = np.argmax(logits, axis=1)
    return float(np.mean(predictions == dataset.labels))
