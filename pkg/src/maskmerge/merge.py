"""Merging algorithms and entropy-driven test-time adaptation of merge weights.

Task arithmetic adds a single scaled sum of task vectors to the base model.
AdaMerging instead learns one coefficient per task (task-wise) or per task
and layer (layer-wise) by minimizing prediction entropy on unlabeled data.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine
from .engine import AdamState, GradTape, Tensor, adam_step
from .errors import ContractError, DomainError, ShapeError
from .nn import LayoutEntry, ParamVector, forward_tensor
from .taskvec import TaskVector

TASK_WISE = "task_wise"
LAYER_WISE = "layer_wise"
SCALAR = "scalar"


@dataclass(frozen=True)
class MergeWeights:
    """Merging coefficients: one scalar, one per task, or one per task and layer."""

    kind: str
    values: np.ndarray
    requires_grad: bool = False

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        expected_ndim = {SCALAR: 0, TASK_WISE: 1, LAYER_WISE: 2}
        if self.kind not in expected_ndim:
            raise ContractError(f"unknown merge-weight kind '{self.kind}'")
        if arr.ndim != expected_ndim[self.kind]:
            raise ShapeError(f"{self.kind} weights need ndim {expected_ndim[self.kind]}, got {arr.ndim}")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @staticmethod
    def scalar(value: float) -> "MergeWeights":
        return MergeWeights(SCALAR, np.asarray(float(value)))

    @staticmethod
    def task_wise(n_tasks: int, init: float = 0.3, requires_grad: bool = True) -> "MergeWeights":
        return MergeWeights(TASK_WISE, np.full(n_tasks, init), requires_grad)

    @staticmethod
    def layer_wise(n_tasks: int, n_layers: int, init: float = 0.3,
                   requires_grad: bool = True) -> "MergeWeights":
        return MergeWeights(LAYER_WISE, np.full((n_tasks, n_layers), init), requires_grad)

    def with_values(self, values: np.ndarray) -> "MergeWeights":
        return MergeWeights(self.kind, values, self.requires_grad)

    def check_dims(self, n_tasks: int, n_layers: int) -> None:
        if self.kind == TASK_WISE and self.values.shape != (n_tasks,):
            raise ShapeError(f"expected {n_tasks} task coefficients, got shape {self.values.shape}")
        if self.kind == LAYER_WISE and self.values.shape != (n_tasks, n_layers):
            raise ShapeError(
                f"expected {n_tasks}x{n_layers} coefficients, got shape {self.values.shape}"
            )


@dataclass(frozen=True)
class MergedModel:
    """A merged parameter vector plus a record of how it was produced."""

    params: ParamVector
    provenance: dict


def _mask_fingerprint(mask: np.ndarray | None) -> str | None:
    if mask is None:
        return None
    return hashlib.sha1(np.ascontiguousarray(mask).tobytes()).hexdigest()[:16]


def _check_merge_inputs(theta0: ParamVector, taskvecs: Sequence[TaskVector]) -> None:
    if not taskvecs:
        raise DomainError("merging needs at least one task vector")
    for tv in taskvecs:
        if tv.layout != theta0.layout or tv.spec_hash != theta0.spec_hash:
            raise ContractError("task vectors and base model must share one layout")


def task_arithmetic_merge(
    theta0: ParamVector, taskvecs: Sequence[TaskVector], scaling_coeff: float
) -> MergedModel:
    """theta0 + coeff * sum of task vectors."""
    _check_merge_inputs(theta0, taskvecs)
    acc = np.zeros_like(theta0.data)
    for tv in taskvecs:
        acc = acc + tv.delta
    merged = theta0.with_data(theta0.data + scaling_coeff * acc)
    return MergedModel(merged, {
        "method": "task_arithmetic",
        "scaling_coeff": float(scaling_coeff),
        "task_ids": [tv.task_id for tv in taskvecs],
    })


def adamerging_merge(
    theta0: ParamVector, taskvecs: Sequence[TaskVector], weights: MergeWeights
) -> MergedModel:
    """Per-task or per-task-per-layer weighted sum of task vectors on the base.

    Layer granularity is one named layout block (weights and biases count as
    separate layers).
    """
    _check_merge_inputs(theta0, taskvecs)
    n, n_layers = len(taskvecs), len(theta0.layout)
    w = weights.values
    if weights.kind == SCALAR:
        return task_arithmetic_merge(theta0, taskvecs, float(w))
    weights.check_dims(n, n_layers)
    acc = np.zeros_like(theta0.data)
    if weights.kind == TASK_WISE:
        for i, tv in enumerate(taskvecs):
            acc = acc + w[i] * tv.delta
    else:
        for l, entry in enumerate(theta0.layout):
            sl = slice(entry.offset, entry.offset + entry.size)
            for i, tv in enumerate(taskvecs):
                acc[sl] = acc[sl] + w[i, l] * tv.delta[sl]
    merged = theta0.with_data(theta0.data + acc)
    return MergedModel(merged, {
        "method": f"adamerging_{weights.kind}",
        "weights": w.tolist(),
        "task_ids": [tv.task_id for tv in taskvecs],
    })


def merge_nodes(
    theta0: ParamVector,
    tau_nodes: Sequence[Tensor],
    weights: "Tensor | float",
    kind: str,
    layout: Sequence[LayoutEntry],
) -> Tensor:
    """Graph version of merging, differentiable w.r.t. weights and task vectors.

    ``weights`` is a float for scalar merging, a length-n tensor for
    task-wise, or an n-by-L tensor for layer-wise merging.
    """
    if not tau_nodes:
        raise DomainError("merging needs at least one task vector")
    base = Tensor(theta0.data)
    if kind == SCALAR:
        acc = engine.add_n(tau_nodes)
        coeff = weights if isinstance(weights, Tensor) else Tensor(float(weights))
        return engine.add(base, engine.mul(coeff, acc))
    if not isinstance(weights, Tensor):
        raise ContractError(f"{kind} merging needs a weight tensor")
    n = len(tau_nodes)
    if kind == TASK_WISE:
        if weights.shape != (n,):
            raise ShapeError(f"expected {n} task coefficients, got {weights.shape}")
        parts = []
        for i, tau in enumerate(tau_nodes):
            w_i = engine.reshape(engine.narrow(weights, 0, i, 1), ())
            parts.append(engine.mul(w_i, tau))
        return engine.add(base, engine.add_n(parts))
    if kind == LAYER_WISE:
        n_layers = len(layout)
        if weights.shape != (n, n_layers):
            raise ShapeError(f"expected {n}x{n_layers} coefficients, got {weights.shape}")
        layer_accs = []
        for l, entry in enumerate(layout):
            parts = []
            for i, tau in enumerate(tau_nodes):
                w_il = engine.reshape(
                    engine.narrow(engine.narrow(weights, 0, i, 1), 1, l, 1), ()
                )
                parts.append(engine.mul(w_il, engine.narrow(tau, 0, entry.offset, entry.size)))
            layer_accs.append(engine.add_n(parts))
        return engine.add(base, engine.concat(layer_accs, axis=0))
    raise ContractError(f"unknown merge kind '{kind}'")


def entropy_loss(probs) -> Tensor:
    """Mean Shannon entropy (natural log) of predicted class distributions.

    Rows must lie on the probability simplex; zero probabilities contribute
    zero via a clamped logarithm.
    """
    p = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs, dtype=np.float64))
    if p.ndim != 2:
        raise ShapeError(f"expected N x C probabilities, got shape {p.shape}")
    values = p.data
    if np.any(values < 0.0):
        raise DomainError("negative probabilities")
    if not np.allclose(np.sum(values, axis=1), 1.0, atol=1e-6):
        raise DomainError("probability rows do not sum to one")
    row_neg_entropy = engine.tensor_sum(engine.mul(p, engine.clamped_log(p)), axis=1)
    return engine.neg(engine.tensor_mean(row_neg_entropy))


class BatchCycler:
    """Cycles fixed-size batches through a seeded reshuffled sample pool."""

    def __init__(self, features: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(features) == 0:
            raise DomainError("cannot cycle batches over an empty pool")
        self._features = np.asarray(features, dtype=np.float64)
        self._batch = min(int(batch_size), len(features))
        self._rng = rng
        self._order = rng.permutation(len(features))
        self._cursor = 0

    def next(self) -> np.ndarray:
        n = len(self._features)
        if self._cursor + self._batch > n:
            self._order = self._rng.permutation(n)
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + self._batch]
        self._cursor += self._batch
        return self._features[idx]


def _entropy_of_model(theta_node: Tensor, layout, batches: Sequence[np.ndarray]) -> tuple[Tensor, list[float]]:
    per_task = []
    for batch in batches:
        logits = forward_tensor(theta_node, layout, batch)
        per_task.append(entropy_loss(engine.softmax(logits, axis=1)))
    total = engine.add_n(per_task)
    return total, [t.item() for t in per_task]


def tta_optimize_weights(
    theta0: ParamVector,
    taskvecs: Sequence[TaskVector],
    unlabeled: Sequence[np.ndarray],
    w_init: MergeWeights,
    steps: int,
    lr: float,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[MergeWeights, list[float]]:
    """Adam steps on merge weights minimizing summed per-task prediction entropy.

    One fixed batch per task per step, drawn by cycling each task's shuffled
    unlabeled pool. Returns the final weights and the per-step loss values.
    """
    _check_merge_inputs(theta0, taskvecs)
    if len(unlabeled) != len(taskvecs):
        raise ContractError("need one unlabeled pool per task")
    if steps < 0:
        raise DomainError("steps must be >= 0")
    if not w_init.requires_grad:
        raise ContractError("TTA needs gradient-enabled merge weights")
    w_init.check_dims(len(taskvecs), len(theta0.layout))
    if steps == 0:
        return w_init, []
    root = np.random.default_rng(seed)
    streams = root.spawn(len(taskvecs))
    cyclers = [BatchCycler(pool, batch_size, s) for pool, s in zip(unlabeled, streams)]
    state = AdamState(lr=lr)
    w_values = w_init.values.copy()
    trajectory: list[float] = []
    for _ in range(steps):
        tape = GradTape()
        w_leaf = tape.leaf(w_values)
        tau_nodes = [Tensor(tv.delta) for tv in taskvecs]
        theta_node = merge_nodes(theta0, tau_nodes, w_leaf, w_init.kind, theta0.layout)
        total, _ = _entropy_of_model(theta_node, theta0.layout, [c.next() for c in cyclers])
        grad = tape.gradient(total, w_leaf)
        w_values = adam_step(state, {"w": w_values}, {"w": grad})["w"]
        trajectory.append(total.item())
    return w_init.with_values(w_values), trajectory
