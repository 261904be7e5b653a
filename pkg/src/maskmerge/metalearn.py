"""Bi-level meta-learning of a shared parameter-space mask.

The outer loop optimizes mask logits so that, after masking and rescaling
every task vector and merging, the merged model makes confident predictions
on unlabeled data from each task. When the merge backend itself has
learnable coefficients, a single inner Adam step updates them before the
outer gradient is taken; the inner gradient is treated as a constant with
respect to the logits (first-order unrolling), so the outer gradient flows
through the re-merged weights but not through the inner derivative itself.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .concrete import (
    ConcreteMaskSample,
    MaskLogits,
    Temperature,
    clamped_uniform,
    concrete_node,
    mask_and_rescale,
    mask_rescale_node,
)
from .engine import AdamState, GradTape, Tensor, adam_step, sigmoid_values
from .errors import ContractError, DomainError
from .merge import (
    LAYER_WISE,
    SCALAR,
    TASK_WISE,
    BatchCycler,
    MergedModel,
    MergeWeights,
    _entropy_of_model,
    _mask_fingerprint,
    adamerging_merge,
    merge_nodes,
    task_arithmetic_merge,
    tta_optimize_weights,
)
from .nn import ParamVector
from .taskvec import TaskVector

TASK_ARITHMETIC_BACKEND = "task_arithmetic"
ADAMERGING_BACKEND = "adamerging"

CONCRETE_EXPECTED = "concrete_expected"
BINARIZED = "binarized"


@dataclass(frozen=True)
class MetaConfig:
    """Settings for the outer mask-learning loop.

    ``alpha`` is the learning rate of the single inner step on merge
    coefficients, ``beta`` the learning rate of the outer step on mask
    logits. Zero learning rates are allowed for diagnostics and freeze the
    corresponding update.
    """

    outer_steps: int = 2000
    alpha: float = 1.0
    beta: float = 1e-3
    temperature: Temperature = field(default_factory=Temperature)
    merge_backend: str = TASK_ARITHMETIC_BACKEND
    scaling_coeff: float = 0.3
    adamerging_kind: str = LAYER_WISE
    weight_init: float = 0.3
    warm_start_weights: bool = False
    batch_size: int = 64
    seed: int = 0
    eval_mask_mode: str = BINARIZED

    def __post_init__(self):
        if self.outer_steps < 1:
            raise ContractError("outer_steps must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("learning rates must be >= 0")
        if self.merge_backend not in (TASK_ARITHMETIC_BACKEND, ADAMERGING_BACKEND):
            raise ContractError(f"unknown merge backend '{self.merge_backend}'")
        if self.adamerging_kind not in (TASK_WISE, LAYER_WISE):
            raise ContractError(f"unknown adamerging kind '{self.adamerging_kind}'")
        if self.eval_mask_mode not in (CONCRETE_EXPECTED, BINARIZED):
            raise ContractError(f"unknown eval mask mode '{self.eval_mask_mode}'")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if isinstance(self.temperature, (int, float)):
            object.__setattr__(self, "temperature", Temperature(float(self.temperature)))


@dataclass(frozen=True)
class MetaStepRecord:
    step: int
    summed_entropy: float
    per_task_entropy: tuple[float, ...]
    mask_sparsity: float
    wall_time: float


@dataclass
class MetaTrace:
    """One record per completed outer step, plus a count of skipped steps."""

    records: list[MetaStepRecord] = field(default_factory=list)
    skipped_steps: int = 0

    def summed_entropies(self) -> list[float]:
        return [r.summed_entropy for r in self.records]

    def as_rows(self) -> list[dict]:
        rows = []
        for r in self.records:
            row = {"step": r.step, "summed_entropy": r.summed_entropy,
                   "mask_sparsity": r.mask_sparsity}
            for i, e in enumerate(r.per_task_entropy):
                row[f"task{i}_entropy"] = e
            rows.append(row)
        return rows


def _init_backend_weights(cfg: MetaConfig, n_tasks: int, n_layers: int,
                          warm: np.ndarray | None) -> "MergeWeights | None":
    if cfg.merge_backend == TASK_ARITHMETIC_BACKEND:
        return None
    if warm is not None:
        kind = TASK_WISE if warm.ndim == 1 else LAYER_WISE
        return MergeWeights(kind, warm, requires_grad=True)
    if cfg.adamerging_kind == TASK_WISE:
        return MergeWeights.task_wise(n_tasks, cfg.weight_init)
    return MergeWeights.layer_wise(n_tasks, n_layers, cfg.weight_init)


def meta_learn_mask(
    theta0: ParamVector,
    taskvecs: Sequence[TaskVector],
    unlabeled: Sequence[np.ndarray],
    cfg: MetaConfig,
) -> tuple[MaskLogits, MetaTrace]:
    """Learn shared mask logits by descending summed per-task entropy.

    Logits start at zero. Each outer step draws fresh relaxed-mask noise,
    masks and rescales every task vector, merges with backend weights
    (re-initialized each step unless warm starting), optionally applies one
    inner Adam step to those weights on their own unlabeled batches, then
    takes one outer Adam step on the logits. Fully deterministic for a
    fixed config.
    """
    if not taskvecs:
        raise DomainError("meta-learning needs at least one task vector")
    if len(unlabeled) != len(taskvecs):
        raise ContractError("need one unlabeled pool per task")
    for tv in taskvecs:
        if tv.layout != theta0.layout or tv.spec_hash != theta0.spec_hash:
            raise ContractError("task vectors and base model must share one layout")
    d = theta0.dim
    n_tasks = len(taskvecs)
    n_layers = len(theta0.layout)
    layout = theta0.layout

    root = np.random.default_rng(cfg.seed)
    noise_rng = root.spawn(1)[0]
    inner_streams = root.spawn(n_tasks)
    outer_streams = root.spawn(n_tasks)
    inner_cyclers = [BatchCycler(p, cfg.batch_size, s) for p, s in zip(unlabeled, inner_streams)]
    outer_cyclers = [BatchCycler(p, cfg.batch_size, s) for p, s in zip(unlabeled, outer_streams)]

    logits = np.zeros(d)
    outer_state = AdamState(lr=cfg.beta)
    trace = MetaTrace()
    warm_weights: np.ndarray | None = None
    optimizable = cfg.merge_backend == ADAMERGING_BACKEND

    for step in range(1, cfg.outer_steps + 1):
        started = time.perf_counter()
        temp = cfg.temperature.value_at(step - 1)
        u = clamped_uniform(noise_rng, d)

        tape = GradTape()
        x_leaf = tape.leaf(logits)
        mask_node = concrete_node(x_leaf, u, temp)
        if float(np.mean(mask_node.data)) <= 1e-6:
            trace.skipped_steps += 1
            continue
        tau_nodes = [mask_rescale_node(tv, mask_node) for tv in taskvecs]

        weights = _init_backend_weights(cfg, n_tasks, n_layers,
                                        warm_weights if cfg.warm_start_weights else None)
        if optimizable:
            w_leaf = tape.leaf(weights.values)
            theta_node = merge_nodes(theta0, tau_nodes, w_leaf, weights.kind, layout)
            inner_total, _ = _entropy_of_model(
                theta_node, layout, [c.next() for c in inner_cyclers]
            )
            gw = tape.gradient(inner_total, w_leaf)
            updated = adam_step(AdamState(lr=cfg.alpha), {"w": weights.values.copy()}, {"w": gw})
            warm_weights = updated["w"]
            # updated coefficients re-enter the graph as constants: the outer
            # gradient sees the re-merge but not the inner derivative
            theta_node = merge_nodes(theta0, tau_nodes, Tensor(warm_weights), weights.kind, layout)
        else:
            theta_node = merge_nodes(theta0, tau_nodes, cfg.scaling_coeff, SCALAR, layout)

        outer_total, per_task = _entropy_of_model(
            theta_node, layout, [c.next() for c in outer_cyclers]
        )
        gx = tape.gradient(outer_total, x_leaf)
        logits = adam_step(outer_state, {"x": logits}, {"x": gx})["x"]

        sparsity = float(np.mean(sigmoid_values(logits) > 0.5))
        trace.records.append(MetaStepRecord(
            step=step,
            summed_entropy=outer_total.item(),
            per_task_entropy=tuple(per_task),
            mask_sparsity=sparsity,
            wall_time=time.perf_counter() - started,
        ))
    return MaskLogits(logits, layout, theta0.spec_hash), trace


def finalize_mask(logits: MaskLogits, mode: str = BINARIZED) -> np.ndarray:
    """Noise-free mask for evaluation: keep probabilities, or their hard threshold."""
    probs = sigmoid_values(logits.values)
    if mode == CONCRETE_EXPECTED:
        return probs
    if mode == BINARIZED:
        return (probs > 0.5).astype(np.float64)
    raise ContractError(f"unknown mask mode '{mode}'")


def _resolve_mask_values(mask, d: int) -> np.ndarray:
    if isinstance(mask, MaskLogits):
        return finalize_mask(mask, BINARIZED)
    if isinstance(mask, ConcreteMaskSample):
        values = mask.values
    else:
        values = np.asarray(mask, dtype=np.float64)
    if values.shape != (d,):
        raise ContractError(f"mask shape {values.shape} does not match parameter dim {d}")
    return values


def concrete_task_arithmetic(
    theta0: ParamVector,
    taskvecs: Sequence[TaskVector],
    mask,
    scaling_coeff: float,
) -> MergedModel:
    """Mask and rescale every task vector, sum, scale, add to the base.

    ``mask`` may be plain mask values, a relaxed sample, or logits (which
    are binarized).
    """
    values = _resolve_mask_values(mask, theta0.dim)
    rescaled = [mask_and_rescale(tv, values) for tv in taskvecs]
    merged = task_arithmetic_merge(theta0, rescaled, scaling_coeff)
    provenance = dict(merged.provenance)
    provenance.update({
        "method": "concrete_task_arithmetic",
        "mask_fingerprint": _mask_fingerprint(values),
        "mask_keep_fraction": float(np.mean(values > 0.5)),
    })
    return MergedModel(merged.params, provenance)


@dataclass(frozen=True)
class TtaConfig:
    """Settings for the coefficient-adaptation phase of masked AdaMerging."""

    steps: int = 100
    lr: float = 1e-3
    kind: str = LAYER_WISE
    weight_init: float = 0.3
    batch_size: int = 64
    seed: int = 0


def concrete_adamerging(
    theta0: ParamVector,
    taskvecs: Sequence[TaskVector],
    mask,
    unlabeled: Sequence[np.ndarray],
    cfg: TtaConfig,
) -> MergedModel:
    """Mask and rescale task vectors, adapt merge coefficients, then merge."""
    values = _resolve_mask_values(mask, theta0.dim)
    rescaled = [mask_and_rescale(tv, values) for tv in taskvecs]
    n_tasks, n_layers = len(taskvecs), len(theta0.layout)
    if cfg.kind == TASK_WISE:
        w_init = MergeWeights.task_wise(n_tasks, cfg.weight_init)
    else:
        w_init = MergeWeights.layer_wise(n_tasks, n_layers, cfg.weight_init)
    weights, trajectory = tta_optimize_weights(
        theta0, rescaled, unlabeled, w_init,
        steps=cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed,
    )
    merged = adamerging_merge(theta0, rescaled, weights)
    provenance = dict(merged.provenance)
    provenance.update({
        "method": "concrete_adamerging",
        "mask_fingerprint": _mask_fingerprint(values),
        "mask_keep_fraction": float(np.mean(values > 0.5)),
        "tta_steps": cfg.steps,
        "tta_loss_first": trajectory[0] if trajectory else None,
        "tta_loss_last": trajectory[-1] if trajectory else None,
    })
    return MergedModel(merged.params, provenance)
