"""Task-vector algebra and gradient-free merging baselines.

A task vector is the parameter delta between a fine-tuned model and the
shared base model; all baselines here operate coordinate-wise on those
flat deltas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError
from .nn import LayoutEntry, ParamVector, layout_dim


@dataclass(frozen=True)
class TaskVector:
    """Flat delta against a base parameter vector, tagged with its task id."""

    delta: np.ndarray
    layout: tuple[LayoutEntry, ...]
    spec_hash: str
    task_id: str = ""

    def __post_init__(self):
        arr = np.array(self.delta, dtype=np.float64)
        d = layout_dim(self.layout)
        if arr.ndim != 1 or arr.shape[0] != d:
            raise ShapeError(f"delta length {arr.shape} does not match layout dim {d}")
        arr.flags.writeable = False
        object.__setattr__(self, "delta", arr)

    @property
    def dim(self) -> int:
        return self.delta.shape[0]

    def with_delta(self, delta: np.ndarray, task_id: str | None = None) -> "TaskVector":
        return TaskVector(delta, self.layout, self.spec_hash,
                          self.task_id if task_id is None else task_id)


def _check_shared_layout(items: Sequence) -> None:
    first = items[0]
    for item in items[1:]:
        if item.layout != first.layout or item.spec_hash != first.spec_hash:
            raise ContractError("all operands must share one layout and model spec")


def compute_task_vector(theta_i: ParamVector, theta_0: ParamVector, task_id: str = "") -> TaskVector:
    """Delta of a fine-tuned model against the base: theta_i - theta_0."""
    _check_shared_layout([theta_i, theta_0])
    return TaskVector(theta_i.data - theta_0.data, theta_0.layout, theta_0.spec_hash, task_id)


def apply_task_vector(theta_0: ParamVector, tau: TaskVector) -> ParamVector:
    _check_shared_layout([theta_0, tau])
    return theta_0.with_data(theta_0.data + tau.delta)


def weight_average(models: Sequence[ParamVector]) -> ParamVector:
    """Elementwise arithmetic mean of model weights."""
    if not models:
        raise DomainError("weight_average needs at least one model")
    _check_shared_layout(models)
    stacked = np.stack([m.data for m in models], axis=0)
    return models[0].with_data(np.mean(stacked, axis=0))


def sum_scale(taskvecs: Sequence[TaskVector], coeff: float) -> TaskVector:
    """coeff times the left-to-right sum of the task vectors."""
    if not taskvecs:
        raise DomainError("sum_scale needs at least one task vector")
    _check_shared_layout(taskvecs)
    acc = np.zeros_like(taskvecs[0].delta)
    for tv in taskvecs:
        acc = acc + tv.delta
    return taskvecs[0].with_delta(coeff * acc, task_id="sum")


def trim_by_magnitude(delta: np.ndarray, trim_fraction: float) -> np.ndarray:
    """Keep the ceil(k*d) largest-magnitude entries of one vector, zero the rest.

    Ties at the cut are broken by index (earlier entries win), which makes the
    selection deterministic; exact magnitude ties have measure zero on real
    training deltas.
    """
    d = delta.shape[0]
    keep = math.ceil(trim_fraction * d)
    order = np.argsort(-np.abs(delta), kind="stable")
    kept_idx = order[:keep]
    trimmed = np.zeros_like(delta)
    trimmed[kept_idx] = delta[kept_idx]
    return trimmed


def ties_merge(taskvecs: Sequence[TaskVector], trim_fraction: float) -> TaskVector:
    """Trim, elect sign, disjoint-merge a set of task vectors.

    Per coordinate: trim each vector to its top-magnitude entries (globally
    over the flat vector), elect the sign of the summed trimmed values (a
    zero sum elects +), then average the trimmed values that are nonzero and
    agree with the elected sign. Coordinates where every trimmed value is
    zero stay zero.
    """
    if not taskvecs:
        raise DomainError("ties_merge needs at least one task vector")
    if not 0.0 < trim_fraction <= 1.0:
        raise DomainError(f"trim fraction must be in (0, 1], got {trim_fraction}")
    _check_shared_layout(taskvecs)
    trimmed = np.stack([trim_by_magnitude(tv.delta, trim_fraction) for tv in taskvecs], axis=0)
    elected = np.where(np.sum(trimmed, axis=0) >= 0.0, 1.0, -1.0)
    agrees = (np.sign(trimmed) == elected) & (trimmed != 0.0)
    counts = np.sum(agrees, axis=0)
    totals = np.sum(np.where(agrees, trimmed, 0.0), axis=0)
    merged = np.divide(totals, counts, out=np.zeros_like(totals), where=counts > 0)
    return taskvecs[0].with_delta(merged, task_id="ties")
