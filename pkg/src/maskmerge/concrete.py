"""Relaxed-Bernoulli ("binary Concrete") masks over parameter space.

A mask entry with logit x keeps its coordinate with probability sigmoid(x).
Hard masks come from the Gumbel-Max comparison; soft masks replace the hard
threshold with a tempered sigmoid so gradients can flow back into the
logits. Masked task vectors are rescaled by the mean mask value to keep
their expected magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine
from .engine import Tensor, sigmoid_values
from .errors import ContractError, DegenerateMaskError, DomainError
from .nn import LayoutEntry
from .taskvec import TaskVector

UNIFORM_EPS = 1e-12
MEAN_EPS = 1e-6


@dataclass(frozen=True)
class MaskLogits:
    """Learnable per-coordinate logits of a shared mask."""

    values: np.ndarray
    layout: tuple[LayoutEntry, ...] | None = None
    spec_hash: str = ""

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise ContractError(f"mask logits must be a flat vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("mask logits contain NaN or Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def keep_probabilities(self) -> np.ndarray:
        return sigmoid_values(self.values)

    def sparsity(self) -> float:
        """Fraction of coordinates whose keep probability exceeds one half."""
        return float(np.mean(self.keep_probabilities() > 0.5))


@dataclass(frozen=True)
class Temperature:
    """Positive relaxation temperature, optionally decayed geometrically."""

    value: float = 0.5
    final: float | None = None
    decay_steps: int | None = None

    def __post_init__(self):
        if self.value <= 0:
            raise DomainError(f"temperature must be positive, got {self.value}")
        if (self.final is None) != (self.decay_steps is None):
            raise ContractError("a schedule needs both a final value and a step count")
        if self.final is not None and (self.final <= 0 or self.decay_steps <= 0):
            raise DomainError("schedule final value and step count must be positive")

    def value_at(self, step: int) -> float:
        if self.final is None:
            return self.value
        frac = min(max(step, 0), self.decay_steps) / self.decay_steps
        return float(self.value * (self.final / self.value) ** frac)


@dataclass(frozen=True)
class ConcreteMaskSample:
    """One relaxed mask draw, with the uniform noise that produced it."""

    values: np.ndarray
    temperature: float
    noise: np.ndarray
    node: Tensor | None = None


def clamped_uniform(rng: np.random.Generator, size: int) -> np.ndarray:
    """Uniform noise clamped into [eps, 1-eps] so its logit stays finite."""
    return np.clip(rng.random(size), UNIFORM_EPS, 1.0 - UNIFORM_EPS)


def logit_values(u: np.ndarray) -> np.ndarray:
    return np.log(u) - np.log1p(-u)


def sample_gumbel(rng: np.random.Generator, shape: int | tuple[int, ...]) -> np.ndarray:
    """Standard Gumbel draws via -log(-log u) on clamped uniforms."""
    u = np.clip(rng.random(shape), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def _logits_array(logits) -> np.ndarray:
    if isinstance(logits, MaskLogits):
        return logits.values
    if isinstance(logits, Tensor):
        return logits.data
    return np.asarray(logits, dtype=np.float64)


def concrete_node(x: Tensor, noise: np.ndarray, temperature: float) -> Tensor:
    """Graph form of one relaxed-Bernoulli draw: sigmoid((x + logit(u)) / temp)."""
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    shift = Tensor(logit_values(noise))
    return engine.sigmoid(engine.div(engine.add(x, shift), float(temperature)))


def sample_concrete(
    logits,
    temperature: float | Temperature,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> ConcreteMaskSample:
    """Draw one relaxed mask; differentiable when ``logits`` is a graph tensor.

    The same uniform noise drives the hard Gumbel-Max draw, so thresholding
    the returned values at one half reproduces ``sample_bernoulli_hard``
    exactly for any temperature.
    """
    temp = temperature.value_at(0) if isinstance(temperature, Temperature) else float(temperature)
    if temp <= 0:
        raise DomainError(f"temperature must be positive, got {temp}")
    x = _logits_array(logits)
    if noise is None:
        if rng is None:
            raise ContractError("sample_concrete needs either an rng or explicit noise")
        noise = clamped_uniform(rng, x.shape[0])
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != x.shape:
            raise ContractError(f"noise shape {noise.shape} does not match logits {x.shape}")
        noise = np.clip(noise, UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    node = None
    if isinstance(logits, Tensor):
        node = concrete_node(logits, noise, temp)
        values = node.data
    else:
        values = sigmoid_values((x + logit_values(noise)) / temp)
    return ConcreteMaskSample(values=values, temperature=temp, noise=noise, node=node)


def sample_bernoulli_hard(
    logits,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Hard Bernoulli(sigmoid(x)) draw via the two-class Gumbel-Max event."""
    x = _logits_array(logits)
    if noise is None:
        if rng is None:
            raise ContractError("sample_bernoulli_hard needs either an rng or explicit noise")
        noise = clamped_uniform(rng, x.shape[0])
    else:
        noise = np.clip(np.asarray(noise, dtype=np.float64), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return (logit_values(noise) + x > 0.0).astype(np.float64)


def binarize(mask) -> np.ndarray:
    """Threshold mask values at one half (strictly greater becomes one)."""
    values = mask.values if isinstance(mask, ConcreteMaskSample) else np.asarray(mask, dtype=np.float64)
    return (values > 0.5).astype(np.float64)


def mask_and_rescale(tau: TaskVector, mask) -> TaskVector:
    """Zero out masked coordinates, divide by the mean mask value.

    The divisor is the arithmetic mean of this mask draw's entries, so a
    mask that keeps a fraction rho of coordinates scales survivors by about
    1/rho, preserving the expected delta magnitude.
    """
    values = mask.values if isinstance(mask, ConcreteMaskSample) else np.asarray(mask, dtype=np.float64)
    if values.shape != tau.delta.shape:
        raise ContractError(f"mask shape {values.shape} does not match task vector {tau.delta.shape}")
    mean = float(np.mean(values))
    if mean <= MEAN_EPS:
        raise DegenerateMaskError(f"mask mean {mean:.3e} is at or below {MEAN_EPS:.0e}")
    return tau.with_delta(tau.delta * values / mean)


def mask_rescale_node(tau: TaskVector, mask_node: Tensor) -> Tensor:
    """Graph form of mask-and-rescale; differentiable w.r.t. the mask."""
    if mask_node.shape != tau.delta.shape:
        raise ContractError(f"mask shape {mask_node.shape} does not match task vector {tau.delta.shape}")
    mean_value = float(np.mean(mask_node.data))
    if mean_value <= MEAN_EPS:
        raise DegenerateMaskError(f"mask mean {mean_value:.3e} is at or below {MEAN_EPS:.0e}")
    masked = engine.mul(Tensor(tau.delta), mask_node)
    return engine.div(masked, engine.tensor_mean(mask_node))


def gumbel_softmax_categorical(
    logits,
    temperature: float,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
):
    """Relaxed categorical sample softmax((logits + g) / temp) on the simplex.

    Returns a graph tensor when ``logits`` is one, otherwise a plain array.
    """
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    x = _logits_array(logits)
    if noise is None:
        if rng is None:
            raise ContractError("gumbel_softmax_categorical needs either an rng or explicit noise")
        noise = sample_gumbel(rng, x.shape)
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != x.shape:
            raise ContractError(f"noise shape {noise.shape} does not match logits {x.shape}")
    if isinstance(logits, Tensor):
        shifted = engine.div(engine.add(logits, Tensor(noise)), float(temperature))
        return engine.softmax(shifted, axis=-1)
    return engine.softmax_values((x + noise) / temperature, axis=-1)
