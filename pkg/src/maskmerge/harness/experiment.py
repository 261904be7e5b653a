"""End-to-end pipelines: pre-train, fine-tune, merge with every requested
method, evaluate, and assemble a report. Also the held-out-task protocol
where merging may only touch the seen tasks' vectors and unlabeled data."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, DomainError, PipelineError
from ..merge import MergedModel, MergeWeights, adamerging_merge, task_arithmetic_merge, tta_optimize_weights
from ..metalearn import (
    ADAMERGING_BACKEND,
    TASK_ARITHMETIC_BACKEND,
    MetaTrace,
    concrete_adamerging,
    concrete_task_arithmetic,
    finalize_mask,
    meta_learn_mask,
)
from ..nn import ParamVector, evaluate, fine_tune, init_pretrained
from ..taskvec import compute_task_vector, ties_merge, weight_average
from .config import ExperimentConfig, derive_seed
from .datagen import TaskFamily, generate_task_family
from .report import EvalReport, MethodResult


@dataclass
class ExperimentContext:
    """Everything a merging method needs, assembled once per run."""

    cfg: ExperimentConfig
    family: TaskFamily
    theta0: ParamVector
    finetuned: list[ParamVector]
    taskvecs: list  # TaskVector per task, in family order
    seen_ids: tuple[str, ...]
    unseen_ids: tuple[str, ...]

    @property
    def seen_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.family.tasks) if t.task_id in self.seen_ids]

    def seen_taskvecs(self) -> list:
        return [self.taskvecs[i] for i in self.seen_indices]

    def seen_unlabeled(self) -> list[np.ndarray]:
        return [self.family.tasks[i].unlabeled.features for i in self.seen_indices]


@dataclass
class MethodOutput:
    result: MethodResult
    merged: MergedModel | None = None
    trace: MetaTrace | None = None


@dataclass
class ExperimentResult:
    report: EvalReport
    context: ExperimentContext
    models: dict[str, MergedModel] = field(default_factory=dict)
    traces: dict[str, MetaTrace] = field(default_factory=dict)


def _evaluate_merged(ctx: ExperimentContext, merged: MergedModel, method: str,
                     extras: dict | None = None) -> MethodOutput:
    metrics = {
        t.task_id: evaluate(merged.params, ctx.cfg.model, t.test)
        for t in ctx.family.tasks
    }
    all_extras = {"provenance": merged.provenance}
    if extras:
        all_extras.update(extras)
    return MethodOutput(MethodResult(method, metrics, all_extras), merged=merged)


def _method_individual(ctx: ExperimentContext) -> MethodOutput:
    metrics = {
        t.task_id: evaluate(theta, ctx.cfg.model, t.test)
        for theta, t in zip(ctx.finetuned, ctx.family.tasks)
    }
    return MethodOutput(MethodResult("individual", metrics, {"provenance": {"method": "individual"}}))


def _method_pretrained(ctx: ExperimentContext) -> MethodOutput:
    metrics = {
        t.task_id: evaluate(ctx.theta0, ctx.cfg.model, t.test)
        for t in ctx.family.tasks
    }
    return MethodOutput(MethodResult("pretrained", metrics, {"provenance": {"method": "pretrained"}}))


def _method_weight_average(ctx: ExperimentContext) -> MethodOutput:
    models = [ctx.finetuned[i] for i in ctx.seen_indices]
    merged = MergedModel(weight_average(models), {
        "method": "weight_average", "task_ids": list(ctx.seen_ids),
    })
    return _evaluate_merged(ctx, merged, "weight_average")


def _method_task_arithmetic(ctx: ExperimentContext) -> MethodOutput:
    merged = task_arithmetic_merge(ctx.theta0, ctx.seen_taskvecs(), ctx.cfg.scaling_coeff)
    return _evaluate_merged(ctx, merged, "task_arithmetic")


def _method_ties_merging(ctx: ExperimentContext) -> MethodOutput:
    merged_delta = ties_merge(ctx.seen_taskvecs(), ctx.cfg.ties_trim_fraction)
    merged = task_arithmetic_merge(ctx.theta0, [merged_delta], ctx.cfg.scaling_coeff)
    provenance = dict(merged.provenance)
    provenance.update({
        "method": "ties_merging",
        "trim_fraction": ctx.cfg.ties_trim_fraction,
        "task_ids": list(ctx.seen_ids),
    })
    return _evaluate_merged(ctx, MergedModel(merged.params, provenance), "ties_merging")


def _run_adamerging(ctx: ExperimentContext, kind: str, method: str) -> MethodOutput:
    taskvecs = ctx.seen_taskvecs()
    n, n_layers = len(taskvecs), len(ctx.theta0.layout)
    if kind == "task_wise":
        w_init = MergeWeights.task_wise(n, ctx.cfg.tta.weight_init)
    else:
        w_init = MergeWeights.layer_wise(n, n_layers, ctx.cfg.tta.weight_init)
    weights, trajectory = tta_optimize_weights(
        ctx.theta0, taskvecs, ctx.seen_unlabeled(), w_init,
        steps=ctx.cfg.tta.steps, lr=ctx.cfg.tta.lr,
        batch_size=ctx.cfg.tta.batch_size, seed=ctx.cfg.tta.seed,
    )
    merged = adamerging_merge(ctx.theta0, taskvecs, weights)
    provenance = dict(merged.provenance)
    provenance["task_ids"] = list(ctx.seen_ids)
    extras = {
        "tta_loss_first": trajectory[0] if trajectory else None,
        "tta_loss_last": trajectory[-1] if trajectory else None,
    }
    return _evaluate_merged(ctx, MergedModel(merged.params, provenance), method, extras)


def _method_adamerging_task_wise(ctx: ExperimentContext) -> MethodOutput:
    return _run_adamerging(ctx, "task_wise", "adamerging_task_wise")


def _method_adamerging_layer_wise(ctx: ExperimentContext) -> MethodOutput:
    return _run_adamerging(ctx, "layer_wise", "adamerging_layer_wise")


def _alternate_mode(mode: str) -> str:
    return "binarized" if mode == "concrete_expected" else "concrete_expected"


def _method_concrete_task_arithmetic(ctx: ExperimentContext) -> MethodOutput:
    meta_cfg = dataclasses.replace(
        ctx.cfg.meta,
        merge_backend=TASK_ARITHMETIC_BACKEND,
        scaling_coeff=ctx.cfg.scaling_coeff,
        seed=derive_seed(ctx.cfg.seed, "meta-cta"),
    )
    logits, trace = meta_learn_mask(
        ctx.theta0, ctx.seen_taskvecs(), ctx.seen_unlabeled(), meta_cfg
    )
    mask = finalize_mask(logits, meta_cfg.eval_mask_mode)
    merged = concrete_task_arithmetic(
        ctx.theta0, ctx.seen_taskvecs(), mask, ctx.cfg.scaling_coeff
    )
    provenance = dict(merged.provenance)
    provenance["task_ids"] = list(ctx.seen_ids)
    provenance["mask_mode"] = meta_cfg.eval_mask_mode
    alt = _alternate_mode(meta_cfg.eval_mask_mode)
    alt_merged = concrete_task_arithmetic(
        ctx.theta0, ctx.seen_taskvecs(), finalize_mask(logits, alt), ctx.cfg.scaling_coeff
    )
    alt_avg = float(np.mean([
        evaluate(alt_merged.params, ctx.cfg.model, t.test) for t in ctx.family.tasks
    ]))
    out = _evaluate_merged(ctx, MergedModel(merged.params, provenance),
                           "concrete_task_arithmetic",
                           {"mask_sparsity": logits.sparsity(),
                            f"average_{alt}_mask": alt_avg})
    out.trace = trace
    return out


def _method_concrete_adamerging(ctx: ExperimentContext) -> MethodOutput:
    meta_cfg = dataclasses.replace(
        ctx.cfg.meta,
        merge_backend=ADAMERGING_BACKEND,
        seed=derive_seed(ctx.cfg.seed, "meta-cam"),
    )
    logits, trace = meta_learn_mask(
        ctx.theta0, ctx.seen_taskvecs(), ctx.seen_unlabeled(), meta_cfg
    )
    mask = finalize_mask(logits, meta_cfg.eval_mask_mode)
    tta_cfg = dataclasses.replace(ctx.cfg.tta, kind=meta_cfg.adamerging_kind)
    merged = concrete_adamerging(
        ctx.theta0, ctx.seen_taskvecs(), mask, ctx.seen_unlabeled(), tta_cfg
    )
    provenance = dict(merged.provenance)
    provenance["task_ids"] = list(ctx.seen_ids)
    provenance["mask_mode"] = meta_cfg.eval_mask_mode
    out = _evaluate_merged(ctx, MergedModel(merged.params, provenance),
                           "concrete_adamerging",
                           {"mask_sparsity": logits.sparsity()})
    out.trace = trace
    return out


METHOD_REGISTRY: dict[str, Callable[[ExperimentContext], MethodOutput]] = {
    "individual": _method_individual,
    "pretrained": _method_pretrained,
    "weight_average": _method_weight_average,
    "task_arithmetic": _method_task_arithmetic,
    "ties_merging": _method_ties_merging,
    "adamerging_task_wise": _method_adamerging_task_wise,
    "adamerging_layer_wise": _method_adamerging_layer_wise,
    "concrete_task_arithmetic": _method_concrete_task_arithmetic,
    "concrete_adamerging": _method_concrete_adamerging,
}


def _stage(name: str, fn: Callable, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:
        raise PipelineError(name, str(e)) from e


def prepare_context(cfg: ExperimentConfig, family: TaskFamily | None = None,
                    unseen_tasks: Sequence[str] = ()) -> ExperimentContext:
    """Generate data, pre-train the base model, fine-tune per task."""
    for m in cfg.methods:
        if m not in METHOD_REGISTRY:
            raise ContractError(f"unknown method '{m}'")
    if family is None:
        family = _stage("generate-tasks", generate_task_family, cfg.family, cfg.seed)
    all_ids = [t.task_id for t in family.tasks]
    unseen = tuple(unseen_tasks)
    for u in unseen:
        if u not in all_ids:
            raise ContractError(f"unknown held-out task '{u}'")
    seen = tuple(t for t in all_ids if t not in unseen)
    if not seen:
        raise DomainError("cannot hold out every task: the seen set would be empty")

    theta_init = _stage("init-model", init_pretrained, cfg.model)
    theta0 = _stage("pretrain", fine_tune, theta_init, family.base.train, cfg.model, cfg.pretrain)
    finetuned = []
    for i, task in enumerate(family.tasks):
        ft_cfg = dataclasses.replace(cfg.finetune, seed=derive_seed(cfg.seed, f"finetune-{task.task_id}"))
        finetuned.append(_stage(f"finetune-{task.task_id}", fine_tune,
                                theta0, task.train, cfg.model, ft_cfg))
    taskvecs = [
        _stage("task-vectors", compute_task_vector, theta, theta0, task.task_id)
        for theta, task in zip(finetuned, family.tasks)
    ]
    return ExperimentContext(cfg, family, theta0, finetuned, taskvecs, seen, unseen)


def run_methods(ctx: ExperimentContext) -> ExperimentResult:
    results = []
    models: dict[str, MergedModel] = {}
    traces: dict[str, MetaTrace] = {}
    started = time.perf_counter()
    for method in ctx.cfg.methods:
        out = _stage(f"method-{method}", METHOD_REGISTRY[method], ctx)
        results.append(out.result)
        if out.merged is not None:
            models[method] = out.merged
        if out.trace is not None:
            traces[method] = out.trace
    metadata = {
        "seed": ctx.cfg.seed,
        "config_hash": ctx.cfg.config_hash,
        "runtime_seconds": time.perf_counter() - started,
        "n_tasks": len(ctx.family.tasks),
        "model_dim": ctx.theta0.dim,
    }
    report = EvalReport(
        results=tuple(results),
        metadata=metadata,
        seen_tasks=ctx.seen_ids if ctx.unseen_ids else (),
        unseen_tasks=ctx.unseen_ids,
    )
    return ExperimentResult(report, ctx, models, traces)


def run_experiment(cfg: ExperimentConfig, family: TaskFamily | None = None) -> ExperimentResult:
    """Full pipeline on all tasks."""
    ctx = prepare_context(cfg, family=family, unseen_tasks=cfg.unseen_tasks)
    return run_methods(ctx)


def run_generalization(cfg: ExperimentConfig, unseen_tasks: Sequence[str],
                       family: TaskFamily | None = None) -> ExperimentResult:
    """Merge using only the seen tasks, evaluate on seen and held-out tasks."""
    if not unseen_tasks:
        raise ContractError("run_generalization needs at least one held-out task")
    ctx = prepare_context(cfg, family=family, unseen_tasks=unseen_tasks)
    return run_methods(ctx)
