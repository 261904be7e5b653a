"""Command-line interface.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from ..concrete import MaskLogits
from ..errors import MaskMergeError
from ..merge import LAYER_WISE, TASK_WISE, MergedModel, MergeWeights, tta_optimize_weights, adamerging_merge
from ..metalearn import (
    ADAMERGING_BACKEND,
    TASK_ARITHMETIC_BACKEND,
    concrete_adamerging,
    concrete_task_arithmetic,
    finalize_mask,
    meta_learn_mask,
)
from ..nn import ParamVector, evaluate, fine_tune, init_pretrained
from ..taskvec import compute_task_vector, ties_merge, weight_average
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, derive_seed, load_config
from .datagen import generate_task_family
from .experiment import run_experiment, run_generalization
from .report import EvalReport, MethodResult, emit_report, emit_trace_csv, load_report
from .taskstore import load_family, save_family

MERGE_METHODS = (
    "weight_average",
    "task_arithmetic",
    "ties_merging",
    "adamerging_task_wise",
    "adamerging_layer_wise",
    "concrete_task_arithmetic",
    "concrete_adamerging",
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="maskmerge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, tasks=False, checkpoints=False):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if tasks:
            p.add_argument("--tasks", required=True, help="task directory from gen-tasks")
        if checkpoints:
            p.add_argument("--checkpoints", required=True, help="checkpoint directory from finetune")

    p = sub.add_parser("gen-tasks", help="generate the synthetic task family")
    common(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("finetune", help="pre-train the base model and fine-tune per task")
    common(p, tasks=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints")

    p = sub.add_parser("merge", help="merge fine-tuned checkpoints with one method")
    common(p, checkpoints=True)
    p.add_argument("--method", required=True, choices=MERGE_METHODS)
    p.add_argument("--lambda", dest="scaling_coeff", type=float, default=None,
                   help="scaling coefficient for task-arithmetic style methods")
    p.add_argument("--mask", default=None, help="mask-logits checkpoint (concrete methods)")
    p.add_argument("--tasks", default=None, help="task directory (methods that adapt on unlabeled data)")
    p.add_argument("--out", required=True, help="output checkpoint path")

    p = sub.add_parser("meta-learn", help="meta-learn shared mask logits")
    common(p, tasks=True, checkpoints=True)
    p.add_argument("--backend", choices=[TASK_ARITHMETIC_BACKEND, ADAMERGING_BACKEND],
                   default=TASK_ARITHMETIC_BACKEND)
    p.add_argument("--out", required=True, help="output mask checkpoint path")

    p = sub.add_parser("eval", help="evaluate a checkpoint on every task's test split")
    common(p, tasks=True)
    p.add_argument("--model", required=True, help="model checkpoint to evaluate")
    p.add_argument("--name", default=None, help="method name recorded in the report")
    p.add_argument("--out", required=True, help="output directory for the report")

    p = sub.add_parser("run", help="full pipeline from one config file")
    common(p)
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")

    p = sub.add_parser("report", help="re-emit a JSON report as CSV/JSON files")
    p.add_argument("--input", required=True, help="report JSON produced by run/eval")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--formats", default="csv,json", help="comma-separated subset of csv,json")

    return parser


def _config(args) -> ExperimentConfig:
    return load_config(args.config, seed_override=args.seed)


def _task_ids(cfg: ExperimentConfig) -> list[str]:
    return [f"task{i}" for i in range(cfg.family.n_tasks)]


def _load_vectors(cfg: ExperimentConfig, checkpoints_dir: str):
    ckpt = Path(checkpoints_dir)
    theta0 = load_checkpoint(ckpt / "pretrained.ckpt")
    taskvecs = []
    for tid in _task_ids(cfg):
        theta_i = load_checkpoint(ckpt / f"{tid}_finetuned.ckpt")
        taskvecs.append(compute_task_vector(theta_i, theta0, tid))
    return theta0, taskvecs


def _unlabeled_pools(family) -> list[np.ndarray]:
    return [t.unlabeled.features for t in family.tasks]


def _write_merged(merged: MergedModel, out_path: Path) -> None:
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(merged.params, out_path)
    sidecar = out_path.with_suffix(out_path.suffix + ".provenance.json")
    with open(sidecar, "w") as f:
        json.dump(merged.provenance, f, indent=2, sort_keys=True)
        f.write("\n")


def _cmd_gen_tasks(args) -> int:
    cfg = _config(args)
    family = generate_task_family(cfg.family, cfg.seed)
    out = save_family(family, cfg.family, cfg.seed, Path(args.out))
    print(f"wrote task family to {out}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _config(args)
    family, _ = load_family(args.tasks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    theta_init = init_pretrained(cfg.model)
    theta0 = fine_tune(theta_init, family.base.train, cfg.model, cfg.pretrain)
    save_checkpoint(theta0, out / "pretrained.ckpt")
    for task in family.tasks:
        ft_cfg = dataclasses.replace(cfg.finetune, seed=derive_seed(cfg.seed, f"finetune-{task.task_id}"))
        theta_i = fine_tune(theta0, task.train, cfg.model, ft_cfg)
        save_checkpoint(theta_i, out / f"{task.task_id}_finetuned.ckpt")
    print(f"wrote {1 + len(family.tasks)} checkpoints to {out}")
    return 0


def _cmd_merge(args) -> int:
    cfg = _config(args)
    lam = cfg.scaling_coeff if args.scaling_coeff is None else args.scaling_coeff
    theta0, taskvecs = _load_vectors(cfg, args.checkpoints)

    def need_tasks():
        if args.tasks is None:
            raise MaskMergeError(f"method '{args.method}' needs --tasks for unlabeled data")
        family, _ = load_family(args.tasks)
        return _unlabeled_pools(family)

    def need_mask() -> np.ndarray:
        if args.mask is None:
            raise MaskMergeError(f"method '{args.method}' needs --mask")
        pv = load_checkpoint(args.mask)
        logits = MaskLogits(pv.data, pv.layout, pv.spec_hash)
        return finalize_mask(logits, cfg.meta.eval_mask_mode)

    if args.method == "weight_average":
        models = [theta0.with_data(theta0.data + tv.delta) for tv in taskvecs]
        merged = MergedModel(weight_average(models), {
            "method": "weight_average", "task_ids": [tv.task_id for tv in taskvecs]})
    elif args.method == "task_arithmetic":
        from ..merge import task_arithmetic_merge
        merged = task_arithmetic_merge(theta0, taskvecs, lam)
    elif args.method == "ties_merging":
        from ..merge import task_arithmetic_merge
        merged_delta = ties_merge(taskvecs, cfg.ties_trim_fraction)
        base = task_arithmetic_merge(theta0, [merged_delta], lam)
        provenance = dict(base.provenance)
        provenance.update({"method": "ties_merging",
                           "trim_fraction": cfg.ties_trim_fraction,
                           "task_ids": [tv.task_id for tv in taskvecs]})
        merged = MergedModel(base.params, provenance)
    elif args.method in ("adamerging_task_wise", "adamerging_layer_wise"):
        pools = need_tasks()
        kind = TASK_WISE if args.method.endswith("task_wise") else LAYER_WISE
        n, n_layers = len(taskvecs), len(theta0.layout)
        w_init = (MergeWeights.task_wise(n, cfg.tta.weight_init) if kind == TASK_WISE
                  else MergeWeights.layer_wise(n, n_layers, cfg.tta.weight_init))
        weights, _ = tta_optimize_weights(theta0, taskvecs, pools, w_init,
                                          steps=cfg.tta.steps, lr=cfg.tta.lr,
                                          batch_size=cfg.tta.batch_size, seed=cfg.tta.seed)
        merged = adamerging_merge(theta0, taskvecs, weights)
    elif args.method == "concrete_task_arithmetic":
        merged = concrete_task_arithmetic(theta0, taskvecs, need_mask(), lam)
    else:  # concrete_adamerging
        merged = concrete_adamerging(theta0, taskvecs, need_mask(), need_tasks(), cfg.tta)

    _write_merged(merged, Path(args.out))
    print(f"wrote merged checkpoint to {args.out}")
    return 0


def _cmd_meta_learn(args) -> int:
    cfg = _config(args)
    family, _ = load_family(args.tasks)
    theta0, taskvecs = _load_vectors(cfg, args.checkpoints)
    meta_cfg = dataclasses.replace(cfg.meta, merge_backend=args.backend,
                                   scaling_coeff=cfg.scaling_coeff)
    logits, trace = meta_learn_mask(theta0, taskvecs, _unlabeled_pools(family), meta_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ParamVector(logits.values, theta0.layout, theta0.spec_hash), out)
    trace_path = out.with_suffix(".trace.csv")
    emit_trace_csv(trace.as_rows(), trace_path)
    print(f"wrote mask logits to {out} (sparsity {logits.sparsity():.3f}), trace to {trace_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _config(args)
    family, _ = load_family(args.tasks)
    params = load_checkpoint(args.model)
    name = args.name or Path(args.model).stem
    metrics = {t.task_id: evaluate(params, cfg.model, t.test) for t in family.tasks}
    report = EvalReport(
        results=(MethodResult(name, metrics),),
        metadata={"seed": cfg.seed, "config_hash": cfg.config_hash, "model": str(args.model)},
    )
    paths = emit_report(report, args.out)
    print(f"wrote {', '.join(str(p) for p in paths)}")
    return 0


def _cmd_run(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    if cfg.unseen_tasks:
        result = run_generalization(cfg, cfg.unseen_tasks)
    else:
        result = run_experiment(cfg)
    paths = emit_report(result.report, out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.context.theta0, ckpt_dir / "pretrained.ckpt")
    for theta_i, task in zip(result.context.finetuned, result.context.family.tasks):
        save_checkpoint(theta_i, ckpt_dir / f"{task.task_id}_finetuned.ckpt")
    for method, merged in result.models.items():
        _write_merged(merged, ckpt_dir / f"{method}.ckpt")
    for method, trace in result.traces.items():
        emit_trace_csv(trace.as_rows(), out / "traces" / f"{method}_trace.csv")
    print(f"wrote {', '.join(str(p) for p in paths)}")
    return 0


def _cmd_report(args) -> int:
    report = load_report(args.input)
    formats = tuple(f.strip() for f in args.formats.split(",") if f.strip())
    paths = emit_report(report, args.out, formats=formats)
    print(f"wrote {', '.join(str(p) for p in paths)}")
    return 0


_COMMANDS = {
    "gen-tasks": _cmd_gen_tasks,
    "finetune": _cmd_finetune,
    "merge": _cmd_merge,
    "meta-learn": _cmd_meta_learn,
    "eval": _cmd_eval,
    "run": _cmd_run,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (MaskMergeError, FileNotFoundError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
