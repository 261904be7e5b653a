"""On-disk layout for generated task families.

One directory per task holding plain ``.npy`` arrays per split, plus a
``meta.json`` with the generating seed and family settings. Both formats
are byte-deterministic, so regenerating with the same seed reproduces the
directory exactly.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from ..errors import ContractError
from ..nn import SPLITS, Dataset
from .datagen import TaskData, TaskFamily, TaskFamilyConfig


def save_family(family: TaskFamily, cfg: TaskFamilyConfig, seed: int, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "seed": seed,
        "family": dataclasses.asdict(cfg),
        "task_ids": [t.task_id for t in family.tasks],
    }
    with open(out_dir / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    for task in (family.base, *family.tasks):
        task_dir = out_dir / task.task_id
        task_dir.mkdir(exist_ok=True)
        for split in SPLITS:
            ds: Dataset = getattr(task, split)
            np.save(task_dir / f"{split}_features.npy", ds.features)
            np.save(task_dir / f"{split}_labels.npy", ds.labels)
    return out_dir


def _load_task(task_dir: Path, task_id: str) -> TaskData:
    datasets = {}
    for split in SPLITS:
        features = np.load(task_dir / f"{split}_features.npy")
        labels = np.load(task_dir / f"{split}_labels.npy")
        datasets[split] = Dataset(features, labels, split)
    return TaskData(task_id, datasets["train"], datasets["test"], datasets["unlabeled"])


def load_family(tasks_dir: str | Path) -> tuple[TaskFamily, dict]:
    tasks_dir = Path(tasks_dir)
    meta_path = tasks_dir / "meta.json"
    if not meta_path.exists():
        raise ContractError(f"{tasks_dir} is not a task directory (missing meta.json)")
    with open(meta_path) as f:
        meta = json.load(f)
    base = _load_task(tasks_dir / "base", "base")
    tasks = tuple(_load_task(tasks_dir / tid, tid) for tid in meta["task_ids"])
    return TaskFamily(base, tasks), meta
