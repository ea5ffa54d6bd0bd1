"""Metrics, task aggregation and the ablation harness.

Precision and recall are reported per class.  When a denominator is zero the
value is ``None`` (serialised as ``null`` in JSON and ``undefined`` in CSV)
and it is left out of task averages, with the number of exclusions kept.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .adapt import FinetuneConfig, PMFModel, PMTModel, lr_search, predict
from .dataset import DatasetIndex, ImageCache
from .encoder import EncoderState
from .episodes import Episode, build_test_tasks

log = logging.getLogger(__name__)

METHODS = ("pmf", "pmt")
UNDEFINED = "undefined"


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, cols: predicted class

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(predictions: Sequence[int], labels: Sequence[int], n_classes: int) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64).ravel()
    t = np.asarray(labels, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions for {t.size} labels")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= n_classes):
        raise ValueError(f"class index outside 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def precision_recall(cm: ConfusionMatrix) -> list[dict]:
    tp = np.diag(cm.counts)
    predicted = cm.counts.sum(axis=0)
    actual = cm.counts.sum(axis=1)
    return [
        {
            "precision": float(tp[c] / predicted[c]) if predicted[c] else None,
            "recall": float(tp[c] / actual[c]) if actual[c] else None,
        }
        for c in range(cm.n_classes)
    ]


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts) / cm.total)


@dataclass
class MetricsReport:
    accuracy: float
    per_class: list[dict]
    n_tasks: int = 1
    per_task: list[dict] | None = None
    excluded: list[dict] = field(default_factory=list)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, **extra) -> "MetricsReport":
        rep = cls(accuracy(cm), precision_recall(cm))
        rep.per_task = [{"accuracy": rep.accuracy, "per_class": rep.per_class, "confusion": cm.counts.tolist(), **extra}]
        rep.excluded = [{"precision": 0, "recall": 0} for _ in rep.per_class]
        return rep

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "n_tasks": self.n_tasks,
            "excluded": self.excluded,
            "per_task": self.per_task,
        }


def aggregate_tasks(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Unweighted mean over tasks; undefined entries are skipped and counted."""
    if not reports:
        raise ValueError("no reports to aggregate")
    n_classes = len(reports[0].per_class)
    if any(len(r.per_class) != n_classes for r in reports):
        raise ValueError("reports disagree on the number of classes")
    per_class, excluded = [], []
    for c in range(n_classes):
        entry, skip = {}, {}
        for metric in ("precision", "recall"):
            values = [r.per_class[c][metric] for r in reports if r.per_class[c][metric] is not None]
            skip[metric] = len(reports) - len(values)
            entry[metric] = float(np.mean(values)) if values else None
            if skip[metric]:
                log.info("class %d %s undefined in %d of %d tasks; excluded from the mean", c, metric, skip[metric], len(reports))
        per_class.append(entry)
        excluded.append(skip)
    per_task = [t for r in reports for t in (r.per_task or [])] or None
    return MetricsReport(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        per_class=per_class,
        n_tasks=sum(r.n_tasks for r in reports),
        per_task=per_task,
        excluded=excluded,
    )


def pooled_report(matrices: Sequence[ConfusionMatrix]) -> MetricsReport:
    """Scores on the summed confusion matrix of all tasks (micro pooling)."""
    total = matrices[0]
    for m in matrices[1:]:
        total = total + m
    rep = MetricsReport.from_confusion(total)
    rep.n_tasks = len(matrices)
    return rep


# ---------------------------------------------------------------------------
# task evaluation


def make_model(method: str, encoder: EncoderState, n_way: int, ft: FinetuneConfig, distance: str = "sqeuclidean", temperature: float = 1.0):
    if method == "pmt":
        return PMTModel(encoder, n_way, lambda_bsr=ft.lambda_bsr)
    if method == "pmf":
        return PMFModel(encoder, n_way, distance=distance, temperature=temperature, lambda_bsr=ft.lambda_bsr)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def evaluate_task(
    method: str,
    encoder: EncoderState,
    task: Episode,
    cache: ImageCache,
    ft: FinetuneConfig,
    distance: str = "sqeuclidean",
    temperature: float = 1.0,
    trace: list | None = None,
) -> tuple[ConfusionMatrix, dict]:
    """Adapt on the task's support, predict its query; returns the confusion matrix and task info."""
    n_way = task.spec.n_way
    xs, ys = cache.eval_batch(task.support_entries), np.asarray(task.support_labels)
    xq, yq = cache.eval_batch(task.query_entries), np.asarray(task.query_labels)
    model = make_model(method, encoder, n_way, ft, distance, temperature)
    augment = None
    if ft.augment:
        entries = task.support_entries

        def augment(step, rows):
            return cache.train_batch([entries[i] for i in rows], ft.seed, task.seed_tag, step)

    scores: dict = {}
    lr = lr_search(model, xs, ys, ft, augment, scores) if ft.search else ft.learning_rate
    full_aug = None if augment is None else (lambda step: augment(step, range(len(ys))))
    fitted = model.fit(xs, ys, lr, ft.steps, augment=full_aug, trace=trace)
    cm = confusion(predict(fitted, xq), yq, n_way)
    info = {"task": task.seed_tag, "lr": lr, "lr_scores": {repr(k): v for k, v in scores.items()}}
    return cm, info


def evaluate_tasks(
    method: str,
    encoder: EncoderState,
    tasks: Sequence[Episode],
    cache: ImageCache,
    ft: FinetuneConfig,
    pooled: bool = False,
    distance: str = "sqeuclidean",
    temperature: float = 1.0,
    trace: list | None = None,
) -> MetricsReport:
    """Per-task scores averaged over tasks, or pooled over all queries with ``pooled``."""
    matrices, reports = [], []
    for task in tasks:
        steps = [] if trace is not None else None
        cm, info = evaluate_task(method, encoder, task, cache, ft, distance, temperature, trace=steps)
        if trace is not None:
            trace.extend({"task": task.seed_tag, **rec} for rec in steps)
        matrices.append(cm)
        reports.append(MetricsReport.from_confusion(cm, **info))
    if pooled:
        rep = pooled_report(matrices)
        rep.per_task = [r.per_task[0] for r in reports]
        return rep
    return aggregate_tasks(reports)


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationCell:
    method: str
    lambda_bsr: float
    shots: int

    @property
    def label(self) -> str:
        return self.method.upper() + ("+BSR" if self.lambda_bsr > 0 else "")

    @property
    def key(self) -> str:
        return f"{self.method}|{self.lambda_bsr!r}|{self.shots}"


def make_grid(methods: Sequence[str], lambdas: Sequence[float], shots: Sequence[int]) -> list[AblationCell]:
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
    return [AblationCell(m, float(lam), int(k)) for m, lam, k in product(methods, lambdas, shots)]


@dataclass
class AblationTable:
    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_ablation(
    grid: Sequence[AblationCell],
    index: DatasetIndex,
    seeds: Sequence[int],
    checkpoints: Mapping[float, EncoderState],
    ft: FinetuneConfig | None = None,
    n_tasks: int = 5,
    pooled: bool = False,
    cache: ImageCache | None = None,
    distance: str = "sqeuclidean",
    temperature: float = 1.0,
) -> AblationTable:
    """Score every grid cell over every seed's fixed test tasks.

    ``checkpoints`` maps the BSR weight used in meta-training to the trained
    encoder, so the lambda axis selects a checkpoint.  A failing cell is
    recorded and the remaining cells still run.
    """
    ft = ft or FinetuneConfig()
    cache = cache or ImageCache(index)
    table = AblationTable()
    for cell in grid:
        try:
            if cell.lambda_bsr not in checkpoints:
                raise KeyError(f"no checkpoint meta-trained with lambda_bsr={cell.lambda_bsr!r}")
            per_seed = []
            for seed in seeds:
                tasks = build_test_tasks(index, cell.shots, n_tasks, seed)
                per_seed.append(evaluate_tasks(cell.method, checkpoints[cell.lambda_bsr], tasks, cache, ft, pooled, distance, temperature))
            combined = aggregate_tasks(per_seed)
            table.rows.append({
                "cell": cell.key,
                "method": cell.label,
                "lambda_bsr": cell.lambda_bsr,
                "shots": cell.shots,
                "accuracy": combined.accuracy,
                "per_class": combined.per_class,
                "excluded": combined.excluded,
                "n_tasks": combined.n_tasks,
                "seeds": list(seeds),
                "per_seed": [{"seed": s, "accuracy": r.accuracy, "per_class": r.per_class, "per_task": r.per_task}
                             for s, r in zip(seeds, per_seed)],
            })
        except Exception as exc:  # noqa: BLE001 - every cell failure is reported, not fatal
            log.error("ablation cell %s failed: %s", cell.key, exc)
            table.failures.append({"cell": cell.key, "error": f"{type(exc).__name__}: {exc}"})
    return table


# ---------------------------------------------------------------------------
# report files


def config_digest(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def csv_columns(n_classes: int) -> list[str]:
    return (
        ["Method", "Lambda", "Shot", "Accuracy"]
        + [f"Class{c}-Precision" for c in range(n_classes)]
        + [f"Class{c}-Recall" for c in range(n_classes)]
    )


def table_csv(rows: Sequence[Mapping]) -> str:
    def fmt(v):
        return UNDEFINED if v is None else repr(float(v))

    n_classes = max((len(r["per_class"]) for r in rows), default=0)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_columns(n_classes))
    for r in rows:
        pcs = list(r["per_class"]) + [{"precision": None, "recall": None}] * (n_classes - len(r["per_class"]))
        writer.writerow(
            [r["method"], repr(float(r["lambda_bsr"])), r["shots"], fmt(r["accuracy"])]
            + [fmt(pc["precision"]) for pc in pcs]
            + [fmt(pc["recall"]) for pc in pcs]
        )
    return buf.getvalue()


def write_report(out_dir: str | Path, stem: str, rows: Sequence[Mapping], config: Mapping, failures: Sequence[Mapping] = ()) -> tuple[Path, Path]:
    """Write ``<stem>.json`` (config, digest, cells) and ``<stem>.csv`` (table layout)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"config_digest": config_digest(config), "config": dict(config), "cells": list(rows), "failures": list(failures)}
    json_path, csv_path = out / f"{stem}.json", out / f"{stem}.csv"
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_path.write_text(table_csv(rows), encoding="utf-8")
    return json_path, csv_path
