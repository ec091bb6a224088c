"""Accuracy sweeps over the residual ratio and robustness reporting.

A report is a flat list of (model, split, r, accuracy) rows plus optional
baseline accuracies per split (bare head, KNN). Adapter outputs do not
depend on r, so a sweep computes them once per sample and re-blends for
each grid point; the r = 0 row scores the unmodified embeddings and
therefore reproduces the bare-head decisions exactly.

CSV layout: header "model,split,r,accuracy", one row per cell, '.' decimal
separator, '\n' line endings. JSON mirrors the report fields and includes
the baselines.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterParams, adapter_forward, blend
from .dataio import EmbeddingSet
from .errors import ClassSetMismatch, IoFailure, LengthMismatch
from .heads import ClassifierHead, KnnConfig, head_logits, knn_logits_batch
from .soup import Soup, soup_forward

DEFAULT_GRID = tuple(round(0.1 * i, 12) for i in range(11))


@dataclass
class SweepRow:
    model: str
    split: str
    r: float
    accuracy: float


@dataclass
class EvalReport:
    rows: list[SweepRow] = field(default_factory=list)
    baselines: dict[str, dict[str, float]] = field(default_factory=dict)

    def extend(self, other: "EvalReport"):
        self.rows.extend(other.rows)
        for split, entries in other.baselines.items():
            self.baselines.setdefault(split, {}).update(entries)

    def accuracies(self, model: str, split: str) -> dict[float, float]:
        return {row.r: row.accuracy for row in self.rows
                if row.model == model and row.split == split}


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise LengthMismatch(
            f"{logits.shape[0] if logits.ndim == 2 else logits.ndim} logit "
            f"rows vs {labels.shape[0]} labels")
    if labels.size == 0:
        raise LengthMismatch("cannot score an empty batch")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _model_outputs(model, feats: np.ndarray) -> np.ndarray:
    if isinstance(model, Soup):
        return soup_forward(model, feats)
    if isinstance(model, AdapterParams):
        return adapter_forward(model, feats)
    raise TypeError(f"cannot evaluate a {type(model).__name__}")


def ratio_sweep(model, head: ClassifierHead, emb: EmbeddingSet,
                grid=DEFAULT_GRID, split=None) -> dict[float, float]:
    """Accuracy of blend(x, model(x), r) under the head, for each r in grid.

    ``split`` restricts evaluation to those sample indices; evaluation
    always uses the clean view. Model outputs are computed once and reused
    across the whole grid.
    """
    feats = emb.unit_features(view=0, indices=split)
    labels = emb.labels if split is None \
        else emb.labels[np.asarray(split, dtype=np.int64)]
    outputs = _model_outputs(model, feats)
    result: dict[float, float] = {}
    for r in grid:
        blended = feats if r == 0.0 else blend(feats, outputs, r)
        result[float(r)] = accuracy(head_logits(head, blended), labels)
    return result


def head_accuracy(head: ClassifierHead, emb: EmbeddingSet, split=None) -> float:
    feats = emb.unit_features(view=0, indices=split)
    labels = emb.labels if split is None \
        else emb.labels[np.asarray(split, dtype=np.int64)]
    return accuracy(head_logits(head, feats), labels)


def knn_accuracy(bank_features: np.ndarray, bank_labels: np.ndarray,
                 cfg: KnnConfig, emb: EmbeddingSet, num_classes: int,
                 split=None) -> float:
    feats = emb.unit_features(view=0, indices=split)
    labels = emb.labels if split is None \
        else emb.labels[np.asarray(split, dtype=np.int64)]
    logits = knn_logits_batch(bank_features, bank_labels, feats, cfg,
                              num_classes)
    return accuracy(logits, labels)


def _check_compatible(head: ClassifierHead, sets):
    for name, emb in sets:
        if emb.n_classes != head.n_classes:
            raise ClassSetMismatch(
                f"set '{name}' has {emb.n_classes} classes, head has "
                f"{head.n_classes}")
        if emb.dim != head.dim:
            raise ClassSetMismatch(
                f"set '{name}' has dim {emb.dim}, head has {head.dim}")


def robustness_report(models, head: ClassifierHead, id_set: EmbeddingSet,
                      ood_sets: dict[str, EmbeddingSet],
                      grid=DEFAULT_GRID) -> EvalReport:
    """(ID, OOD) accuracy per model per residual ratio.

    ``models`` is a list of (name, adapter-or-soup) pairs. The "ood" rows
    hold the unweighted mean accuracy over the shifted sets at each r; the
    bare-head accuracies land in the baselines, keyed by the head origin.
    """
    _check_compatible(head, [("id", id_set), *ood_sets.items()])
    report = EvalReport()
    for name, model in models:
        id_accs = ratio_sweep(model, head, id_set, grid)
        ood_accs = [ratio_sweep(model, head, emb, grid)
                    for emb in ood_sets.values()]
        for r in grid:
            r = float(r)
            report.rows.append(SweepRow(name, "id", r, id_accs[r]))
            if ood_accs:
                mean_ood = float(np.mean([a[r] for a in ood_accs]))
                report.rows.append(SweepRow(name, "ood", r, mean_ood))
    report.baselines["id"] = {head.origin: head_accuracy(head, id_set)}
    if ood_sets:
        report.baselines["ood"] = {head.origin: float(np.mean(
            [head_accuracy(head, emb) for emb in ood_sets.values()]))}
    return report


def component_average_report(components, head: ClassifierHead,
                             sets: dict[str, EmbeddingSet],
                             grid=DEFAULT_GRID) -> EvalReport:
    """Every component evaluated independently, plus mean/min/max rows.

    Rows are named component_<j>, component_mean, component_min and
    component_max; the mean row is the exact arithmetic mean of the
    per-component rows.
    """
    if not components:
        raise ValueError("need at least one component")
    report = EvalReport()
    for split, emb in sets.items():
        per_comp = [ratio_sweep(comp, head, emb, grid) for comp in components]
        for j, accs in enumerate(per_comp):
            for r in grid:
                report.rows.append(SweepRow(f"component_{j}", split,
                                            float(r), accs[float(r)]))
        for r in grid:
            values = [accs[float(r)] for accs in per_comp]
            report.rows.append(SweepRow("component_mean", split, float(r),
                                        float(np.mean(values))))
            report.rows.append(SweepRow("component_min", split, float(r),
                                        float(min(values))))
            report.rows.append(SweepRow("component_max", split, float(r),
                                        float(max(values))))
    return report


# ----------------------------------------------------------------- report IO

def write_report(report: EvalReport, path, format: str):
    if format == "csv":
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["model", "split", "r", "accuracy"])
                for row in report.rows:
                    writer.writerow([row.model, row.split,
                                     repr(row.r), repr(row.accuracy)])
        except OSError as exc:
            raise IoFailure(f"cannot write report: {exc}") from exc
    elif format == "json":
        doc = {"rows": [{"model": row.model, "split": row.split,
                         "r": row.r, "accuracy": row.accuracy}
                        for row in report.rows],
               "baselines": report.baselines}
        try:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError as exc:
            raise IoFailure(f"cannot write report: {exc}") from exc
    else:
        raise ValueError(f"unknown report format {format!r}")


def read_report(path, format: str) -> EvalReport:
    if format == "csv":
        try:
            with open(path, "r", encoding="utf-8", newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                if header != ["model", "split", "r", "accuracy"]:
                    raise IoFailure(f"unexpected CSV header: {header}")
                rows = [SweepRow(m, s, float(r), float(a))
                        for m, s, r, a in reader]
        except OSError as exc:
            raise IoFailure(f"cannot read report: {exc}") from exc
        return EvalReport(rows=rows)
    if format == "json":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise IoFailure(f"cannot read report: {exc}") from exc
        rows = [SweepRow(d["model"], d["split"], float(d["r"]),
                         float(d["accuracy"])) for d in doc["rows"]]
        return EvalReport(rows=rows, baselines={
            split: dict(entries)
            for split, entries in doc.get("baselines", {}).items()})
    raise ValueError(f"unknown report format {format!r}")
