"""Accuracy / RMSE, report tables and feature export."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Document

REPORT_COLUMNS = ("task", "variant", "seed", "split", "acc", "rmse")


@dataclass
class Metrics:
    accuracy: float
    rmse: float
    count: int
    confusion: np.ndarray  # rows: true rating, cols: predicted rating

    def as_dict(self) -> dict:
        return {"acc": self.accuracy, "rmse": self.rmse, "count": self.count}


def metrics_from_predictions(truth: Sequence[int], pred: Sequence[int], num_labels: int) -> Metrics:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.size == 0:
        raise ValueError("cannot evaluate an empty document list")
    if truth.shape != pred.shape:
        raise ValueError("truth and prediction lengths differ")
    conf = np.zeros((num_labels, num_labels), dtype=np.int64)
    np.add.at(conf, (truth - 1, pred - 1), 1)
    acc = float(np.trace(conf)) / truth.size
    rmse = math.sqrt(float(np.mean((pred - truth).astype(float) ** 2)))
    return Metrics(acc, rmse, int(truth.size), conf)


def evaluate(predict: Callable[[list], Sequence[int]], docs: Sequence[Document],
             num_labels: int = 5) -> Metrics:
    """Score a batched predictor (list of documents -> list of ratings)."""
    if not docs:
        raise ValueError("cannot evaluate an empty document list")
    if any(d.label is None for d in docs):
        raise ValueError("evaluation needs labeled documents")
    preds = predict(list(docs))
    return metrics_from_predictions([d.label for d in docs], preds, num_labels)


def export_features(groups, docs: Sequence[Document], path, batch_size: int = 64) -> int:
    """Write one TSV row per (group, document): gid, doc id, domain, label, features."""
    from .trainer import features  # trainer imports this module

    rows = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in groups:
            feats = features(g, docs, batch_size)
            for doc, vec in zip(docs, feats):
                lab = "-" if doc.label is None else str(doc.label)
                cols = [str(g.gid), doc.doc_id, str(doc.domain), lab] + [repr(float(x)) for x in vec]
                fh.write("\t".join(cols) + "\n")
                rows += 1
    return rows


def read_features(path) -> list[tuple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            p = line.rstrip("\n").split("\t")
            label = None if p[3] == "-" else int(p[3])
            out.append((int(p[0]), p[1], int(p[2]), label, np.array(p[4:], dtype=float)))
    return out


def write_report_csv(rows: Sequence[dict], path, columns=REPORT_COLUMNS) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_report_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def format_table(rows: Sequence[dict], columns=REPORT_COLUMNS) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    buf = io.StringIO()
    buf.write("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip() + "\n")
    buf.write("  ".join("-" * w for w in widths) + "\n")
    for row in cells:
        buf.write("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() + "\n")
    return buf.getvalue()


def mean_rows(rows: Sequence[dict], keys=("task", "variant", "split")) -> list[dict]:
    """Average acc/rmse over seeds for each (task, variant, split)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, rs in groups.items():
        row = dict(zip(keys, key))
        row["seed"] = "mean"
        row["acc"] = float(np.mean([float(r["acc"]) for r in rs]))
        row["rmse"] = float(np.mean([float(r["rmse"]) for r in rs]))
        out.append(row)
    return out
