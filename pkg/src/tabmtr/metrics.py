"""Task metrics, seed aggregation, average ranks and curve/report export."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

log = logging.getLogger(__name__)

HIGHER_IS_BETTER = {"AUC": True, "ACC": True, "RMSE": False}


def average_ranks(values) -> np.ndarray:
    """1-based ranks of ``values`` in ascending order; ties share their mean rank."""
    values = np.asarray(values)
    order = np.argsort(values, kind="mergesort")
    ordered = values[order]
    _, first, counts = np.unique(ordered, return_index=True, return_counts=True)
    ranks = np.empty(len(values), dtype=np.float64)
    ranks[order] = np.repeat(first + (counts + 1) / 2.0, counts)
    return ranks


def auc(scores, labels) -> float:
    """Area under the ROC curve by the rank-sum (Mann-Whitney) statistic.

    Equals the probability that a random positive scores above a random
    negative, counting ties as one half.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    rank_sum = average_ranks(scores)[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(pred_class, labels) -> float:
    pred_class, labels = np.asarray(pred_class).reshape(-1), np.asarray(labels).reshape(-1)
    if pred_class.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    return float(np.mean(pred_class == labels))


def rmse(pred, target, target_std: float = 1.0) -> float:
    """RMSE of standardized predictions, reported in original target units."""
    pred, target = np.asarray(pred, dtype=np.float64).reshape(-1), np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.size == 0:
        raise ValueError("rmse of empty input")
    if pred.shape != target.shape:
        raise ValueError("predictions and targets differ in length")
    return float(np.sqrt(np.mean((pred - target) ** 2)) * target_std)


def score_outputs(task: str, outputs: np.ndarray, y: np.ndarray, target_std: float = 1.0) -> float:
    """Metric value of raw model outputs (logits or regression values)."""
    if task == "binary":
        return auc(outputs.reshape(-1), y)
    if task == "multiclass":
        return accuracy(outputs.argmax(axis=1), y)
    return rmse(outputs, y, target_std)


# ---------------------------------------------------------------------------
# records


@dataclass
class ScoreRecord:
    dataset: str
    method: str
    hyperparameter: Optional[float]
    seed: int
    metric: str
    value: float
    higher_is_better: bool
    split: str = "test"

    def __post_init__(self):
        if self.metric not in HIGHER_IS_BETTER:
            raise ValueError(f"unknown metric {self.metric}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ScoreRecord":
        return cls(**json.loads(line))


def read_results(path) -> list[ScoreRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ScoreRecord.from_json(line) for line in fh if line.strip()]


@dataclass
class Cell:
    """Best-hyperparameter summary of one (dataset, method)."""

    dataset: str
    method: str
    metric: str
    higher_is_better: bool
    hyperparameter: Optional[float]
    mean: float
    std: float
    val_mean: float
    n_seeds: int


def _hp_key(hp):
    return -np.inf if hp is None else hp


def _group(records: Iterable[ScoreRecord], split: str):
    table = defaultdict(dict)  # (dataset, method, hp) -> seed -> value
    for r in records:
        if r.split == split:
            table[(r.dataset, r.method, r.hyperparameter)][r.seed] = r.value
    return table


def aggregate(records: list[ScoreRecord]) -> tuple[list[Cell], list[tuple]]:
    """Pick each (dataset, method)'s hyperparameter by mean validation score
    and report its test mean and (population) std over seeds.

    Returns ``(cells, missing)`` where ``missing`` lists
    ``(dataset, method, hyperparameter, seed, split)`` entries absent from the
    records although that seed appears elsewhere for the dataset.
    """
    if not records:
        raise ValueError("no records to aggregate")
    direction = {}
    for r in records:
        direction[r.dataset] = (r.metric, r.higher_is_better)
    val, test = _group(records, "val"), _group(records, "test")
    seeds = defaultdict(set)
    for r in records:
        seeds[r.dataset].add(r.seed)
    missing = []
    for key in sorted(set(val) | set(test), key=lambda k: (k[0], k[1], _hp_key(k[2]))):
        for split_name, table in (("val", val), ("test", test)):
            for s in sorted(seeds[key[0]] - set(table.get(key, {}))):
                missing.append((*key, s, split_name))
    for m in missing:
        log.warning("missing result: dataset=%s method=%s hp=%s seed=%s split=%s", *m)

    by_method = defaultdict(list)
    for key in set(val) | set(test):
        by_method[key[:2]].append(key[2])
    cells = []
    for (dataset, method), hps in sorted(by_method.items()):
        metric, higher = direction[dataset]
        candidates = [hp for hp in hps if val.get((dataset, method, hp)) and test.get((dataset, method, hp))]
        if not candidates:
            continue
        sign = 1.0 if higher else -1.0
        best = max(sorted(candidates, key=_hp_key),
                   key=lambda hp: sign * np.mean(list(val[(dataset, method, hp)].values())))
        t = np.array([v for _, v in sorted(test[(dataset, method, best)].items())])
        cells.append(Cell(dataset, method, metric, higher, best, float(t.mean()), float(t.std()),
                          float(np.mean(list(val[(dataset, method, best)].values()))), len(t)))
    return cells, missing


@dataclass
class RankTable:
    ranks: dict  # dataset -> {method: rank}
    average: dict  # method -> mean rank over datasets


def average_rank(cells: list[Cell]) -> RankTable:
    per_dataset = defaultdict(dict)
    for c in cells:
        per_dataset[c.dataset][c.method] = c
    methods = sorted({c.method for c in cells})
    ranks = {}
    for dataset, row in sorted(per_dataset.items()):
        absent = [m for m in methods if m not in row]
        if absent:
            raise ValueError(f"dataset {dataset} lacks scores for methods {absent}")
        higher = next(iter(row.values())).higher_is_better
        # rank 1 is best
        scores = np.array([row[m].mean for m in methods])
        r = average_ranks(-scores if higher else scores)
        ranks[dataset] = dict(zip(methods, r.tolist()))
    average = {m: float(np.mean([ranks[d][m] for d in ranks])) for m in methods}
    return RankTable(ranks, average)


# ---------------------------------------------------------------------------
# export


def curve_table(records: list[ScoreRecord], split: str = "test") -> dict:
    """(dataset, method) -> rows of (hyperparameter, mean, std) sorted by hyperparameter."""
    out = defaultdict(list)
    for (dataset, method, hp), seeds in _group(records, split).items():
        v = np.array(list(seeds.values()))
        out[(dataset, method)].append((hp, float(v.mean()), float(v.std())))
    return {k: sorted(rows, key=lambda r: _hp_key(r[0])) for k, rows in sorted(out.items())}


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in text)


def export_curves(records: list[ScoreRecord], out_dir, split: str = "test") -> list[Path]:
    """One ``<dataset>__<method>.csv`` per pair with columns hyperparam, mean, std."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for (dataset, method), rows in curve_table(records, split).items():
        path = out_dir / f"{_slug(dataset)}__{_slug(method)}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["hyperparam", "mean", "std"])
            for hp, mean, std in rows:
                w.writerow(["" if hp is None else repr(hp), repr(mean), repr(std)])
        paths.append(path)
    return paths


def _fmt(value: float, metric: str) -> str:
    if metric == "RMSE":
        return f"{value:.4f}"
    return f"{100 * value:.2f}"


def write_report(cells: list[Cell], table: RankTable, out_dir, method_order=None) -> dict:
    """Write ``report.csv`` (one row per method, one column per dataset plus
    Rank), ``report.md`` with best in bold and second in underline, and
    ``summary.csv`` with the raw numbers."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = sorted({c.dataset for c in cells})
    methods = method_order or sorted({c.method for c in cells})
    methods = [m for m in methods if m in table.average]
    lookup = {(c.dataset, c.method): c for c in cells}

    def cell_text(c: Cell) -> str:
        text = f"{_fmt(c.mean, c.metric)} ± {_fmt(c.std, c.metric)}"
        return text if c.hyperparameter is None else f"{text} ({c.hyperparameter:g})"

    header = ["method"] + [
        f"{d} {'↑' if lookup[(d, methods[0])].higher_is_better else '↓'}" for d in datasets
    ] + ["Rank"]
    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for m in methods:
            w.writerow([m] + [cell_text(lookup[(d, m)]) for d in datasets] + [f"{table.average[m]:.2f}"])

    marks = {}
    for d in datasets:
        order = sorted(methods, key=lambda m: table.ranks[d][m])
        for pos, m in enumerate(order[:2]):
            marks[(d, m)] = pos
    avg_order = sorted(methods, key=lambda m: table.average[m])
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for m in methods:
        row = [m]
        for d in datasets + ["Rank"]:
            text = f"{table.average[m]:.2f}" if d == "Rank" else cell_text(lookup[(d, m)])
            pos = avg_order.index(m) if d == "Rank" and avg_order.index(m) < 2 else marks.get((d, m))
            if pos == 0:
                text = f"**{text}**"
            elif pos == 1:
                text = f"<u>{text}</u>"
            row.append(text)
        lines.append("| " + " | ".join(row) + " |")
    (out_dir / "report.md").write_text("\n".join(lines) + "\n", encoding="utf-8")

    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "method", "metric", "hyperparameter", "test_mean", "test_std",
                    "val_mean", "n_seeds", "rank"])
        for c in sorted(cells, key=lambda c: (c.dataset, c.method)):
            w.writerow([c.dataset, c.method, c.metric, "" if c.hyperparameter is None else c.hyperparameter,
                        repr(c.mean), repr(c.std), repr(c.val_mean), c.n_seeds, table.ranks[c.dataset][c.method]])
    return {"report": out_dir / "report.csv", "markdown": out_dir / "report.md",
            "summary": out_dir / "summary.csv"}
