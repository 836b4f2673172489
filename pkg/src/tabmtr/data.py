"""Dataset ingestion, splitting, preprocessing and batching.

Every fitted statistic (quantile knots, category maps, imputation medians,
target mean/std, SCARF marginals) comes from the train split only:
:func:`fit_preprocess` takes nothing else.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.special import ndtri

from .augment import ColumnMarginals
from .model import ColumnSchema

METRIC_FOR_TASK = {"binary": "AUC", "multiclass": "ACC", "regression": "RMSE"}
HIGHER_IS_BETTER = {"AUC": True, "ACC": True, "RMSE": False}
MISSING_TOKENS = {"", "na", "nan", "null", "none", "?"}
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
VAL_LIMIT = 20_000
QUANTILE_KNOTS = 1000
BUNDLE_FORMAT_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class RawDataset:
    name: str
    numeric_names: list[str]
    categorical_names: list[str]
    numeric: np.ndarray  # (n, k_num) float, NaN marks a missing cell
    categorical: np.ndarray  # (n, k_cat) str
    target: np.ndarray  # float for regression, int class index otherwise
    task: str
    metric: str
    classes: list = field(default_factory=list)
    missing: dict = field(default_factory=dict)  # column -> count of missing cells

    def __post_init__(self):
        if self.task not in METRIC_FOR_TASK:
            raise DataError(f"unknown task {self.task!r}")
        if METRIC_FOR_TASK[self.task] != self.metric:
            raise DataError(f"metric {self.metric} does not fit task {self.task}")

    def __len__(self) -> int:
        return len(self.target)

    @property
    def n_features(self) -> int:
        return len(self.numeric_names) + len(self.categorical_names)

    @property
    def n_classes(self) -> int:
        return len(self.classes) if self.task != "regression" else 0

    def take(self, idx) -> "RawDataset":
        return RawDataset(self.name, self.numeric_names, self.categorical_names,
                          self.numeric[idx], self.categorical[idx], self.target[idx],
                          self.task, self.metric, self.classes, dict(self.missing))


# ---------------------------------------------------------------------------
# CSV


def load_descriptor(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        desc = json.load(fh)
    for key in ("columns", "target", "task"):
        if key not in desc:
            raise DataError(f"schema descriptor lacks {key!r}")
    desc.setdefault("metric", METRIC_FOR_TASK.get(desc["task"]))
    return desc


def _parse_float(cell: str) -> float:
    if cell.strip().lower() in MISSING_TOKENS:
        return float("nan")
    return float(cell)


def load_csv(path, descriptor: dict, name: Optional[str] = None) -> RawDataset:
    """Parse a UTF-8 CSV with a header row according to ``descriptor``.

    ``descriptor`` is ``{"columns": [{"name", "kind"}], "target", "task", "metric"}``
    with kind ``numeric`` or ``categorical``.
    """
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    columns = descriptor["columns"]
    wanted = [c["name"] for c in columns] + [descriptor["target"]]
    missing_cols = [c for c in wanted if c not in header]
    if missing_cols:
        raise DataError(f"{path}: header lacks columns {missing_cols}")
    pos = {h: i for i, h in enumerate(header)}
    body = [r for r in rows[1:] if r]
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(r)}")

    numeric_names = [c["name"] for c in columns if c["kind"] == "numeric"]
    categorical_names = [c["name"] for c in columns if c["kind"] == "categorical"]
    bad = [c for c in columns if c["kind"] not in ("numeric", "categorical")]
    if bad:
        raise DataError(f"unknown column kind in {bad}")

    numeric = np.empty((len(body), len(numeric_names)))
    missing = {}
    for j, col in enumerate(numeric_names):
        for i, r in enumerate(body):
            try:
                numeric[i, j] = _parse_float(r[pos[col]])
            except ValueError:
                raise DataError(f"{path}:{i + 2}: column {col!r} has non-numeric value {r[pos[col]]!r}") from None
        missing[col] = int(np.isnan(numeric[:, j]).sum())
    categorical = np.array([[r[pos[c]].strip() for c in categorical_names] for r in body],
                           dtype=object).reshape(len(body), len(categorical_names))
    for j, col in enumerate(categorical_names):
        missing[col] = int(sum(v.lower() in MISSING_TOKENS for v in categorical[:, j]))

    raw_target = [r[pos[descriptor["target"]]].strip() for r in body]
    if any(t.lower() in MISSING_TOKENS for t in raw_target):
        raise DataError(f"{path}: missing target values")
    task = descriptor["task"]
    if task == "regression":
        try:
            target = np.array([float(t) for t in raw_target])
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric regression target ({exc})") from None
        classes: list = []
    else:
        classes = sorted(set(raw_target), key=_label_key)
        if task == "binary" and len(classes) != 2:
            raise DataError(f"binary task needs 2 classes, found {len(classes)}")
        lookup = {c: i for i, c in enumerate(classes)}
        target = np.array([lookup[t] for t in raw_target], dtype=np.int64)
    return RawDataset(name or Path(path).stem, numeric_names, categorical_names, numeric,
                      categorical, target, task, descriptor.get("metric") or METRIC_FOR_TASK[task],
                      classes, missing)


def _label_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


# ---------------------------------------------------------------------------
# split


def split_indices(n: int, seed: int, labels: Optional[np.ndarray] = None,
                  val_limit: int = VAL_LIMIT) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded 6:2:2 partition of ``range(n)``, stratified when ``labels`` is given.

    Stratification sorts samples by their (jittered) relative position inside
    their own class, so every prefix of the order holds each class in
    proportion. The validation part is truncated to ``val_limit`` rows.
    """
    if n < 10:
        raise DataError(f"need at least 10 rows to split, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    if labels is not None:
        labels = np.asarray(labels)
        key = np.empty(n)
        for c in np.unique(labels):
            members = perm[labels[perm] == c]
            key[members] = (np.arange(len(members)) + rng.random(len(members))) / len(members)
        order = perm[np.argsort(key[perm], kind="stable")]
    else:
        order = perm
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    train, val, test = order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]
    return train, val[:val_limit], test


def split(raw: RawDataset, seed: int, val_limit: int = VAL_LIMIT):
    labels = raw.target if raw.task != "regression" else None
    tr, va, te = split_indices(len(raw), seed, labels, val_limit)
    if labels is not None:
        absent = set(range(raw.n_classes)) - set(np.unique(raw.target[tr]).tolist())
        if absent:
            names = [raw.classes[i] for i in sorted(absent)]
            raise DataError(f"classes {names} absent from the train split (seed {seed})")
    return raw.take(tr), raw.take(va), raw.take(te)


# ---------------------------------------------------------------------------
# transforms


class QuantileTransform:
    """Empirical CDF of one column mapped to standard-normal quantiles.

    Uses at most ``n_knots`` reference quantiles with linear interpolation
    between them. Ties are handled by averaging the forward and backward
    interpolations, so constant stretches map to their mid-probability.
    """

    BOUND = 1e-7

    def __init__(self, n_knots: int = QUANTILE_KNOTS):
        self.n_knots = n_knots
        self.knots: Optional[np.ndarray] = None
        self.probs: Optional[np.ndarray] = None

    def fit(self, values: np.ndarray) -> "QuantileTransform":
        values = np.asarray(values, dtype=np.float64)
        values = values[~np.isnan(values)]
        if values.size == 0:
            raise DataError("cannot fit a quantile transform on an empty column")
        m = max(2, min(self.n_knots, values.size))
        self.probs = np.linspace(0.0, 1.0, m)
        self.knots = np.quantile(values, self.probs)
        return self

    def cdf(self, values) -> np.ndarray:
        x = np.asarray(values, dtype=np.float64)
        fwd = np.interp(x, self.knots, self.probs)
        bwd = -np.interp(-x, -self.knots[::-1], -self.probs[::-1])
        return 0.5 * (fwd + bwd)

    def transform(self, values) -> np.ndarray:
        p = np.clip(self.cdf(values), self.BOUND, 1.0 - self.BOUND)
        return ndtri(p)

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileTransform":
        qt = cls(len(d["knots"]))
        qt.knots, qt.probs = np.array(d["knots"]), np.array(d["probs"])
        return qt


class OrdinalEncoding:
    """Sorted training categories -> 0..n-1; anything else -> the unknown index n."""

    def __init__(self, categories: Optional[list] = None):
        self.categories = list(categories or [])
        self._index = {c: i for i, c in enumerate(self.categories)}

    def fit(self, values) -> "OrdinalEncoding":
        self.categories = sorted({str(v) for v in values})
        self._index = {c: i for i, c in enumerate(self.categories)}
        return self

    @property
    def unknown_index(self) -> int:
        return len(self.categories)

    @property
    def cardinality(self) -> int:
        return len(self.categories) + 1

    def transform(self, values) -> np.ndarray:
        unknown = self.unknown_index
        return np.array([self._index.get(str(v), unknown) for v in values], dtype=np.int64)


@dataclass
class FittedPreprocess:
    numeric_median: list[float]
    quantiles: list[QuantileTransform]
    encoders: list[OrdinalEncoding]
    target_mean: float = 0.0
    target_std: float = 1.0
    task: str = "binary"

    def apply(self, raw: RawDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = len(raw)
        x_num = np.empty((n, len(self.quantiles)))
        for j, qt in enumerate(self.quantiles):
            col = raw.numeric[:, j].copy()
            col[np.isnan(col)] = self.numeric_median[j]
            x_num[:, j] = qt.transform(col)
        x_cat = np.empty((n, len(self.encoders)), dtype=np.int64)
        for j, enc in enumerate(self.encoders):
            x_cat[:, j] = enc.transform(raw.categorical[:, j])
        if self.task == "regression":
            y = (raw.target.astype(np.float64) - self.target_mean) / self.target_std
        else:
            y = raw.target.astype(np.int64)
        return x_num, x_cat, y


def fit_preprocess(train: RawDataset, n_knots: int = QUANTILE_KNOTS) -> FittedPreprocess:
    medians, quantiles = [], []
    for j in range(train.numeric.shape[1]):
        col = train.numeric[:, j]
        if np.all(np.isnan(col)):
            raise DataError(f"numeric column {train.numeric_names[j]!r} is empty in train")
        med = float(np.nanmedian(col))
        filled = np.where(np.isnan(col), med, col)
        medians.append(med)
        quantiles.append(QuantileTransform(n_knots).fit(filled))
    encoders = [OrdinalEncoding().fit(train.categorical[:, j])
                for j in range(train.categorical.shape[1])]
    mean, std = 0.0, 1.0
    if train.task == "regression":
        mean = float(train.target.mean())
        std = float(train.target.std())
        if std == 0.0:
            raise DataError("regression target has zero variance in train")
    return FittedPreprocess(medians, quantiles, encoders, mean, std, train.task)


def apply_preprocess(fitted: FittedPreprocess, raw: RawDataset):
    return fitted.apply(raw)


# ---------------------------------------------------------------------------
# bundles and batching


def batch_size_for(train_size: int) -> int:
    """Batch size by train-split row count.

    "more than 50,000" and "less than 1,000" are strict, so the middle bins
    include their lower bound: 1,000 -> 128 and 50,000 -> 512.
    """
    if train_size > 50_000:
        return 1024
    if train_size >= 10_000:
        return 512
    if train_size >= 5_000:
        return 256
    if train_size >= 1_000:
        return 128
    return 64


@dataclass
class Split:
    x_num: np.ndarray
    x_cat: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "Split":
        return Split(self.x_num[idx], self.x_cat[idx], self.y[idx])


@dataclass
class DatasetBundle:
    name: str
    seed: int
    schema: ColumnSchema
    task: str
    metric: str
    n_classes: int
    train: Split
    val: Split
    test: Split
    target_mean: float
    target_std: float
    batch_size: int
    fitted: Optional[FittedPreprocess] = None

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.task == "multiclass" else 1

    @property
    def marginals(self) -> ColumnMarginals:
        return ColumnMarginals.from_train(self.train.x_num, self.train.x_cat)

    def subsample_train(self, fraction: float, seed: int) -> "DatasetBundle":
        """Copy of the bundle keeping floor(fraction * |train|) train rows."""
        n = int(np.floor(fraction * len(self.train)))
        if n < 2:
            raise DataError(f"train fraction {fraction} leaves {n} rows")
        idx = np.sort(np.random.default_rng(seed).permutation(len(self.train))[:n])
        return DatasetBundle(self.name, self.seed, self.schema, self.task, self.metric,
                             self.n_classes, self.train.take(idx), self.val, self.test,
                             self.target_mean, self.target_std, batch_size_for(n), self.fitted)

    def save(self, path) -> None:
        meta = {
            "format_version": BUNDLE_FORMAT_VERSION, "name": self.name, "seed": self.seed,
            "schema": self.schema.to_dict(), "task": self.task, "metric": self.metric,
            "n_classes": self.n_classes, "target_mean": self.target_mean,
            "target_std": self.target_std, "batch_size": self.batch_size,
        }
        arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
        for part in ("train", "val", "test"):
            s = getattr(self, part)
            arrays[f"{part}_x_num"], arrays[f"{part}_x_cat"], arrays[f"{part}_y"] = s.x_num, s.x_cat, s.y
        tmp = Path(f"{path}.tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "DatasetBundle":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format_version") != BUNDLE_FORMAT_VERSION:
                raise DataError(f"unsupported bundle format in {path}")
            parts = {p: Split(data[f"{p}_x_num"], data[f"{p}_x_cat"], data[f"{p}_y"])
                     for p in ("train", "val", "test")}
        return cls(meta["name"], meta["seed"], ColumnSchema.from_dict(meta["schema"]), meta["task"],
                   meta["metric"], meta["n_classes"], parts["train"], parts["val"], parts["test"],
                   meta["target_mean"], meta["target_std"], meta["batch_size"])


def build_bundle(raw: RawDataset, seed: int, val_limit: int = VAL_LIMIT) -> DatasetBundle:
    """Split with ``seed``, fit preprocessing on train, transform all splits."""
    train, val, test = split(raw, seed, val_limit)
    fitted = fit_preprocess(train)
    parts = [Split(*fitted.apply(s)) for s in (train, val, test)]
    schema = ColumnSchema(list(raw.numeric_names), list(raw.categorical_names),
                          [e.cardinality for e in fitted.encoders])
    return DatasetBundle(raw.name, seed, schema, raw.task, raw.metric, raw.n_classes, *parts,
                         fitted.target_mean, fitted.target_std, batch_size_for(len(train)), fitted)


def batches(split: Split, batch_size: int, shuffle: bool = False,
            rng: Optional[np.random.Generator] = None) -> Iterator[Split]:
    """Consecutive batches; the last one may be short."""
    n = len(split)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield split.take(order[start:start + batch_size])


# ---------------------------------------------------------------------------
# synthetic data

SYNTHETIC_KINDS = ("two_gaussians_binary", "redundant_columns_binary", "linear_regression",
                   "multiclass_blobs")
TWO_GAUSSIANS_SEPARATION = 4.0  # distance between the class means


def _numeric_only(name, x, y, task, classes, cat=None, cat_names=()):
    n = len(y)
    cat = np.empty((n, 0), dtype=object) if cat is None else cat
    return RawDataset(name, [f"x{j}" for j in range(x.shape[1])], list(cat_names), x, cat, y,
                      task, METRIC_FOR_TASK[task], classes, {})


def synth_generate(kind: str, n: int, seed: int, n_features: Optional[int] = None) -> RawDataset:
    """Seeded synthetic datasets used by tests and example configs.

    two_gaussians_binary
        6 numeric columns, classes N(-m, I) / N(+m, I) with |2m| = 4, plus two
        categorical noise columns. Bayes AUC = Phi(4 / sqrt 2) ~ 0.9977.
    redundant_columns_binary
        ``n_features`` (default 20) numeric columns, each a noisy copy of one of
        5 latent factors; the label is a noisy linear threshold on the factors.
    linear_regression
        6 numeric columns and one categorical column with additive effects.
    multiclass_blobs
        5 Gaussian blobs in 8 dimensions.
    """
    rng = np.random.default_rng(seed)
    if kind == "two_gaussians_binary":
        k = n_features or 6
        y = rng.integers(0, 2, size=n)
        half = TWO_GAUSSIANS_SEPARATION / 2 / np.sqrt(k)
        x = rng.normal(size=(n, k)) + np.where(y[:, None] == 1, half, -half)
        cat = np.stack([np.array([f"c{v}" for v in rng.integers(0, m, size=n)], dtype=object)
                        for m in (3, 5)], axis=1)
        return _numeric_only(kind, x, y.astype(np.int64), "binary", ["0", "1"], cat, ("noise_a", "noise_b"))
    if kind == "redundant_columns_binary":
        k = n_features or 20
        n_latent = 5
        z = rng.normal(size=(n, n_latent))
        x = z[:, np.arange(k) % n_latent] + 0.1 * rng.normal(size=(n, k))
        w = np.ones(n_latent) / np.sqrt(n_latent)
        y = (z @ w + 0.3 * rng.normal(size=n) > 0).astype(np.int64)
        return _numeric_only(kind, x, y, "binary", ["0", "1"])
    if kind == "linear_regression":
        k = n_features or 6
        x = rng.normal(size=(n, k))
        w = rng.normal(size=k)
        levels = rng.integers(0, 4, size=n)
        effect = np.array([-1.0, 0.0, 0.5, 1.5])[levels]
        y = 3.0 + x @ w + effect + 0.1 * rng.normal(size=n)
        cat = np.array([f"l{v}" for v in levels], dtype=object).reshape(n, 1)
        return _numeric_only(kind, x, y, "regression", [], cat, ("level",))
    if kind == "multiclass_blobs":
        k = n_features or 8
        n_classes = 5
        centers = rng.normal(scale=1.5, size=(n_classes, k))
        y = rng.integers(0, n_classes, size=n)
        x = centers[y] + rng.normal(size=(n, k))
        return _numeric_only(kind, x, y.astype(np.int64), "multiclass", [str(c) for c in range(n_classes)])
    raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
