"""Mask token replacement and the baseline augmentations.

Input-space methods (SCARF, Cutmix) act on the preprocessed feature arrays,
embedding-space methods (MTR, HiddenMix) on the (B, k, d) token tensor before
the CLS token is appended, and Manifold Mixup on the encoded CLS rows.

Each mixing method returns its label coefficient wrapped in a
:class:`MixedTarget` so the orientation cannot be confused downstream:

    cutmix          (1 - lam') * y_i + lam' * y_j
    hiddenmix       lam * y_i + (1 - lam) * y_j
    manifold_mixup  (1 - lam) * y_i + lam * y_j
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as tn
from .losses import task_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

METHODS = (
    "none",
    "mtr_after_bias",
    "mtr_before_bias",
    "scarf",
    "cutmix",
    "hiddenmix",
    "manifold_mixup",
)
ALIASES = {"mtr": "mtr_after_bias", "w/o DA": "none", "supervised": "none"}
MASK_METHODS = ("mtr_after_bias", "mtr_before_bias", "scarf")
MIX_METHODS = ("cutmix", "hiddenmix", "manifold_mixup")
INPUT_SPACE = ("scarf", "cutmix")
EMBEDDING_SPACE = ("mtr_after_bias", "mtr_before_bias", "hiddenmix")
CLS_SPACE = ("manifold_mixup",)

# Incremented by every augmentation op; evaluation code must leave it alone.
CALLS: Counter = Counter()


def canonical_method(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in METHODS:
        raise ValueError(f"unknown augmentation method {name!r}")
    return name


@dataclass
class AugmentationSpec:
    method: str = "none"
    param: Optional[float] = None  # p_m for masking methods, alpha for mixing methods
    apply_probability: float = 0.5
    label_mixing: bool = True
    # MTR Bernoulli draws: independent per sample (False) or one row shared by the batch
    shared_mask: bool = False

    def __post_init__(self):
        self.method = canonical_method(self.method)
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must be in [0, 1]")
        if self.method in MASK_METHODS:
            if self.param is None or not 0.0 <= self.param <= 1.0:
                raise ValueError(f"{self.method} needs p_m in [0, 1], got {self.param}")
        elif self.method in MIX_METHODS:
            if self.param is None or self.param <= 0:
                raise ValueError(f"{self.method} needs alpha > 0, got {self.param}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MixedTarget:
    """Loss target ``weight * y_a + (1 - weight) * y_b``; ``y_b`` is None when unmixed."""

    y_a: np.ndarray
    y_b: Optional[np.ndarray] = None
    weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"mixing coefficient {self.weight} outside [0, 1]")

    @classmethod
    def plain(cls, y) -> "MixedTarget":
        return cls(np.asarray(y))

    @classmethod
    def cutmix(cls, y, y_other, swapped_fraction: float) -> "MixedTarget":
        return cls(np.asarray(y), np.asarray(y_other), 1.0 - swapped_fraction)

    @classmethod
    def hiddenmix(cls, y, y_other, lam: float) -> "MixedTarget":
        return cls(np.asarray(y), np.asarray(y_other), lam)

    @classmethod
    def manifold_mixup(cls, y, y_other, lam: float) -> "MixedTarget":
        return cls(np.asarray(y), np.asarray(y_other), 1.0 - lam)

    @property
    def mixed(self) -> bool:
        return self.y_b is not None and self.weight != 1.0


@dataclass
class ColumnMarginals:
    """Training-split values of every column, in preprocessed space."""

    numeric: list
    categorical: list

    @classmethod
    def from_train(cls, x_num: np.ndarray, x_cat: np.ndarray) -> "ColumnMarginals":
        return cls([np.array(c) for c in np.asarray(x_num).T],
                   [np.array(c) for c in np.asarray(x_cat).T])


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Beta(alpha, alpha) via the ratio of two Gamma(alpha) draws."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    g1, g2 = rng.gamma(alpha), rng.gamma(alpha)
    total = g1 + g2
    return 0.5 if total == 0 else float(g1 / total)


def pair_within_batch(batch_size: int, rng: np.random.Generator) -> Optional[np.ndarray]:
    """Partner index for every sample (a random permutation), or None for B < 2."""
    if batch_size < 2:
        log.info("batch of size %d cannot be mixed; augmentation skipped", batch_size)
        return None
    return rng.permutation(batch_size)


# ---------------------------------------------------------------------------
# mask token replacement


def bernoulli_mask(shape, p: float, rng: np.random.Generator, shared: bool = False) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability must be in [0, 1], got {p}")
    if shared:
        row = rng.random(shape[1:]) < p
        return np.broadcast_to(row, shape).copy()
    return rng.random(shape) < p


def mtr_after_bias(tokens, p_m: float, mask_token, rng: np.random.Generator,
                   shared: bool = False) -> tuple[Tensor, np.ndarray]:
    """Replace whole token rows by ``mask_token`` with probability ``p_m`` each."""
    CALLS["mtr_after_bias"] += 1
    tokens = tn.as_tensor(tokens)
    mask = bernoulli_mask(tokens.shape[:2], p_m, rng, shared)
    out = tn.where(mask[:, :, None], mask_token, tokens)
    return out, mask


def mtr_before_bias(tokenizer, x_num, x_cat, p_m: float, mask_token,
                    rng: np.random.Generator, shared: bool = False) -> tuple[Tensor, np.ndarray]:
    """Replace only the value term of masked columns, keeping the column bias."""
    CALLS["mtr_before_bias"] += 1
    values = tokenizer.value_terms(x_num, x_cat)
    mask = bernoulli_mask(values.shape[:2], p_m, rng, shared)
    return tn.where(mask[:, :, None], mask_token, values) + tokenizer.biases(), mask


# ---------------------------------------------------------------------------
# input space


def scarf_corrupt(x_num, x_cat, p_m: float, marginals: ColumnMarginals,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Replace each cell with probability ``p_m`` by a uniform draw from the
    same column's training values."""
    CALLS["scarf"] += 1
    if not 0.0 <= p_m <= 1.0:
        raise ValueError(f"p_m must be in [0, 1], got {p_m}")
    out = []
    for block, columns in ((x_num, marginals.numeric), (x_cat, marginals.categorical)):
        block = np.array(block)
        b = block.shape[0]
        for j, values in enumerate(columns):
            if len(values) == 0:
                raise ValueError(f"empty training marginal for column {j}")
            hit = rng.random(b) < p_m
            draws = values[rng.integers(0, len(values), size=b)]
            block[:, j] = np.where(hit, draws, block[:, j])
        out.append(block)
    return out[0], out[1]


def _choose_columns(k: int, n: int, rng: np.random.Generator, rows: int) -> np.ndarray:
    """(rows, k) boolean matrix with exactly ``n`` True per row, uniformly placed."""
    order = np.argsort(rng.random((rows, k)), axis=1)
    chosen = np.zeros((rows, k), dtype=bool)
    np.put_along_axis(chosen, order[:, :n], True, axis=1)
    return chosen


def cutmix_pair(x_i, x_j, alpha: float, rng: np.random.Generator,
                lam: Optional[float] = None) -> tuple[np.ndarray, float]:
    """Copy floor(lam*k) randomly chosen entries of ``x_j`` into ``x_i``.

    Returns the mixed row and the realised swap fraction lam' = floor(lam*k)/k.
    """
    CALLS["cutmix"] += 1
    x_i, x_j = np.asarray(x_i), np.asarray(x_j)
    k = x_i.shape[-1]
    if k == 0:
        raise ValueError("cutmix needs at least one column")
    lam = sample_lambda(alpha, rng) if lam is None else lam
    n = int(np.floor(lam * k))
    chosen = _choose_columns(k, n, rng, 1)[0]
    return np.where(chosen, x_j, x_i), n / k


def cutmix_batch(x_num, x_cat, partner: np.ndarray, alpha: float,
                 rng: np.random.Generator, lam: Optional[float] = None):
    """Batched Cutmix: one lam per batch, independent column sets per sample.

    Returns ``(x_num, x_cat, lam_prime, swap_mask)``.
    """
    CALLS["cutmix"] += 1
    x_num, x_cat = np.asarray(x_num), np.asarray(x_cat)
    b, kn = x_num.shape
    k = kn + x_cat.shape[1]
    if k == 0:
        raise ValueError("cutmix needs at least one column")
    lam = sample_lambda(alpha, rng) if lam is None else lam
    n = int(np.floor(lam * k))
    chosen = _choose_columns(k, n, rng, b)
    new_num = np.where(chosen[:, :kn], x_num[partner], x_num)
    new_cat = np.where(chosen[:, kn:], x_cat[partner], x_cat)
    return new_num, new_cat, n / k, chosen


# ---------------------------------------------------------------------------
# embedding and CLS space mixing


def hiddenmix_pair(t_i, t_j, alpha: float, rng: np.random.Generator,
                   lam: Optional[float] = None):
    """S * t_i + (1 - S) * t_j where every row of S is the same 0/1 vector with
    floor(lam*d) ones. Returns ``(mixed, lam, S)``."""
    CALLS["hiddenmix"] += 1
    t_i, t_j = np.asarray(t_i), np.asarray(t_j)
    if t_i.shape != t_j.shape:
        raise tn.ShapeError(f"hiddenmix: shapes {t_i.shape} and {t_j.shape} differ")
    k, d = t_i.shape
    lam = sample_lambda(alpha, rng) if lam is None else lam
    s = _choose_columns(d, int(np.floor(lam * d)), rng, 1)[0]
    S = np.broadcast_to(s, (k, d)).astype(np.float64)
    return S * t_i + (1.0 - S) * t_j, lam, S


def hiddenmix_batch(tokens, partner: np.ndarray, alpha: float, rng: np.random.Generator,
                    lam: Optional[float] = None):
    """Batched HiddenMix on a (B, k, d) tensor: one lam per batch, one
    dimension subset per sample. Returns ``(mixed, lam, s)`` with ``s`` (B, d)."""
    CALLS["hiddenmix"] += 1
    tokens = tn.as_tensor(tokens)
    b, _, d = tokens.shape
    lam = sample_lambda(alpha, rng) if lam is None else lam
    s = _choose_columns(d, int(np.floor(lam * d)), rng, b)
    return tn.where(s[:, None, :], tokens, tokens[partner]), lam, s


def manifold_mixup_pair(c_i, c_j, alpha: float, rng: np.random.Generator,
                        lam: Optional[float] = None):
    """(1 - lam) * c_i + lam * c_j. Returns ``(mixed, lam)``."""
    CALLS["manifold_mixup"] += 1
    lam = sample_lambda(alpha, rng) if lam is None else lam
    return (1.0 - lam) * np.asarray(c_i) + lam * np.asarray(c_j), lam


def manifold_mixup_batch(cls_rows, partner: np.ndarray, alpha: float,
                         rng: np.random.Generator, lam: Optional[float] = None):
    CALLS["manifold_mixup"] += 1
    cls_rows = tn.as_tensor(cls_rows)
    lam = sample_lambda(alpha, rng) if lam is None else lam
    return cls_rows * (1.0 - lam) + cls_rows[partner] * lam, lam


# ---------------------------------------------------------------------------


def mixed_loss(logits, target: MixedTarget, task: str) -> Tensor:
    """Task loss against a possibly mixed target.

    Classification weights the two per-target losses; regression regresses on
    the mixed target value.
    """
    if not target.mixed:
        return task_loss(logits, target.y_a, task)
    w = target.weight
    if task == "regression":
        y = w * np.asarray(target.y_a, dtype=np.float64) + (1.0 - w) * np.asarray(target.y_b, dtype=np.float64)
        return task_loss(logits, y, task)
    return task_loss(logits, target.y_a, task) * w + task_loss(logits, target.y_b, task) * (1.0 - w)
