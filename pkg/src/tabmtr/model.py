"""Feature tokenizer, CLS/MASK tokens, encoder stack and heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tn
from .nn import LayerNorm, Linear, Module, TransformerBlock, parameter
from .tensor import Tensor


@dataclass
class ColumnSchema:
    """Column layout: all numeric columns first, then categorical ones.

    ``cardinalities[j]`` counts the categories of categorical column ``j``
    including its reserved unknown index (the last one).
    """

    numeric: list[str] = field(default_factory=list)
    categorical: list[str] = field(default_factory=list)
    cardinalities: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.categorical) != len(self.cardinalities):
            raise ValueError("one cardinality per categorical column is required")
        if self.n_features < 1:
            raise ValueError("schema needs at least one column")
        if any(c < 2 for c in self.cardinalities):
            raise ValueError("categorical cardinality must be >= 2 (categories + unknown)")

    @property
    def n_numeric(self) -> int:
        return len(self.numeric)

    @property
    def n_categorical(self) -> int:
        return len(self.categorical)

    @property
    def n_features(self) -> int:
        return self.n_numeric + self.n_categorical

    @property
    def names(self) -> list[str]:
        return self.numeric + self.categorical

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSchema":
        return cls(list(d["numeric"]), list(d["categorical"]), [int(c) for c in d["cardinalities"]])


@dataclass
class ModelConfig:
    d_token: int = 192
    n_blocks: int = 3
    n_heads: int = 8
    attention_dropout: float = 0.2
    ffn_dropout: float = 0.1
    residual_dropout: float = 0.0
    ffn_factor: float = 4 / 3
    projection_dim: Optional[int] = None  # SSL latent size h; defaults to d_token

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, d, shape):
    bound = 1.0 / math.sqrt(d)
    return rng.uniform(-bound, bound, size=shape)


class FeatureTokenizer(Module):
    """Per-column affine embeddings.

    Numeric column j: ``bias_j + x_j * weight_j``. Categorical column j:
    ``bias_j + table_j[x_j]``. The categorical tables are stored stacked in a
    single matrix and addressed through per-column row offsets.
    """

    no_decay_all = True

    def __init__(self, schema: ColumnSchema, d: int, rng: np.random.Generator):
        self.schema = schema
        self.d = d
        kn, kc = schema.n_numeric, schema.n_categorical
        self.num_weight = parameter(_uniform(rng, d, (kn, d))) if kn else None
        self.num_bias = parameter(_uniform(rng, d, (kn, d))) if kn else None
        if kc:
            self.cat_table = parameter(_uniform(rng, d, (sum(schema.cardinalities), d)))
            self.cat_bias = parameter(_uniform(rng, d, (kc, d)))
            self.cat_offsets = np.concatenate([[0], np.cumsum(schema.cardinalities)[:-1]]).astype(np.int64)
        else:
            self.cat_table = self.cat_bias = None
            self.cat_offsets = np.zeros(0, dtype=np.int64)

    def _check(self, x_num, x_cat):
        kn, kc = self.schema.n_numeric, self.schema.n_categorical
        x_num = np.zeros((len(x_cat), 0)) if x_num is None else np.asarray(x_num, dtype=np.float64)
        x_cat = np.zeros((len(x_num), 0), dtype=np.int64) if x_cat is None else np.asarray(x_cat)
        if x_num.ndim != 2 or x_num.shape[1] != kn:
            raise tn.ShapeError(f"expected numeric block of shape (B, {kn}), got {x_num.shape}")
        if x_cat.ndim != 2 or x_cat.shape[1] != kc:
            raise tn.ShapeError(f"expected categorical block of shape (B, {kc}), got {x_cat.shape}")
        if not np.all(np.isfinite(x_num)):
            raise ValueError("numeric features must be finite")
        if kc:
            card = np.asarray(self.schema.cardinalities)
            if np.any(x_cat < 0) or np.any(x_cat >= card):
                raise IndexError("categorical index out of range; map unknowns upstream")
        return x_num, x_cat.astype(np.int64)

    def value_terms(self, x_num, x_cat) -> Tensor:
        """The value-dependent part of every token, shape (B, k, d)."""
        x_num, x_cat = self._check(x_num, x_cat)
        parts = []
        if self.num_weight is not None:
            parts.append(tn.Tensor(x_num[:, :, None]) * self.num_weight)
        if self.cat_table is not None:
            parts.append(tn.gather_rows(self.cat_table, x_cat + self.cat_offsets))
        return parts[0] if len(parts) == 1 else tn.concat(parts, axis=1)

    def biases(self) -> Tensor:
        """Per-column biases stacked to shape (k, d)."""
        parts = [b for b in (self.num_bias, self.cat_bias) if b is not None]
        return parts[0] if len(parts) == 1 else tn.concat(parts, axis=0)

    def __call__(self, x_num, x_cat) -> Tensor:
        return self.value_terms(x_num, x_cat) + self.biases()


class Head(Module):
    """LayerNorm -> relu -> linear on the CLS embedding."""

    def __init__(self, d: int, n_outputs: int, rng: np.random.Generator):
        self.norm = LayerNorm(d)
        self.linear = Linear(d, n_outputs, rng)

    def __call__(self, cls_embedding) -> Tensor:
        return self.linear(tn.relu(self.norm(cls_embedding)))


class PredictionHead(Module):
    """Two-layer projector used for contrastive pretraining."""

    def __init__(self, d: int, h: int, rng: np.random.Generator):
        self.hidden = Linear(d, d, rng)
        self.out = Linear(d, h, rng)

    def __call__(self, cls_embedding) -> Tensor:
        return self.out(tn.relu(self.hidden(cls_embedding)))


class TabTransformer(Module):
    """Tokenizer -> append CLS -> transformer blocks -> head on the CLS row.

    A single learnable ``mask_token`` is shared by all columns. The CLS token is
    appended as the last row of the sequence.
    """

    no_decay = ("cls_token", "mask_token")

    def __init__(self, schema: ColumnSchema, n_outputs: int, config: ModelConfig | None = None,
                 seed: int = 0):
        config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        d = config.d_token
        self.schema = schema
        self.config = config
        self.n_outputs = n_outputs
        self.tokenizer = FeatureTokenizer(schema, d, rng)
        self.cls_token = parameter(_uniform(rng, d, d))
        self.mask_token = parameter(_uniform(rng, d, d))
        self.blocks = [
            TransformerBlock(d, rng, config.n_heads, config.attention_dropout,
                             config.ffn_dropout, config.residual_dropout, config.ffn_factor)
            for _ in range(config.n_blocks)
        ]
        self.head = Head(d, n_outputs, rng)
        self.projector = PredictionHead(d, config.projection_dim or d, rng)

    @property
    def d(self) -> int:
        return self.config.d_token

    def tokenize(self, x_num, x_cat) -> Tensor:
        return self.tokenizer(x_num, x_cat)

    def append_cls(self, tokens) -> Tensor:
        tokens = tn.as_tensor(tokens)
        b = tokens.shape[0]
        cls = tn.add(np.zeros((b, 1, self.d)), self.cls_token.reshape(1, 1, self.d))
        return tn.concat([tokens, cls], axis=1)

    def encode(self, tokens, training: bool = False,
               rng: Optional[np.random.Generator] = None) -> Tensor:
        x = tn.as_tensor(tokens)
        for block in self.blocks:
            x = block(x, training, rng)
        return x

    @staticmethod
    def cls_row(encoded) -> Tensor:
        return tn.as_tensor(encoded)[:, -1, :]

    def predict(self, encoded) -> Tensor:
        return self.head(self.cls_row(encoded))

    def project(self, encoded) -> Tensor:
        return self.projector(self.cls_row(encoded))

    def forward(self, x_num, x_cat, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        encoded = self.encode(self.append_cls(self.tokenize(x_num, x_cat)), training, rng)
        return self.predict(encoded)

    __call__ = forward

    def reset_head(self, seed: int) -> None:
        self.head = Head(self.d, self.n_outputs, np.random.default_rng(seed))


def zero_output_projections(model: TabTransformer) -> None:
    """Zero the attention output and FFN down projections, making every block
    the identity map (residual path only)."""
    for block in model.blocks:
        for lin in (block.attention.out, block.ffn.down):
            lin.weight.data = np.zeros_like(lin.weight.data)
            lin.bias.data = np.zeros_like(lin.bias.data)
