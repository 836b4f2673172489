"""Layers, dropout, AdamW and checkpoint IO on top of :mod:`tabmtr.tensor`."""

from __future__ import annotations

import io
import json
import math
import os
from typing import Iterator, Optional

import numpy as np

from . import tensor as tn
from .tensor import Tensor

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    pass


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Parameter container. Tensors with ``requires_grad`` and sub-modules found
    in instance attributes (or lists of them) are registered in attribute order.

    ``no_decay`` lists local attribute names exempt from weight decay;
    ``no_decay_all`` exempts every parameter of the module and its children.
    """

    no_decay: tuple = ()
    no_decay_all: bool = False

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def decay_exempt(self, prefix: str = "", inherited: bool = False) -> set[str]:
        exempt_all = inherited or self.no_decay_all
        out = set()
        for name, value in self._children():
            if isinstance(value, Tensor):
                if exempt_all or name in self.no_decay:
                    out.add(prefix + name)
            else:
                out |= value.decay_exempt(prefix + name + ".", exempt_all)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict and set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, value in state.items():
            if name not in params:
                continue
            if params[name].shape != value.shape:
                raise tn.ShapeError(
                    f"{name}: checkpoint shape {value.shape} != parameter shape {params[name].shape}"
                )
            params[name].data = np.array(value, dtype=tn.DTYPE)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def dropout(x, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = tn.as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    # float32 uniforms are plenty for a keep/drop decision
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    return x * (keep * (1.0 / (1.0 - rate)))


class Linear(Module):
    no_decay = ("bias",)

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        # Kaiming normal for weights, uniform(+-1/sqrt(in)) for the bias
        std = math.sqrt(2.0 / in_features)
        self.weight = parameter(rng.normal(0.0, std, size=(in_features, out_features)))
        bound = 1.0 / math.sqrt(in_features)
        self.bias = parameter(rng.uniform(-bound, bound, size=out_features)) if bias else None
        self.in_features = in_features
        self.out_features = out_features

    def __call__(self, x) -> Tensor:
        x = tn.as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise tn.ShapeError(
                f"linear: input shape {x.shape} does not match weight shape {self.weight.shape}"
            )
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    no_decay_all = True

    def __init__(self, dim: int, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("LayerNorm epsilon must be positive")
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.eps = eps

    def normalize(self, x) -> Tensor:
        x = tn.as_tensor(x)
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / tn.sqrt(var + self.eps)

    def __call__(self, x) -> Tensor:
        return tn.layer_norm(x, self.gain, self.shift, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, rng: np.random.Generator, n_heads: int = 8,
                 dropout: float = 0.2):
        if dim % n_heads:
            raise ValueError(f"embedding size {dim} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.dropout = dropout
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_attention: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        b, s, _ = x.shape
        return x.reshape(b, s, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        x = tn.as_tensor(x)
        b, s, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        mask = None
        if training and self.dropout > 0:
            if rng is None:
                raise ValueError("attention dropout in training mode needs an rng")
            shape = (b, self.n_heads, s, s)
            mask = (rng.random(shape, dtype=np.float32) >= self.dropout) * (1.0 / (1.0 - self.dropout))
        context, weights = tn.attention(q, k, v, 1.0 / math.sqrt(self.head_dim), mask)
        self.last_attention = weights
        return self.out(context.transpose(0, 2, 1, 3).reshape(b, s, d))


def ffn_hidden_size(dim: int, factor: float = 4 / 3) -> int:
    return int(math.floor(dim * factor))


class ReGLUFFN(Module):
    def __init__(self, dim: int, rng: np.random.Generator, factor: float = 4 / 3,
                 dropout: float = 0.1):
        self.hidden = ffn_hidden_size(dim, factor)
        self.up = Linear(dim, 2 * self.hidden, rng)
        self.down = Linear(self.hidden, dim, rng)
        self.dropout = dropout

    def __call__(self, x, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        h = self.up(x)
        a, gate = h[..., : self.hidden], h[..., self.hidden:]
        h = dropout(a * tn.relu(gate), self.dropout, training, rng)
        return self.down(h)


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then + FFN(LN(.))."""

    def __init__(self, dim: int, rng: np.random.Generator, n_heads: int = 8,
                 attention_dropout: float = 0.2, ffn_dropout: float = 0.1,
                 residual_dropout: float = 0.0, ffn_factor: float = 4 / 3):
        self.attn_norm = LayerNorm(dim)
        self.attention = MultiHeadAttention(dim, rng, n_heads, attention_dropout)
        self.ffn_norm = LayerNorm(dim)
        self.ffn = ReGLUFFN(dim, rng, ffn_factor, ffn_dropout)
        self.residual_dropout = residual_dropout

    def __call__(self, x, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        h = self.attention(self.attn_norm(x), training, rng)
        x = x + dropout(h, self.residual_dropout, training, rng)
        h = self.ffn(self.ffn_norm(x), training, rng)
        return x + dropout(h, self.residual_dropout, training, rng)


class AdamW:
    """Adam with decoupled weight decay and bias correction.

    Parameters whose names are in ``exempt`` are never decayed.
    """

    def __init__(self, named_params, lr: float = 1e-4, weight_decay: float = 1e-5,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 exempt: frozenset | set = frozenset()):
        self.params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.exempt = frozenset(exempt)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        grads = {}
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(
                    f"non-finite gradient in {name!r} at step {self.step_count + 1}"
                )
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = grads[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            data = p.data
            if name not in self.exempt and self.weight_decay:
                data = data * (1.0 - self.lr * self.weight_decay)
            p.data = data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def save_checkpoint(path, state: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write named arrays to an ``.npz`` container.

    The ``__meta__`` entry holds a JSON document with ``format_version``, the
    parameter shapes and any caller metadata (e.g. the column schema).
    """
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "meta": meta or {},
    }
    arrays = {k: np.asarray(v, dtype=tn.DTYPE) for k, v in state.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as data:
        header = json.loads(bytes(data["__meta__"]).decode())
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header.get('format_version')}")
        state = {k: data[k] for k in data.files if k != "__meta__"}
    for k, shape in header["shapes"].items():
        if list(state[k].shape) != shape:
            raise ValueError(f"checkpoint entry {k} has shape {state[k].shape}, header says {shape}")
    return state, header["meta"]
