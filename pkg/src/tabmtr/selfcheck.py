"""Fast invariant suite: gradients, augmentation exactness and metric oracles."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import augment as aug
from . import tensor as tn
from .data import batch_size_for
from .gradcheck import check_gradients
from .losses import nt_xent_loss, task_loss
from .metrics import auc
from .model import ColumnSchema, ModelConfig, TabTransformer
from .nn import LayerNorm, dropout
from .oracles import NT_XENT_B2_ORTHOGONAL, auc_all_pairs, nt_xent_direct
from .tensor import Tensor

GRAD_TOL = 1e-4


def _param(rng, *shape, low=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, low + 1.0, size=shape)
    return Tensor(data, requires_grad=True)


def _project(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar <out, R> for a fixed random R, so every output entry matters."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return (out * r).sum()


def op_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, loss_fn, params) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    a, b = _param(rng, 4, 5), _param(rng, 4, 5)
    row = _param(rng, 5)
    pos = _param(rng, 4, 5, low=0.5)
    m1, m2 = _param(rng, 3, 4), _param(rng, 4, 2)
    t3 = _param(rng, 2, 3, 4)
    t4a, t4b = _param(rng, 2, 2, 3, 4), _param(rng, 2, 2, 4, 3)
    table = _param(rng, 8, 3)
    q, k, v = _param(rng, 2, 2, 4, 3), _param(rng, 2, 2, 4, 3), _param(rng, 2, 2, 4, 3)
    drop = (rng.random((2, 2, 4, 4)) > 0.3) / 0.7
    x3 = _param(rng, 2, 3, 6)
    gain, shift = _param(rng, 6), _param(rng, 6)
    cond = rng.random((4, 5)) > 0.5
    idx = np.array([0, 3, 3, 1])
    ln = LayerNorm(6)
    ln.gain.data, ln.shift.data = gain.data, shift.data
    return [
        ("add (broadcast)", lambda: _project(a + row), [a, row]),
        ("sub", lambda: _project(a - b), [a, b]),
        ("mul (broadcast)", lambda: _project(a * row), [a, row]),
        ("div", lambda: _project(a / pos), [a, pos]),
        ("neg", lambda: _project(-a), [a]),
        ("power", lambda: _project(tn.power(pos, 2.5)), [pos]),
        ("exp", lambda: _project(tn.exp(a)), [a]),
        ("log", lambda: _project(tn.log(pos)), [pos]),
        ("sqrt", lambda: _project(tn.sqrt(pos)), [pos]),
        ("relu", lambda: _project(tn.relu(a)), [a]),
        ("sigmoid", lambda: _project(tn.sigmoid(a * 3.0)), [a]),
        ("softplus", lambda: _project(tn.softplus(a * 3.0)), [a]),
        ("where", lambda: _project(tn.where(cond, a, b)), [a, b]),
        ("matmul 2d", lambda: _project(m1 @ m2), [m1, m2]),
        ("matmul 3d @ 2d", lambda: _project(t3 @ m2), [t3, m2]),
        ("matmul 4d", lambda: _project(t4a @ t4b), [t4a, t4b]),
        ("reshape", lambda: _project(t3.reshape(6, 4)), [t3]),
        ("transpose", lambda: _project(t3.transpose(2, 0, 1)), [t3]),
        ("swapaxes", lambda: _project(tn.swapaxes(t3, 0, 2)), [t3]),
        ("getitem slice", lambda: _project(t3[:, 1:, ::2]), [t3]),
        ("getitem repeated index", lambda: _project(a[idx]), [a]),
        ("concat", lambda: _project(tn.concat([a, b], axis=1)), [a, b]),
        ("stack", lambda: _project(tn.stack([a, b], axis=0)), [a, b]),
        ("gather_rows", lambda: _project(tn.gather_rows(table, np.array([5, 0, 5, 7, 2]))), [table]),
        ("sum", lambda: _project(t3.sum(axis=1)), [t3]),
        ("mean", lambda: _project(t3.mean(axis=(0, 2), keepdims=True)), [t3]),
        ("max", lambda: _project(tn.reduce(t3, axis=2, kind="max")), [t3]),
        ("softmax", lambda: _project(tn.softmax(a, axis=-1)), [a]),
        ("log_softmax", lambda: _project(tn.log_softmax(a, axis=0)), [a]),
        ("attention", lambda: _project(tn.attention(q, k, v, 0.5)[0]), [q, k, v]),
        ("attention with dropout mask", lambda: _project(tn.attention(q, k, v, 0.5, drop)[0]), [q, k, v]),
        ("layer_norm (fused)", lambda: _project(tn.layer_norm(x3, gain, shift)), [x3, gain, shift]),
        ("layer_norm (composed)", lambda: _project(ln.normalize(x3)), [x3]),
        ("dropout", lambda: _project(dropout(a, 0.3, True, np.random.default_rng(5))), [a]),
    ]


def _small_model(schema: ColumnSchema, n_outputs: int, seed: int = 0) -> TabTransformer:
    return TabTransformer(schema, n_outputs, ModelConfig(d_token=8, n_blocks=2, n_heads=2), seed)


def model_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """Full-model losses, in training mode with dropout masks fixed per call."""
    rng = np.random.default_rng(seed)
    schema = ColumnSchema(["a", "b", "c"], ["u", "v"], [3, 4])
    x_num = rng.normal(size=(6, 3))
    x_cat = np.stack([rng.integers(0, 3, 6), rng.integers(0, 4, 6)], axis=1)
    y_bin = np.array([0, 1, 1, 0, 1, 0])
    y_cls = rng.integers(0, 3, 6)
    y_reg = rng.normal(size=6)
    partner = np.array([3, 4, 5, 0, 1, 2])
    cases = []

    def add(name, model, fn):
        cases.append((name, fn, model.parameters()))

    def fwd(model, tokens_fn=None, cls_fn=None):
        drop = np.random.default_rng(11)
        tokens = model.tokenize(x_num, x_cat) if tokens_fn is None else tokens_fn(model)
        cls = model.cls_row(model.encode(model.append_cls(tokens), True, drop))
        return cls if cls_fn is None else cls_fn(cls)

    m = _small_model(schema, 1)
    add("model binary cross-entropy", m, lambda m=m: task_loss(m.head(fwd(m)), y_bin, "binary"))
    m = _small_model(schema, 3, 1)
    add("model softmax cross-entropy", m, lambda m=m: task_loss(m.head(fwd(m)), y_cls, "multiclass"))
    m = _small_model(schema, 1, 2)
    add("model mean squared error", m, lambda m=m: task_loss(m.head(fwd(m)), y_reg, "regression"))
    m = _small_model(schema, 1, 3)
    add("model + MTR after bias", m, lambda m=m: task_loss(m.head(fwd(m, lambda mm: aug.mtr_after_bias(
        mm.tokenize(x_num, x_cat), 0.4, mm.mask_token, np.random.default_rng(3))[0])), y_bin, "binary"))
    m = _small_model(schema, 1, 4)
    add("model + MTR before bias", m, lambda m=m: task_loss(m.head(fwd(m, lambda mm: aug.mtr_before_bias(
        mm.tokenizer, x_num, x_cat, 0.4, mm.mask_token, np.random.default_rng(3))[0])), y_bin, "binary"))

    def hidden(mm):
        out, lam, _ = aug.hiddenmix_batch(mm.tokenize(x_num, x_cat), partner, 1.0, np.random.default_rng(4))
        return out

    m = _small_model(schema, 1, 5)
    add("model + HiddenMix mixed loss", m, lambda m=m: aug.mixed_loss(
        m.head(fwd(m, hidden)), aug.MixedTarget.hiddenmix(y_bin, y_bin[partner], 0.35), "binary"))
    m = _small_model(schema, 1, 6)
    add("model + Manifold Mixup mixed loss", m, lambda m=m: aug.mixed_loss(
        m.head(fwd(m, cls_fn=lambda c: aug.manifold_mixup_batch(c, partner, 1.0, np.random.default_rng(6))[0])),
        aug.MixedTarget.manifold_mixup(y_bin, y_bin[partner], 0.3), "binary"))
    m = _small_model(schema, 1, 7)

    def ssl(m=m):
        z = m.projector(fwd(m))
        z_hat = m.projector(fwd(m, lambda mm: aug.mtr_after_bias(
            mm.tokenize(x_num, x_cat), 0.5, mm.mask_token, np.random.default_rng(8))[0]))
        return nt_xent_loss(z, z_hat, 0.7)
    add("model NT-Xent", m, ssl)
    return cases


# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    group: str
    name: str
    passed: bool
    detail: str


def _gradient_checks() -> list[CheckResult]:
    out = []
    for name, fn, params in op_cases() + model_cases():
        r = check_gradients(fn, params, n_entries=20, rng=np.random.default_rng(1))
        out.append(CheckResult("gradient", name, r.passed(GRAD_TOL), f"max rel err {r.max_rel_error:.1e}"))
    return out


def _augmentation_checks() -> list[CheckResult]:
    rng = np.random.default_rng(0)
    out = []
    tokens = Tensor(rng.normal(size=(5, 4, 6)))
    mask_token = Tensor(rng.normal(size=6))
    same, _ = aug.mtr_after_bias(tokens, 0.0, mask_token, rng)
    out.append(CheckResult("augment", "MTR p_m=0 is the identity", bool(np.array_equal(same.data, tokens.data)), ""))
    full, _ = aug.mtr_after_bias(tokens, 1.0, mask_token, rng)
    out.append(CheckResult("augment", "MTR p_m=1 masks every token",
                           bool(np.array_equal(full.data, np.broadcast_to(mask_token.data, (5, 4, 6)))), ""))
    x_num, x_cat = rng.normal(size=(8, 5)), rng.integers(0, 3, size=(8, 2))
    ok = True
    for lam in (0.0, 0.3, 0.5, 0.99, 1.0):
        partner = np.roll(np.arange(8), 1)
        _, _, lp, chosen = aug.cutmix_batch(x_num, x_cat, partner, 1.0, rng, lam=lam)
        ok &= bool(np.all(chosen.sum(axis=1) == math.floor(lam * 7)) and lp == math.floor(lam * 7) / 7)
    out.append(CheckResult("augment", "Cutmix swaps floor(lam*k) columns", ok, ""))
    ok = True
    for lam in (0.0, 0.25, 0.6, 1.0):
        _, _, S = aug.hiddenmix_pair(rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), 1.0, rng, lam=lam)
        ok &= bool(np.all(S == S[0]) and S[0].sum() == math.floor(lam * 6))
    out.append(CheckResult("augment", "HiddenMix S rows identical with floor(lam*d) ones", ok, ""))
    marg = aug.ColumnMarginals.from_train(x_num, x_cat)
    cn, cc = aug.scarf_corrupt(rng.normal(size=(20, 5)), rng.integers(0, 3, size=(20, 2)), 1.0, marg, rng)
    ok = all(set(cn[:, j]) <= set(x_num[:, j]) for j in range(5)) and \
        all(set(cc[:, j]) <= set(x_cat[:, j]) for j in range(2))
    out.append(CheckResult("augment", "SCARF p_m=1 draws only training values", ok, ""))
    ya, yb = np.array([1.0]), np.array([0.0])
    ok = (aug.MixedTarget.cutmix(ya, yb, 0.2).weight == 0.8
          and aug.MixedTarget.hiddenmix(ya, yb, 0.2).weight == 0.2
          and aug.MixedTarget.manifold_mixup(ya, yb, 0.2).weight == 0.8)
    out.append(CheckResult("augment", "label-mixing orientations", ok, ""))
    return out


def _metric_checks() -> list[CheckResult]:
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(30):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 6, n) / 5.0  # plenty of ties
        ok &= auc(scores, labels) == auc_all_pairs(scores, labels)
    out = [CheckResult("metric", "rank-sum AUC == all-pairs AUC", bool(ok), "30 instances")]
    worst = 0.0
    for _ in range(30):
        b = int(rng.integers(2, 9))
        z, zh = rng.normal(size=(b, 4)), rng.normal(size=(b, 4))
        tau = float(rng.uniform(0.2, 2.0))
        worst = max(worst, abs(nt_xent_loss(z, zh, tau).item() - nt_xent_direct(z, zh, tau)))
    out.append(CheckResult("metric", "NT-Xent == direct formula", worst < 1e-9, f"max abs diff {worst:.1e}"))
    a, b = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    z = np.concatenate([a, b])
    v = nt_xent_loss(z, z, 1.0).item()
    out.append(CheckResult("metric", "NT-Xent B=2 orthogonal = ln(1+2/e)",
                           abs(v - NT_XENT_B2_ORTHOGONAL) < 1e-12, f"{v:.6f}"))
    sched = {60_000: 1024, 20_000: 512, 8_000: 256, 3_000: 128, 800: 64}
    out.append(CheckResult("protocol", "batch-size schedule",
                           all(batch_size_for(n) == bs for n, bs in sched.items()), ""))
    return out


def run_checks() -> list[CheckResult]:
    return _gradient_checks() + _augmentation_checks() + _metric_checks()


def format_table(results: list[CheckResult], elapsed: float) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'group':<9} {'check':<{width}}  status  detail"]
    for r in results:
        lines.append(f"{r.group:<9} {r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed in {elapsed:.1f} s")
    return "\n".join(lines)


def main() -> int:
    start = time.perf_counter()
    results = run_checks()
    print(format_table(results, time.perf_counter() - start))
    return 0 if all(r.passed for r in results) else 1
