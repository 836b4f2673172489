"""Supervised training, contrastive pretraining and fine-tuning."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import augment as aug
from . import tensor as tn
from .augment import AugmentationSpec, MixedTarget
from .data import DatasetBundle, Split, batches
from .losses import nt_xent_loss, task_loss
from .metrics import score_outputs
from .model import ModelConfig, TabTransformer
from .nn import AdamW

log = logging.getLogger(__name__)

SSL_METHODS = ("none", "mtr_after_bias", "mtr_before_bias", "scarf", "hiddenmix", "manifold_mixup")


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 500
    patience: int = 15
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    ssl_fraction: float = 0.25
    temperature: float = 1.0
    batch_size: Optional[int] = None  # None: the bundle's train-size rule

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationSpec(**self.augmentation)
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("patience and max_epochs must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 < self.ssl_fraction <= 1.0:
            raise ConfigError("ssl_fraction must be in (0, 1]")

    @classmethod
    def ssl_defaults(cls, **kw) -> "TrainConfig":
        kw.setdefault("max_epochs", 200)
        kw.setdefault("patience", 10)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


class EarlyStopping:
    """Tracks the best validation loss; the counter resets only on strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.best_state: Optional[dict] = None
        self.since_improvement = 0

    def update(self, val_loss: float, epoch: int, model) -> bool:
        """Record an epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = model.state_dict()
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        return self.since_improvement >= self.patience


@dataclass
class TrainResult:
    model: TabTransformer
    history: list
    best_epoch: int
    best_val_loss: float
    initial_val_loss: float
    steps: int


def write_history(history: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
            fh.flush()


def _streams(seed: int):
    """Independent generators for init, shuffling/dropout and augmentation.

    Keeping augmentation on its own stream means a method whose coin never
    comes up produces exactly the trace of method ``none``.
    """
    init, train, augment, head = np.random.SeedSequence(seed).spawn(4)
    return (int(init.generate_state(1)[0]), np.random.default_rng(train),
            np.random.default_rng(augment), int(head.generate_state(1)[0]))


def build_model(bundle: DatasetBundle, model_config: ModelConfig | None = None,
                seed: int = 0) -> TabTransformer:
    init_seed = _streams(seed)[0]
    return TabTransformer(bundle.schema, bundle.n_outputs, model_config or ModelConfig(), init_seed)


# ---------------------------------------------------------------------------
# forward paths


def augmented_cls(model: TabTransformer, x_num, x_cat, spec: AugmentationSpec,
                  aug_rng: np.random.Generator, drop_rng: Optional[np.random.Generator],
                  training: bool, marginals=None, apply: bool = True):
    """Encoded CLS rows with ``spec`` applied at its stage of the pipeline.

    Returns ``(cls_rows, partner, coefficient)``; ``partner`` is None unless a
    mixing method ran. ``coefficient`` is lam' for Cutmix and lam otherwise.
    """
    method = spec.method if apply else "none"
    partner, coef = None, None
    if method in aug.MIX_METHODS:
        partner = aug.pair_within_batch(len(x_num) if x_num is not None else len(x_cat), aug_rng)
        if partner is None:
            method = "none"

    if method == "scarf":
        if marginals is None:
            raise ConfigError("SCARF needs training marginals")
        x_num, x_cat = aug.scarf_corrupt(x_num, x_cat, spec.param, marginals, aug_rng)
    elif method == "cutmix":
        x_num, x_cat, coef, _ = aug.cutmix_batch(x_num, x_cat, partner, spec.param, aug_rng)

    if method == "mtr_before_bias":
        tokens, _ = aug.mtr_before_bias(model.tokenizer, x_num, x_cat, spec.param,
                                        model.mask_token, aug_rng, spec.shared_mask)
    else:
        tokens = model.tokenize(x_num, x_cat)
    if method == "mtr_after_bias":
        tokens, _ = aug.mtr_after_bias(tokens, spec.param, model.mask_token, aug_rng, spec.shared_mask)
    elif method == "hiddenmix":
        tokens, coef, _ = aug.hiddenmix_batch(tokens, partner, spec.param, aug_rng)

    cls_rows = model.cls_row(model.encode(model.append_cls(tokens), training, drop_rng))
    if method == "manifold_mixup":
        cls_rows, coef = aug.manifold_mixup_batch(cls_rows, partner, spec.param, aug_rng)
    return cls_rows, partner, coef


def _target(spec: AugmentationSpec, y, partner, coef) -> MixedTarget:
    if partner is None or not spec.label_mixing:
        return MixedTarget.plain(y)
    builder = {"cutmix": MixedTarget.cutmix, "hiddenmix": MixedTarget.hiddenmix,
               "manifold_mixup": MixedTarget.manifold_mixup}[spec.method]
    return builder(y, y[partner], coef)


def predict_outputs(model: TabTransformer, split: Split, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode model outputs; never applies augmentation."""
    outs = []
    with tn.no_grad():
        for b in batches(split, batch_size):
            outs.append(model.forward(b.x_num, b.x_cat, training=False).data)
    return np.concatenate(outs, axis=0)


def evaluate(model: TabTransformer, split: Split, task: str, target_std: float = 1.0,
             batch_size: int = 1024) -> tuple[float, float]:
    """(plain task loss, metric) on ``split`` in eval mode."""
    out = predict_outputs(model, split, batch_size)
    loss = task_loss(tn.Tensor(out), split.y, task).item()
    return loss, score_outputs(task, out, split.y, target_std)


def _trainable(model: TabTransformer, skip_prefix: str):
    return [(n, p) for n, p in model.named_parameters() if not n.startswith(skip_prefix)]


# ---------------------------------------------------------------------------
# supervised


def supervised_train(model: TabTransformer, bundle: DatasetBundle, config: TrainConfig,
                     eval_batch_size: int = 1024) -> TrainResult:
    """Train with per-batch augmentation coin flips and early stopping on the
    plain validation loss; the best checkpoint is restored at the end."""
    _, train_rng, aug_rng, _ = _streams(config.seed)
    spec = config.augmentation
    batch_size = config.batch_size or bundle.batch_size
    marginals = bundle.marginals if spec.method == "scarf" else None
    params = _trainable(model, "projector.")
    opt = AdamW(params, config.lr, config.weight_decay, exempt=model.decay_exempt())
    stopper = EarlyStopping(config.patience)
    start = time.perf_counter()

    init_loss, init_metric = evaluate(model, bundle.val, bundle.task, bundle.target_std, eval_batch_size)
    history = [dict(epoch=0, train_loss=None, val_loss=init_loss, val_metric=init_metric,
                    wall_time=time.perf_counter() - start)]
    for epoch in range(1, config.max_epochs + 1):
        losses, sizes = [], []
        for bi, b in enumerate(batches(bundle.train, batch_size, shuffle=True, rng=train_rng)):
            apply = spec.method != "none" and aug_rng.random() < spec.apply_probability
            with tn.recording():
                cls_rows, partner, coef = augmented_cls(model, b.x_num, b.x_cat, spec, aug_rng,
                                                        train_rng, True, marginals, apply)
                loss = aug.mixed_loss(model.head(cls_rows), _target(spec, b.y, partner, coef),
                                      bundle.task)
                if not np.isfinite(loss.data).all():
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
                opt.zero_grad()
                tn.backward(loss)
            opt.step()
            losses.append(loss.item())
            sizes.append(len(b))
        val_loss, val_metric = evaluate(model, bundle.val, bundle.task, bundle.target_std, eval_batch_size)
        history.append(dict(epoch=epoch, train_loss=float(np.average(losses, weights=sizes)),
                            val_loss=val_loss, val_metric=val_metric,
                            wall_time=time.perf_counter() - start))
        if stopper.update(val_loss, epoch, model):
            break
    model.load_state_dict(stopper.best_state)
    return TrainResult(model, history, stopper.best_epoch, stopper.best_loss, init_loss, opt.step_count)


# ---------------------------------------------------------------------------
# self-supervised


def check_ssl_method(spec: AugmentationSpec) -> None:
    if spec.method == "cutmix":
        raise ConfigError("Cutmix is excluded from self-supervised pretraining: without label "
                          "mixing it behaves almost the same as SCARF")
    if spec.method not in SSL_METHODS:
        raise ConfigError(f"method {spec.method} is not usable for pretraining")


def contrastive_views(model: TabTransformer, b: Split, spec: AugmentationSpec, aug_rng,
                      drop_rng, training: bool, marginals):
    clean, _, _ = augmented_cls(model, b.x_num, b.x_cat, spec, aug_rng, drop_rng, training,
                                marginals, apply=False)
    noisy, _, _ = augmented_cls(model, b.x_num, b.x_cat, spec, aug_rng, drop_rng, training,
                                marginals, apply=True)
    return model.projector(clean), model.projector(noisy)


def contrastive_loss(model: TabTransformer, split: Split, spec: AugmentationSpec, temperature: float,
                     batch_size: int, marginals, seed: int = 0) -> float:
    """Eval-mode NT-Xent over ``split``. The augmented view uses a generator
    reseeded on every call so successive epochs are scored on the same views."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    with tn.no_grad():
        for b in batches(split, batch_size):
            if len(b) < 2:
                continue
            z, z_hat = contrastive_views(model, b, spec, rng, None, False, marginals)
            total += nt_xent_loss(z, z_hat, temperature).item() * len(b)
            count += len(b)
    return total / count


def ssl_pretrain(model: TabTransformer, bundle: DatasetBundle, config: TrainConfig) -> TrainResult:
    """Contrastive pretraining on ``ssl_fraction`` of train.

    Each batch yields a clean view and an augmented view (augmentation always
    applied) of the CLS embedding; both go through the projector and into
    NT-Xent. Early stopping watches the validation contrastive loss.
    """
    spec = config.augmentation
    check_ssl_method(spec)
    _, train_rng, aug_rng, _ = _streams(config.seed)
    part = bundle.subsample_train(config.ssl_fraction, config.seed)
    batch_size = config.batch_size or part.batch_size
    marginals = part.marginals if spec.method == "scarf" else None
    params = _trainable(model, "head.")
    opt = AdamW(params, config.lr, config.weight_decay, exempt=model.decay_exempt())
    stopper = EarlyStopping(config.patience)
    start = time.perf_counter()

    def val_loss() -> float:
        return contrastive_loss(model, bundle.val, spec, config.temperature, batch_size, marginals,
                                seed=config.seed)

    init = val_loss()
    history = [dict(epoch=0, train_loss=None, val_loss=init, val_metric=None,
                    wall_time=time.perf_counter() - start)]
    for epoch in range(1, config.max_epochs + 1):
        losses, sizes = [], []
        for bi, b in enumerate(batches(part.train, batch_size, shuffle=True, rng=train_rng)):
            if len(b) < 2:
                continue
            with tn.recording():
                z, z_hat = contrastive_views(model, b, spec, aug_rng, train_rng, True, marginals)
                loss = nt_xent_loss(z, z_hat, config.temperature)
                if not np.isfinite(loss.data).all():
                    raise TrainingError(f"non-finite contrastive loss at epoch {epoch}, batch {bi}")
                opt.zero_grad()
                tn.backward(loss)
            opt.step()
            losses.append(loss.item())
            sizes.append(len(b))
        v = val_loss()
        history.append(dict(epoch=epoch, train_loss=float(np.average(losses, weights=sizes)),
                            val_loss=v, val_metric=None, wall_time=time.perf_counter() - start))
        if stopper.update(v, epoch, model):
            break
    model.load_state_dict(stopper.best_state)
    return TrainResult(model, history, stopper.best_epoch, stopper.best_loss, init, opt.step_count)


def prepare_finetune(pretrained: TabTransformer, bundle: DatasetBundle, seed: int) -> TabTransformer:
    """Copy of ``pretrained`` with a freshly initialised prediction head."""
    if pretrained.schema != bundle.schema:
        raise ConfigError("pretrained model and fine-tune data have different schemas")
    if pretrained.n_outputs != bundle.n_outputs:
        raise ConfigError("pretrained model has a different output size")
    model = copy.deepcopy(pretrained)
    model.reset_head(_streams(seed)[3])
    return model


def finetune(pretrained: TabTransformer, bundle: DatasetBundle, config: TrainConfig) -> TrainResult:
    """Full fine-tuning on the same ``ssl_fraction`` rows used for pretraining."""
    model = prepare_finetune(pretrained, bundle, config.seed)
    part = bundle.subsample_train(config.ssl_fraction, config.seed)
    return supervised_train(model, part, config)


def supervised_control(bundle: DatasetBundle, config: TrainConfig,
                       model_config: ModelConfig | None = None) -> TrainResult:
    """The no-pretraining baseline: a fresh model trained on the same rows."""
    part = bundle.subsample_train(config.ssl_fraction, config.seed)
    model = build_model(bundle, model_config, config.seed)
    return supervised_train(model, part, config)
