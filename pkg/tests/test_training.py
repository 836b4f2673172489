import math

import numpy as np
import pytest

from tabmtr import augment as aug
from tabmtr.augment import AugmentationSpec
from tabmtr.data import build_bundle, synth_generate
from tabmtr.model import ModelConfig
from tabmtr.training import (ConfigError, EarlyStopping, TrainConfig, TrainingError, build_model,
                             contrastive_views, evaluate, finetune, predict_outputs, prepare_finetune,
                             ssl_pretrain, supervised_train)

SMALL = ModelConfig(d_token=8, n_blocks=1, n_heads=2)
MILDEST = [("none", None), ("mtr_after_bias", 0.1), ("mtr_before_bias", 0.1), ("scarf", 0.1),
           ("cutmix", 0.1), ("hiddenmix", 0.1), ("manifold_mixup", 0.1)]


@pytest.fixture(scope="module")
def bundle():
    return build_bundle(synth_generate("two_gaussians_binary", 400, 0), 0)


def test_early_stopping_counter_resets_only_on_strict_improvement():
    class Dummy:
        def state_dict(self):
            return {}
    es = EarlyStopping(2)
    assert not es.update(1.0, 1, Dummy())
    assert not es.update(1.0, 2, Dummy())  # equal is not an improvement
    assert es.update(1.0, 3, Dummy())
    assert es.best_epoch == 1


def test_stops_within_patience_and_restores_best(bundle):
    cfg = TrainConfig(max_epochs=60, patience=3, lr=1e-2, seed=0)
    res = supervised_train(build_model(bundle, SMALL, 0), bundle, cfg)
    last = res.history[-1]["epoch"]
    assert last - res.best_epoch <= 3
    if last < cfg.max_epochs:
        assert last - res.best_epoch == 3
    best = min(res.history[1:], key=lambda r: r["val_loss"])
    assert best["epoch"] == res.best_epoch
    loss, _ = evaluate(res.model, bundle.val, bundle.task)
    assert loss == best["val_loss"]


def test_one_optimizer_step_per_batch(bundle):
    cfg = TrainConfig(max_epochs=2, patience=5, seed=0, batch_size=50)
    res = supervised_train(build_model(bundle, SMALL, 0), bundle, cfg)
    assert res.steps == 2 * math.ceil(len(bundle.train) / 50)


@pytest.mark.parametrize("method,param", MILDEST[1:])
def test_zero_probability_is_bit_identical_to_none(bundle, method, param):
    base = TrainConfig(max_epochs=2, patience=5, seed=3)
    ref = supervised_train(build_model(bundle, SMALL, 3), bundle, base)
    cfg = TrainConfig(max_epochs=2, patience=5, seed=3,
                      augmentation=AugmentationSpec(method, param, apply_probability=0.0))
    res = supervised_train(build_model(bundle, SMALL, 3), bundle, cfg)
    assert [h["val_loss"] for h in res.history] == [h["val_loss"] for h in ref.history]
    for (n, p), (_, q) in zip(res.model.named_parameters(), ref.model.named_parameters()):
        assert np.array_equal(p.data, q.data), n


@pytest.mark.parametrize("method,param", MILDEST)
def test_loss_decreases_early_for_every_method(bundle, method, param):
    cfg = TrainConfig(max_epochs=5, patience=5, lr=1e-3, seed=0, augmentation=AugmentationSpec(method, param))
    res = supervised_train(build_model(bundle, SMALL, 0), bundle, cfg)
    assert res.history[5]["val_loss"] < res.history[0]["val_loss"]


def test_evaluation_never_calls_augmentation(bundle):
    cfg = TrainConfig(max_epochs=1, seed=0, augmentation=AugmentationSpec("mtr", 0.5, apply_probability=1.0))
    res = supervised_train(build_model(bundle, SMALL, 0), bundle, cfg)
    before = dict(aug.CALLS)
    assert before.get("mtr_after_bias", 0) > 0
    evaluate(res.model, bundle.test, bundle.task)
    predict_outputs(res.model, bundle.val)
    assert dict(aug.CALLS) == before


def test_nan_loss_aborts_with_location(bundle):
    model = build_model(bundle, SMALL, 0)
    model.head.linear.weight.data[:] = np.nan
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        supervised_train(model, bundle, TrainConfig(max_epochs=1, seed=0))


def test_config_validation():
    for kw in ({"patience": 0}, {"max_epochs": 0}, {"temperature": 0.0}, {"ssl_fraction": 0.0}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
    ssl = TrainConfig.ssl_defaults()
    assert (ssl.max_epochs, ssl.patience) == (200, 10)
    assert (TrainConfig().max_epochs, TrainConfig().patience) == (500, 15)


def test_ssl_rejects_cutmix(bundle):
    cfg = TrainConfig.ssl_defaults(augmentation=AugmentationSpec("cutmix", 1.0))
    with pytest.raises(ConfigError, match="Cutmix"):
        ssl_pretrain(build_model(bundle, SMALL, 0), bundle, cfg)


def test_ssl_pretrain_uses_fraction_of_train(bundle):
    cfg = TrainConfig.ssl_defaults(max_epochs=2, seed=1, ssl_fraction=0.25,
                                   augmentation=AugmentationSpec("mtr", 0.3, apply_probability=1.0))
    res = ssl_pretrain(build_model(bundle, SMALL, 1), bundle, cfg)
    n = math.floor(0.25 * len(bundle.train))
    assert res.steps == len(res.history[1:]) * math.ceil(n / 64)
    assert all(np.isfinite(h["val_loss"]) for h in res.history)


def test_clean_view_is_deterministic_in_eval_mode(bundle):
    model = build_model(bundle, SMALL, 0)
    spec = AugmentationSpec("mtr", 0.5)
    b = bundle.val.take(np.arange(16))
    z1, _ = contrastive_views(model, b, spec, np.random.default_rng(0), None, False, None)
    z2, _ = contrastive_views(model, b, spec, np.random.default_rng(1), None, False, None)
    np.testing.assert_array_equal(z1.data, z2.data)


def test_finetune_starts_from_pretrained_encoder_with_fresh_head(bundle):
    pre = build_model(bundle, SMALL, 0)
    ft = prepare_finetune(pre, bundle, seed=5)
    for (n, p), (_, q) in zip(pre.named_parameters(), ft.named_parameters()):
        if n.startswith("head."):
            continue
        assert np.array_equal(p.data, q.data), n
    assert not np.array_equal(pre.head.linear.weight.data, ft.head.linear.weight.data)
    other = build_bundle(synth_generate("redundant_columns_binary", 200, 0), 0)
    with pytest.raises(ConfigError, match="schema"):
        finetune(pre, other, TrainConfig(max_epochs=1))
