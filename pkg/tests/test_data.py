import json

import numpy as np
import pytest
from scipy.stats import norm

from tabmtr import data as d
from tabmtr.metrics import auc


@pytest.mark.parametrize("n,bs", [
    (60_000, 1024), (50_001, 1024), (50_000, 512), (20_000, 512), (10_000, 512),
    (9_999, 256), (5_000, 256), (4_999, 128), (1_000, 128), (999, 64), (10, 64),
])
def test_batch_size_schedule(n, bs):
    assert d.batch_size_for(n) == bs


def test_split_fractions_disjoint_and_stratified():
    labels = np.array([0] * 700 + [1] * 300)
    tr, va, te = d.split_indices(1000, 0, labels)
    assert (len(tr), len(va), len(te)) == (600, 200, 200)
    assert len(set(tr) | set(va) | set(te)) == 1000
    for part in (tr, va, te):
        assert abs(labels[part].mean() - 0.3) <= 0.01


def test_split_is_seeded():
    a = d.split_indices(100, 3)
    b = d.split_indices(100, 3)
    c = d.split_indices(100, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])


def test_validation_is_capped():
    tr, va, te = d.split_indices(1000, 0, val_limit=50)
    assert len(va) == 50 and len(tr) == 600 and len(te) == 200


def test_quantile_transform_matches_reference_implementation():
    qt_ref = pytest.importorskip("sklearn.preprocessing").QuantileTransformer
    rng = np.random.default_rng(0)
    train = np.concatenate([rng.exponential(size=3000), np.zeros(200)])  # with ties
    test = np.concatenate([rng.exponential(size=500) * 1.5, [-1.0, 100.0]])
    ours = d.QuantileTransform().fit(train).transform(test)
    ref = qt_ref(n_quantiles=1000, output_distribution="normal", subsample=10**9)
    ref.fit(train[:, None])
    np.testing.assert_allclose(ours, ref.transform(test[:, None])[:, 0], atol=1e-9)


def test_quantile_transform_clips_and_is_monotone():
    qt = d.QuantileTransform().fit(np.arange(100.0))
    out = qt.transform(np.array([-1e9, 0.0, 50.0, 99.0, 1e9]))
    assert np.all(np.diff(out) >= 0)
    assert out[0] == pytest.approx(norm.ppf(1e-7))
    assert out[-1] == pytest.approx(norm.ppf(1 - 1e-7))
    assert out[2] == pytest.approx(0.0, abs=0.02)


def test_quantile_transform_round_trip():
    qt = d.QuantileTransform(n_knots=10).fit(np.random.default_rng(0).normal(size=50))
    back = d.QuantileTransform.from_dict(json.loads(json.dumps(qt.to_dict())))
    x = np.linspace(-3, 3, 11)
    np.testing.assert_array_equal(qt.transform(x), back.transform(x))


def test_ordinal_encoding_unknowns_map_to_last_index():
    enc = d.OrdinalEncoding().fit(["b", "a", "c", "a"])
    assert enc.categories == ["a", "b", "c"]
    assert enc.transform(["c", "zz", "a"]).tolist() == [2, 3, 0]
    assert enc.cardinality == 4


def _write(tmp_path, text, desc):
    (tmp_path / "t.csv").write_text(text)
    (tmp_path / "t.json").write_text(json.dumps(desc))
    return tmp_path / "t.csv", d.load_descriptor(tmp_path / "t.json")


DESC = {"columns": [{"name": "x", "kind": "numeric"}, {"name": "c", "kind": "categorical"}],
        "target": "y", "task": "binary"}


def test_load_csv_parses_missing_values(tmp_path):
    rows = "x,c,y\n" + "\n".join(f"{i if i % 7 else ''},{'ab'[i % 2]},{i % 2}" for i in range(40))
    path, desc = _write(tmp_path, rows, DESC)
    raw = d.load_csv(path, desc)
    assert raw.metric == "AUC"
    assert raw.missing["x"] == 6
    assert np.isnan(raw.numeric[0, 0])
    bundle = d.build_bundle(raw, 0)
    assert np.all(np.isfinite(bundle.train.x_num))


@pytest.mark.parametrize("text,match", [
    ("x,c\n1,a\n", "header lacks"),
    ("x,c,y\n1,a,0\nfoo,b,1\n", "non-numeric"),
    ("x,c,y\n1,a,0\n2,b,\n", "missing target"),
    ("x,c,y\n1,a,0\n2,b,1\n3,b,2\n", "2 classes"),
    ("x,c,y\n1,a,0\n2,b\n", "expected 3 cells"),
])
def test_load_csv_errors(tmp_path, text, match):
    path, desc = _write(tmp_path, text, DESC)
    with pytest.raises(d.DataError, match=match):
        d.load_csv(path, desc)


def test_train_statistics_only_come_from_train():
    raw = d.synth_generate("linear_regression", 500, 0)
    bundle = d.build_bundle(raw, 0)
    tr, _, _ = d.split(raw, 0)
    assert bundle.target_mean == pytest.approx(tr.target.mean())
    assert bundle.target_std == pytest.approx(tr.target.std())  # population std
    assert bundle.train.y.mean() == pytest.approx(0.0, abs=1e-12)
    assert bundle.train.y.std() == pytest.approx(1.0)
    assert bundle.fitted.quantiles[0].knots[0] == tr.numeric[:, 0].min()


def test_unseen_category_in_test_uses_unknown_index():
    raw = d.synth_generate("two_gaussians_binary", 200, 0)
    _, _, te = d.split_indices(200, 0, raw.target)
    raw.categorical[te[0], 0] = "never-seen"
    bundle = d.build_bundle(raw, 0)
    enc = bundle.fitted.encoders[0]
    assert bundle.test.x_cat[0, 0] == enc.unknown_index == len(enc.categories)
    assert bundle.schema.cardinalities[0] == enc.unknown_index + 1


def test_bundle_save_load(tmp_path):
    bundle = d.build_bundle(d.synth_generate("multiclass_blobs", 300, 1), 2)
    bundle.save(tmp_path / "b.npz")
    back = d.DatasetBundle.load(tmp_path / "b.npz")
    assert back.schema == bundle.schema and back.n_outputs == 5
    np.testing.assert_array_equal(back.test.x_num, bundle.test.x_num)


def test_subsample_train_uses_floor_of_fraction():
    bundle = d.build_bundle(d.synth_generate("two_gaussians_binary", 1000, 0), 0)
    part = bundle.subsample_train(0.25, 0)
    assert len(part.train) == 150  # floor(0.25 * 600)
    assert part.val is bundle.val and part.test is bundle.test


def test_two_gaussians_bayes_auc():
    # Bayes-optimal score is the projection on the mean difference; its AUC is
    # Phi(separation / sqrt 2) with separation 4
    raw = d.synth_generate("two_gaussians_binary", 20_000, 0)
    score = raw.numeric.sum(axis=1)
    assert auc(score, raw.target) == pytest.approx(norm.cdf(4 / np.sqrt(2)), abs=0.002)


def test_synthetic_shapes():
    raw = d.synth_generate("redundant_columns_binary", 400, 0)
    assert raw.numeric.shape == (400, 20) and raw.task == "binary"
    with pytest.raises(ValueError):
        d.synth_generate("nope", 10, 0)
