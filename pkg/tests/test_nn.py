import numpy as np
import pytest

from tabmtr import tensor as tn
from tabmtr.model import ColumnSchema, TabTransformer
from tabmtr.nn import (AdamW, LayerNorm, Linear, MultiHeadAttention, NonFiniteGradientError,
                       ReGLUFFN, TransformerBlock, dropout, ffn_hidden_size, load_checkpoint,
                       parameter, save_checkpoint)
from tabmtr.tensor import Tensor


def test_linear_kaiming_normal_scale():
    lin = Linear(400, 300, np.random.default_rng(0))
    assert abs(lin.weight.data.std() - np.sqrt(2 / 400)) < 0.002
    assert np.all(np.abs(lin.bias.data) <= 1 / np.sqrt(400))


def test_linear_shape_error():
    lin = Linear(4, 3, np.random.default_rng(0))
    with pytest.raises(tn.ShapeError, match=r"\(2, 5\)"):
        lin(np.ones((2, 5)))


def test_dropout_eval_is_identity_and_train_keeps_expectation():
    x = Tensor(np.ones((200, 200)))
    assert dropout(x, 0.3, False, None) is x
    y = dropout(x, 0.3, True, np.random.default_rng(0)).data
    assert set(np.unique(y)) == {0.0, 1 / 0.7}
    assert abs((y == 0).mean() - 0.3) < 0.01


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rate_validation(rate):
    with pytest.raises(ValueError):
        dropout(Tensor([1.0]), rate, True, np.random.default_rng(0))


def test_layernorm_output_statistics():
    x = Tensor(np.random.default_rng(0).normal(3.0, 7.0, size=(10, 16)))
    out = LayerNorm(16)(x).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_layernorm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        LayerNorm(4, eps=0.0)


def test_heads_must_divide_dimension():
    with pytest.raises(ValueError, match="divisible"):
        MultiHeadAttention(10, np.random.default_rng(0), n_heads=3)


def test_attention_shapes_and_weights():
    mha = MultiHeadAttention(16, np.random.default_rng(0), n_heads=4)
    out = mha(np.random.default_rng(1).normal(size=(3, 7, 16)))
    assert out.shape == (3, 7, 16)
    assert mha.last_attention.shape == (3, 4, 7, 7)
    np.testing.assert_allclose(mha.last_attention.sum(-1), 1.0)


def test_attention_dropout_needs_rng_in_training():
    mha = MultiHeadAttention(8, np.random.default_rng(0), n_heads=2, dropout=0.2)
    with pytest.raises(ValueError):
        mha(np.ones((1, 2, 8)), training=True)


def test_ffn_hidden_size_floor():
    assert ffn_hidden_size(192) == 256
    assert ffn_hidden_size(32) == 42
    assert ReGLUFFN(192, np.random.default_rng(0)).up.weight.shape == (192, 512)


def test_block_without_output_projections_is_identity():
    block = TransformerBlock(8, np.random.default_rng(0), n_heads=2)
    for lin in (block.attention.out, block.ffn.down):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    x = np.random.default_rng(1).normal(size=(2, 5, 8))
    np.testing.assert_array_equal(block(x).data, x)


def test_adamw_one_step_by_hand():
    # g = 2, lr = 0.1, wd = 0.01: bias-corrected m/sqrt(v) = 2/2 = 1
    p, q = parameter([1.0]), parameter([1.0])
    p.grad, q.grad = np.array([2.0]), np.array([2.0])
    opt = AdamW([("p", p), ("q", q)], lr=0.1, weight_decay=0.01, exempt={"q"})
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 * (1 - 0.1 * 0.01) - 0.1 * 2 / (2 + 1e-8)], rtol=0, atol=1e-15)
    np.testing.assert_allclose(q.data, [1.0 - 0.1 * 2 / (2 + 1e-8)], rtol=0, atol=1e-15)


def test_adamw_second_step_by_hand():
    p = parameter([0.0])
    opt = AdamW([("p", p)], lr=0.5, weight_decay=0.0)
    for g in (1.0, 3.0):
        p.grad = np.array([g])
        opt.step()
    m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0  # 0.39
    v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
    mhat, vhat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    expected = -0.5 * 1.0 / (1.0 + 1e-8) - 0.5 * mhat / (np.sqrt(vhat) + 1e-8)
    np.testing.assert_allclose(p.data, [expected], rtol=1e-12)


def test_adamw_rejects_nonfinite_gradients():
    p = parameter([1.0, 2.0])
    p.grad = np.array([np.nan, 0.0])
    opt = AdamW([("w", p)])
    with pytest.raises(NonFiniteGradientError, match="'w'"):
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_decay_exempt_set_of_full_model():
    model = TabTransformer(ColumnSchema(["a"], ["b"], [3]), 1, seed=0)
    exempt = model.decay_exempt()
    names = dict(model.named_parameters())
    for name in names:
        should = (name.startswith("tokenizer.") or name.endswith(".bias") or "norm." in name
                  or name in ("cls_token", "mask_token"))
        assert (name in exempt) == should, name


def test_checkpoint_round_trip(tmp_path):
    model = TabTransformer(ColumnSchema(["a", "b"], ["c"], [4]), 2, seed=1)
    path = tmp_path / "m.npz"
    save_checkpoint(path, model.state_dict(), {"schema": model.schema.to_dict()})
    state, meta = load_checkpoint(path)
    other = TabTransformer(ColumnSchema(["a", "b"], ["c"], [4]), 2, seed=2)
    other.load_state_dict(state)
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), other.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    assert meta["schema"]["cardinalities"] == [4]


def test_checkpoint_shape_mismatch_is_reported(tmp_path):
    small = TabTransformer(ColumnSchema(["a"], [], []), 1, seed=0)
    big = TabTransformer(ColumnSchema(["a", "b"], [], []), 1, seed=0)
    with pytest.raises(tn.ShapeError, match="tokenizer"):
        big.load_state_dict(small.state_dict())


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.npz"
    header = np.frombuffer(b'{"format_version": 99, "shapes": {}, "meta": {}}', dtype=np.uint8)
    np.savez(path, __meta__=header)
    with pytest.raises(ValueError, match="format"):
        load_checkpoint(path)
