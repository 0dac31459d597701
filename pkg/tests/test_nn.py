import numpy as np
import pytest

from fineformer import tensor as T
from fineformer.gradcheck import MODEL_TOL, check_gradients, randomize_parameters
from fineformer.nn import (EncoderLayer, EncoderStack, LayerNorm, Linear, MultiHeadSelfAttention,
                           layer_norm, truncated_normal)
from fineformer.tensor import Tensor


def ln(x):
    x = Tensor(np.asarray(x, dtype=float))
    h = x.shape[-1]
    return layer_norm(x, Tensor(np.ones(h)), Tensor(np.zeros(h))).data


def test_layer_norm_examples():
    assert np.array_equal(ln([[5.0, 5.0, 5.0, 5.0]]), np.zeros((1, 4)))
    assert np.allclose(ln([[1.0, 3.0]]), [[-1.0, 1.0]], atol=1e-12)


def test_layer_norm_rows_standardized_then_affine():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 8)) * 3 + 1
    y = ln(x)
    assert np.allclose(y.mean(-1), 0, atol=1e-12)
    assert np.allclose(y.var(-1), 1, atol=1e-10)
    g, b = rng.standard_normal(8), rng.standard_normal(8)
    z = layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    assert np.allclose(z, y * g + b, atol=1e-12)


def test_layer_norm_requires_two_features():
    with pytest.raises(ValueError):
        LayerNorm(1)
    with pytest.raises(ValueError):
        ln([[1.0]])


def test_layer_norm_gradient():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    norm = LayerNorm(8)
    randomize_parameters(norm, rng)
    r = Tensor(rng.standard_normal((4, 8)))
    results = check_gradients(lambda: T.sum_all(T.mul(norm(x), r)),
                              [("x", x)] + list(norm.named_parameters()), tol=1e-6)
    assert all(res.passed for res in results), [res.line() for res in results]


def test_attention_single_token_is_one():
    rng = np.random.default_rng(2)
    mha = MultiHeadSelfAttention(8, 2, rng)
    randomize_parameters(mha, rng)
    mha(Tensor(rng.standard_normal((1, 8))))
    assert np.array_equal(mha.last_attention, np.ones((1, 2, 1, 1)))


def test_attention_rows_are_distributions():
    rng = np.random.default_rng(3)
    mha = MultiHeadSelfAttention(16, 4, rng)
    randomize_parameters(mha, rng)
    mha(Tensor(rng.standard_normal((3, 7, 16)) * 4))
    p = mha.last_attention
    assert p.shape == (3, 4, 7, 7)
    assert np.max(np.abs(p.sum(-1) - 1)) < 1e-12
    assert p.min() >= 0 and p.max() <= 1


def test_uniform_attention_gives_mean_of_rows():
    rng = np.random.default_rng(4)
    h = 8
    mha = MultiHeadSelfAttention(h, 2, rng)
    mha.query.weight.data[...] = 0
    mha.key.weight.data[...] = 0
    mha.value.weight.data[...] = np.eye(h)
    mha.output.weight.data[...] = np.eye(h)
    mha.output.bias.data[...] = 0
    x = rng.standard_normal((5, h))
    out = mha(Tensor(x)).data
    assert np.allclose(out, np.tile(x.mean(0), (5, 1)), atol=1e-14)


def test_heads_must_divide_hidden():
    with pytest.raises(ValueError, match="divisible"):
        MultiHeadSelfAttention(10, 4, np.random.default_rng(0))


@pytest.mark.parametrize("s", [1, 7, 32])
def test_encoder_layer_preserves_shape(s):
    rng = np.random.default_rng(s)
    layer = EncoderLayer(16, 2, rng)
    assert layer(Tensor(rng.standard_normal((s, 16)))).shape == (s, 16)
    assert layer(Tensor(rng.standard_normal((2, s, 16)))).shape == (2, s, 16)


def test_post_norm_composition():
    rng = np.random.default_rng(5)
    layer = EncoderLayer(8, 2, rng)
    randomize_parameters(layer, rng)
    x = Tensor(rng.standard_normal((4, 8)))
    y = layer.attention_norm(T.add(x, layer.attention(x)))
    expected = layer.ffn_norm(T.add(y, layer.ffn.down(T.gelu(layer.ffn.up(y)))))
    assert np.array_equal(layer(x).data, expected.data)
    assert layer.ffn.up.weight.shape == (8, 32)


@pytest.mark.parametrize("layers", [1, 3])
def test_permutation_equivariance(layers):
    rng = np.random.default_rng(6)
    stack = EncoderStack(layers, 16, 4, rng)
    randomize_parameters(stack, rng)
    x = rng.standard_normal((2, 9, 16))
    perm = rng.permutation(9)
    out = stack(Tensor(x)).data
    out_perm = stack(Tensor(x[:, perm])).data
    assert np.max(np.abs(out_perm - out[:, perm])) < 1e-9


def test_stack_equals_sequential_layers():
    rng = np.random.default_rng(7)
    stack = EncoderStack(3, 8, 2, rng)
    randomize_parameters(stack, rng)
    x = Tensor(rng.standard_normal((5, 8)))
    manual = x
    for layer in stack.layers:
        manual = layer(manual)
    assert np.array_equal(stack(x).data, manual.data)
    assert stack(x).shape == (5, 8)


def test_single_layer_stack_equals_layer():
    stack = EncoderStack(1, 8, 2, np.random.default_rng(8))
    layer = EncoderLayer(8, 2, np.random.default_rng(8))
    x = Tensor(np.random.default_rng(9).standard_normal((4, 8)))
    assert np.array_equal(stack(x).data, layer(x).data)
    with pytest.raises(ValueError):
        EncoderStack(0, 8, 2, np.random.default_rng(0))


def test_stack_gradient_tiny_config():
    rng = np.random.default_rng(10)
    stack = EncoderStack(2, 8, 2, rng)
    randomize_parameters(stack, rng)
    x = Tensor(rng.standard_normal((5, 8)), requires_grad=True)
    r = Tensor(rng.standard_normal((5, 8)))
    results = check_gradients(lambda: T.sum_all(T.mul(stack(x), r)),
                              [("x", x)] + list(stack.named_parameters()), MODEL_TOL)
    assert all(res.passed for res in results), [res.line() for res in results if not res.passed]


def test_init_determinism_and_specified_values():
    a = EncoderStack(2, 16, 4, np.random.default_rng(11))
    b = EncoderStack(2, 16, 4, np.random.default_rng(11))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    for name, p in a.named_parameters():
        if name.endswith("gain"):
            assert np.all(p.data == 1.0)
        elif name.endswith(("offset", "bias")):
            assert np.all(p.data == 0.0)


def test_truncated_normal_statistics():
    w = Linear(768, 768, np.random.default_rng(12)).weight.data
    assert 0.018 <= w.std() <= 0.022
    assert np.abs(w).max() <= 2 * 0.02 / 0.8796 + 1e-12
    draws = truncated_normal(np.random.default_rng(13), (200_000,), std=1.0)
    assert abs(draws.std() - 1.0) < 0.01


def test_state_dict_round_trip_and_strictness():
    rng = np.random.default_rng(14)
    layer = EncoderLayer(8, 2, rng)
    other = EncoderLayer(8, 2, np.random.default_rng(15))
    other.load_state_dict(layer.state_dict())
    for (_, p), (_, q) in zip(layer.named_parameters(), other.named_parameters()):
        assert np.array_equal(p.data, q.data)
    state = layer.state_dict()
    state.pop("ffn.up.bias")
    with pytest.raises(KeyError):
        other.load_state_dict(state)
