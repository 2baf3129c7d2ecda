import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusenet_uq.layers import (
    ConvBlock,
    ConvBlockSpec,
    Dense,
    DenseHead,
    McDropout,
    check_mode,
    conv_block,
    dense,
    global_average_pool,
    mc_dropout,
)
from fusenet_uq.rng import stream
from fusenet_uq.tensor import GradTape, ShapeError, Tensor


def test_mode_names():
    for mode in ("train", "mc_inference", "deterministic"):
        assert check_mode(mode) == mode
    with pytest.raises(ValueError):
        check_mode("eval")


def test_dropout_rate_zero_is_identity_in_every_mode():
    x = Tensor(np.random.default_rng(0).standard_normal((4, 5)))
    for mode in ("train", "mc_inference", "deterministic"):
        assert McDropout(0.0)(x, mode, stream(1)) is x
    assert mc_dropout(x, 0.0, None, True) is x


def test_dropout_rejects_bad_rates():
    x = Tensor(np.ones(3))
    for rate in (1.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            mc_dropout(x, rate, stream(0), True)
        with pytest.raises(ValueError):
            McDropout(rate)


def test_dropout_same_seed_same_mask():
    x = Tensor(np.ones((50, 50)))
    a = mc_dropout(x, 0.5, stream(7), True).data
    b = mc_dropout(x, 0.5, stream(7), True).data
    c = mc_dropout(x, 0.5, stream(8), True).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dropout_statistics_on_a_million_elements():
    x = np.random.default_rng(0).uniform(0.5, 1.5, 10**6)
    out = mc_dropout(Tensor(x, dtype=np.float64), 0.3, stream(3), True).data
    assert abs((out == 0).mean() - 0.3) <= 0.002
    assert abs(out.mean() / x.mean() - 1.0) <= 0.005
    survivors = out != 0
    np.testing.assert_allclose(out[survivors], x[survivors] / 0.7)


def test_dropout_expectation_per_element():
    x = np.linspace(-2, 2, 10)
    draws = np.stack([mc_dropout(Tensor(x, dtype=np.float64), 0.4, stream(5, i), True).data for i in range(100_000 // 10)])
    # 10^4 draws per element: sampling error of the mean is about 1.2% of |x|; pool over elements for 1%
    pooled = draws.mean(axis=0) @ x / (x @ x)
    assert abs(pooled - 1.0) < 0.01


def test_dropout_inactive_in_deterministic_mode():
    x = Tensor(np.ones((3, 3)))
    assert McDropout(0.5)(x, "deterministic", stream(0)) is x
    assert McDropout(0.5, always_active=False)(x, "mc_inference", stream(0)) is x
    assert not np.array_equal(McDropout(0.5)(x, "mc_inference", stream(0)).data, x.data)


def test_dropout_gradient_flows_through_survivors_only():
    x = Tensor(np.ones((20, 20)), requires_grad=True, dtype=np.float64)
    with GradTape() as tape:
        y = mc_dropout(x, 0.5, stream(4), True)
        loss = y.sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, y.data)


def test_conv_block_spec_invariants():
    with pytest.raises(ValueError):
        ConvBlockSpec(8, kernel=4)
    with pytest.raises(ValueError):
        ConvBlockSpec(8, has_dropout=True, dropout_rate=0.0)
    with pytest.raises(ValueError):
        ConvBlockSpec(8, has_dropout=False, dropout_rate=0.2)
    with pytest.raises(ValueError):
        ConvBlockSpec(0)
    spec = ConvBlockSpec(8, 3, True, 0.2).without_dropout()
    assert not spec.has_dropout and spec.dropout_rate == 0.0


def test_conv_block_shape():
    block = ConvBlock(1, ConvBlockSpec(16), stream(0))
    out = conv_block(Tensor(np.random.default_rng(0).standard_normal((1, 1, 32, 32))), block, "deterministic")
    assert out.shape == (1, 16, 16, 16)


def test_five_chained_blocks_on_64px():
    rng = stream(0)
    chans = [1, 16, 32, 64, 128, 128]
    x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 64, 64)))
    for a, b in zip(chans, chans[1:]):
        x = ConvBlock(a, ConvBlockSpec(b, n_convs=1), rng)(x, "deterministic")
    assert x.shape == (1, 128, 2, 2)


def test_block_without_dropout_ignores_rng():
    block = ConvBlock(2, ConvBlockSpec(4), stream(0))
    x = Tensor(np.random.default_rng(2).standard_normal((2, 2, 8, 8)))
    a = block(x, "mc_inference", stream(1)).data
    b = block(x, "mc_inference", stream(2)).data
    np.testing.assert_array_equal(a, b)


def test_block_rejects_odd_spatial_dims():
    block = ConvBlock(1, ConvBlockSpec(4), stream(0))
    with pytest.raises(ShapeError):
        block(Tensor(np.ones((1, 1, 5, 6))), "deterministic")


def test_mc_inference_leaves_running_stats():
    block = ConvBlock(1, ConvBlockSpec(4, has_dropout=True, dropout_rate=0.2), stream(0))
    before = block.bn.stats.mean.copy(), block.bn.stats.var.copy()
    block(Tensor(np.random.default_rng(3).standard_normal((2, 1, 8, 8))), "mc_inference", stream(1))
    np.testing.assert_array_equal(block.bn.stats.mean, before[0])
    np.testing.assert_array_equal(block.bn.stats.var, before[1])
    block(Tensor(np.random.default_rng(3).standard_normal((2, 1, 8, 8))), "train", stream(1))
    assert not np.array_equal(block.bn.stats.mean, before[0])


def test_global_average_pool_examples():
    assert global_average_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.tolist() == [[2.5]]
    np.testing.assert_array_equal(global_average_pool(Tensor(np.full((2, 3, 4, 5), 1.5))).data, np.full((2, 3), 1.5))
    v = np.random.default_rng(0).standard_normal((2, 3, 1, 1)).astype(np.float32)
    np.testing.assert_array_equal(global_average_pool(Tensor(v)).data, v[:, :, 0, 0])


def test_dense_examples():
    b = np.array([1.0, -2.0, 3.0])
    out = dense(Tensor(np.ones((4, 2))), Tensor(np.zeros((2, 3))), Tensor(b), "none").data
    np.testing.assert_array_equal(out, np.tile(b, (4, 1)))
    p = dense(Tensor(np.random.default_rng(0).standard_normal((5, 4))), Tensor(np.random.default_rng(1).standard_normal((4, 3))), Tensor(np.zeros(3)), "softmax").data
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)
    r = dense(Tensor(np.array([[-1.0, 2.0]])), Tensor(np.eye(2)), Tensor(np.zeros(2)), "relu").data
    assert r.tolist() == [[0.0, 2.0]]
    with pytest.raises(ShapeError):
        dense(Tensor(np.ones((1, 3))), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    with pytest.raises(ValueError):
        dense(Tensor(np.ones((1, 2))), Tensor(np.eye(2)), Tensor(np.zeros(2)), "tanh")


def test_dense_head_layout():
    head = DenseHead(10, [512, 128, 64, 3], [0.7, 0.5, 0.3], stream(0))
    assert [d.rate for d in head.drops] == [0.7, 0.5, 0.3]
    assert [layer.weight.shape for layer in head.hidden] == [(10, 512), (512, 128), (128, 64)]
    assert head.out.weight.shape == (64, 3)
    with pytest.raises(ValueError):
        DenseHead(10, [8, 3], [0.5, 0.5], stream(0))


def test_parameters_are_named_and_counted():
    layer = Dense(4, 3, stream(0))
    assert set(layer.parameters()) == {"weight", "bias"}
    assert layer.parameter_count() == 4 * 3 + 3
    block = ConvBlock(1, ConvBlockSpec(2), stream(0))
    assert set(block.parameters()) == {"convs.0.weight", "convs.0.bias", "convs.1.weight", "convs.1.bias", "bn.gamma", "bn.beta"}
    assert set(block.buffers()) == {"bn.stats"}


@settings(max_examples=20, deadline=None)
@given(
    b=st.integers(1, 3), c=st.integers(1, 3), out=st.integers(1, 4),
    half=st.integers(1, 4), seed=st.integers(0, 1000),
)
def test_conv_block_output_shape_property(b, c, out, half, seed):
    block = ConvBlock(c, ConvBlockSpec(out), stream(seed))
    x = Tensor(np.random.default_rng(seed).standard_normal((b, c, 2 * half, 2 * half)))
    assert block(x, "deterministic").shape == (b, out, half, half)


@settings(max_examples=20, deadline=None)
@given(rate=st.floats(0.0, 0.95), seed=st.integers(0, 10**6))
def test_dropout_output_is_zero_or_scaled(rate, seed):
    x = np.random.default_rng(seed).uniform(1, 2, 200)
    out = mc_dropout(Tensor(x, dtype=np.float64), rate, stream(seed), True).data
    scaled = np.isclose(out, x / (1 - rate), rtol=1e-12)
    assert np.all((out == 0) | scaled)
