import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepthink import ndtensor as nd
from deepthink.errors import ConfigError, ContractError, DegenerateStatsError, ShapeError

import gradcheck
from oracles import batchnorm_train_oracle, conv2d_loops, cross_entropy_oracle


def _conv(x, w, b=None, stride=1, padding=0):
    return nd.conv2d(nd.Tensor(x), nd.ConvParams(nd.Tensor(w), None if b is None else nd.Tensor(b), stride, padding)).data


class TestConv2d:
    def test_identity_kernel(self):
        assert _conv(np.full((1, 1, 1, 1), 5.0), np.ones((1, 1, 1, 1))).tolist() == [[[[5.0]]]]

    def test_sum_kernel(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert _conv(x, np.ones((1, 1, 2, 2))).tolist() == [[[[10.0]]]]

    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        np.testing.assert_allclose(_conv(x, w, padding=1), conv2d_loops(x, w, padding=1), atol=1e-12, rtol=0)

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)])
    def test_matches_loop_oracle_other_shapes(self, rng, stride, padding, k):
        x = rng.normal(size=(2, 2, 7, 7))
        w = rng.normal(size=(3, 2, k, k))
        b = rng.normal(size=3)
        np.testing.assert_allclose(
            _conv(x, w, b, stride, padding), conv2d_loops(x, w, b, stride, padding), atol=1e-12, rtol=0
        )

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            _conv(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 3, 3)))

    def test_non_integer_output(self, rng):
        with pytest.raises(ConfigError):
            _conv(rng.normal(size=(1, 1, 6, 6)), rng.normal(size=(1, 1, 3, 3)), stride=2)


class TestBatchNorm:
    def test_eval_identity(self, rng):
        state = nd.BatchNormState.create(2, eps=0.0)
        state.training = False
        x = rng.normal(size=(2, 2, 3, 3))
        np.testing.assert_array_equal(nd.batchnorm(x, state).data, x)

    def test_two_point_standardisation(self):
        state = nd.BatchNormState.create(1, eps=0.0)
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        assert nd.batchnorm(x, state).data.ravel().tolist() == [-1.0, 1.0]

    def test_train_moments(self, rng):
        state = nd.BatchNormState.create(3)
        state.gamma.data[...] = [0.5, 2.0, 1.5]
        state.beta.data[...] = [-1.0, 0.0, 3.0]
        x = rng.normal(size=(4, 3, 5, 5)) * 3 + 2
        y = nd.batchnorm(x, state).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), state.beta.data, atol=1e-6)
        expected_var = state.gamma.data**2 * x.var(axis=(0, 2, 3)) / (x.var(axis=(0, 2, 3)) + state.eps)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), expected_var, atol=1e-6)
        np.testing.assert_allclose(y, batchnorm_train_oracle(x, state.gamma.data, state.beta.data, state.eps), atol=1e-12)

    def test_running_stats_update(self, rng):
        state = nd.BatchNormState.create(2, momentum=0.5)
        x = rng.normal(size=(3, 2, 2, 2))
        nd.batchnorm(x, state)
        m = 3 * 2 * 2
        np.testing.assert_allclose(state.running_mean.data, 0.5 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(state.running_var.data, 0.5 + 0.5 * x.var(axis=(0, 2, 3)) * m / (m - 1))
        assert np.all(state.running_var.data >= 0)

    def test_degenerate(self):
        with pytest.raises(DegenerateStatsError):
            nd.batchnorm(np.ones((1, 1, 1, 1)), nd.BatchNormState.create(1))


def test_activations():
    assert nd.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]
    assert nd.sigmoid([0.0]).data.tolist() == [0.5]
    assert nd.tanh([0.0]).data.tolist() == [0.0]
    tail = nd.sigmoid([-40.0, 40.0, -1e6, 1e6]).data
    assert 0 < tail[0] < 1e-17 and tail[1] == 1.0 and tail[2] == 0.0 and tail[3] == 1.0


class TestPooling:
    def test_mean(self):
        x = np.array([[[[2.0, 4.0], [6.0, 8.0]]]])
        assert nd.global_avg_pool(x).data.tolist() == [[5.0]]

    def test_constant(self):
        assert np.all(nd.global_avg_pool(np.full((2, 3, 4, 5), 1.75)).data == 1.75)

    def test_direct_sum(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        expected = np.array([[sum(x[n, c].ravel().tolist()) / 20 for c in range(3)] for n in range(2)])
        np.testing.assert_allclose(nd.global_avg_pool(x).data, expected, atol=1e-14)


class TestCrossEntropy:
    def test_saturated(self):
        assert nd.softmax_cross_entropy([[1e6, 0.0]], [0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        assert nd.softmax_cross_entropy(np.zeros((1, 4)), [2]).item() == pytest.approx(math.log(4), abs=1e-15)

    def test_oracle(self, rng):
        logits = rng.normal(size=(6, 5)) * 10
        labels = rng.integers(0, 5, size=6)
        assert nd.softmax_cross_entropy(logits, labels).item() == pytest.approx(
            cross_entropy_oracle(logits.tolist(), labels.tolist()), abs=1e-9
        )

    def test_label_range(self):
        with pytest.raises(IndexError):
            nd.softmax_cross_entropy(np.zeros((1, 3)), [3])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = nd.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        with nd.Tape() as tape:
            loss = x.sum()
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_relu_mask(self):
        x = nd.Tensor([-1.0, 2.0], requires_grad=True)
        with nd.Tape() as tape:
            loss = nd.relu(x).sum()
        nd.backward(tape, loss)
        assert x.grad.tolist() == [0.0, 1.0]

    def test_reused_parameter_accumulates(self):
        x = nd.Tensor([3.0], requires_grad=True)
        with nd.Tape() as tape:
            loss = (x * x + x).sum()
        tape.backward(loss)
        assert x.grad.tolist() == [7.0]

    def test_non_scalar_loss(self):
        x = nd.Tensor([1.0, 2.0], requires_grad=True)
        with nd.Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_no_recording_without_tape(self):
        x = nd.Tensor([1.0], requires_grad=True)
        assert not (x * 2.0).requires_grad

    def test_reverse_order(self):
        x = nd.Tensor([1.0], requires_grad=True)
        with nd.Tape() as tape:
            a = x * 2.0
            b = a + 1.0
            c = b.sum()
        assert [r.out for r in tape.records] == [a, b, c]


@pytest.mark.parametrize("op", sorted(gradcheck.OPS))
def test_gradients_match_finite_differences(op):
    assert gradcheck.worst_error(op, instances=20) < gradcheck.TOL


def test_determinism(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    a = _conv(x, w, padding=1)
    b = _conv(x.copy(), w.copy(), padding=1)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 3),
    c=st.integers(1, 3),
    h=st.integers(1, 6),
    k=st.sampled_from([1, 3]),
    stride=st.integers(1, 2),
    seed=st.integers(0, 2**16),
)
def test_conv_shape_and_values_property(n, c, h, k, stride, seed):
    rng = np.random.default_rng(seed)
    pad = (k - 1) // 2
    if (h + 2 * pad - k) % stride:
        return
    x = rng.normal(size=(n, c, h, h))
    w = rng.normal(size=(2, c, k, k))
    out = _conv(x, w, stride=stride, padding=pad)
    assert out.shape == (n, 2, (h + 2 * pad - k) // stride + 1, (h + 2 * pad - k) // stride + 1)
    np.testing.assert_allclose(out, conv2d_loops(x, w, None, stride, pad), atol=1e-12, rtol=0)
    assert np.all(np.isfinite(out))


def test_module_walks_parameters(rng):
    conv = nd.ConvParams.create(2, 3, 3, rng)
    names = [n for n, _ in conv.named_parameters()]
    assert names == ["weight", "bias"]
    bn = nd.BatchNormState.create(4)
    assert [n for n, _ in bn.named_buffers()] == ["running_mean", "running_var"]
    assert bn.num_parameters() == 8
