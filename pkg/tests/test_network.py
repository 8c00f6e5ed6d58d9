import math

import numpy as np
import pytest

from deepthink import ndtensor as nd
from deepthink.cells import ligru_step, precompute_input_drive
from deepthink.errors import ConfigError, ShapeError
from deepthink.network import (
    DeepThinkNet,
    NetConfig,
    feedforward_baseline,
    forward_iterate,
    input_transform,
    total_loss,
)

from oracles import conv2d_loops, cross_entropy_oracle


def small_net(seed=0, **kw):
    cfg = dict(channels=4, t_train=3, t_test=6, num_classes=10, input_channels=3)
    cfg.update(kw)
    return DeepThinkNet(NetConfig(**cfg), seed=seed)


def force_carry(net):
    """Saturate the update gate closed so every step returns h_prev."""
    net.cell.bn_z.beta.data[...] = -1e6


@pytest.fixture
def X(rng):
    return rng.normal(size=(3, 3, 6, 6))


class TestInputTransform:
    def test_zero_weights(self, X):
        net = small_net()
        net.input_conv.weight.data[...] = 0.0
        net.input_conv.bias.data[...] = 0.0
        assert np.all(input_transform(net, X).data == 0.0)

    def test_negative_bias_only(self, X):
        net = small_net()
        net.input_conv.weight.data[...] = 0.0
        net.input_conv.bias.data[...] = -1.0
        assert np.all(input_transform(net, X).data == 0.0)

    def test_matches_oracle(self, X):
        net = small_net()
        expected = np.maximum(conv2d_loops(X, net.input_conv.weight.data, net.input_conv.bias.data, 1, 1), 0)
        np.testing.assert_allclose(input_transform(net, X).data, expected, atol=1e-12)

    def test_stride2_halves(self, X):
        net = small_net(downsample="stride2")
        assert input_transform(net, X).shape == (3, 4, 3, 3)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            input_transform(small_net(), rng.normal(size=(1, 1, 6, 6)))


class TestForwardIterate:
    def test_prefix_property(self, X):
        net = small_net().eval()
        short = forward_iterate(net, X, 2)
        long = forward_iterate(net, X, 5)
        assert len(long) == 5 and len(long.hidden) == 5 and len(long.logits_aux) == 5
        for t in range(2):
            np.testing.assert_array_equal(short.logits_main[t].data, long.logits_main[t].data)
            np.testing.assert_array_equal(short.hidden[t].data, long.hidden[t].data)

    def test_carry_gives_constant_logits(self, X):
        net = small_net()
        force_carry(net)
        out = forward_iterate(net, X, 4)
        for t in range(1, 4):
            np.testing.assert_array_equal(out.logits_main[t].data, out.logits_main[0].data)
            np.testing.assert_array_equal(out.logits_aux[t].data, out.logits_aux[0].data)

    def test_three_steps_equal_manual_chain(self, X):
        net = small_net()
        h0 = input_transform(net, X)
        drive = precompute_input_drive(net.cell, h0)
        h = h0
        for _ in range(3):
            h = ligru_step(net.cell, h, drive)
        np.testing.assert_allclose(forward_iterate(net, X, 3).hidden[-1].data, h.data, atol=1e-12)

    def test_head_widths(self, X):
        out = forward_iterate(small_net(), X, 1)
        assert out.logits_main[0].shape == (3, 10)
        assert out.logits_aux[0].shape == (3, 4)

    def test_rejects_zero_iterations(self, X):
        with pytest.raises(ConfigError):
            forward_iterate(small_net(), X, 0)

    @pytest.mark.parametrize("kind", ["gru", "recall"])
    def test_other_cells(self, X, kind):
        out = forward_iterate(small_net(cell_kind=kind), X, 3)
        assert all(np.all(np.isfinite(z.data)) for z in out.logits_main)


class TestTotalLoss:
    def test_uniform_logits(self, X):
        net = small_net()
        for head in (net.head_main, net.head_aux):
            head.weight.data[...] = 0.0
        loss = total_loss(net, X, [0, 1, 2], [0, 1, 3]).item()
        assert loss == pytest.approx(math.log(10) + math.log(4), abs=1e-12)
        assert loss == pytest.approx(3.6889, abs=1e-4)

    def test_saturated_heads(self, X):
        net = small_net()
        for head in (net.head_main, net.head_aux):
            head.weight.data[...] = 0.0
        net.head_main.bias.data[...] = 0.0
        net.head_main.bias.data[7] = 1e4
        net.head_aux.bias.data[2] = 1e4
        assert total_loss(net, X, [7, 7, 7], [2, 2, 2]).item() == pytest.approx(0.0, abs=1e-12)

    def test_decomposition(self, X, rng):
        net = small_net()
        y_main = rng.integers(0, 10, size=3)
        y_aux = rng.integers(0, 4, size=3)
        main, aux = net.forward_last(X, 3)
        separate = cross_entropy_oracle(main.data.tolist(), y_main.tolist()) + cross_entropy_oracle(
            aux.data.tolist(), y_aux.tolist()
        )
        assert abs(total_loss(net, X, y_main, y_aux).item() - separate) < 1e-12

    def test_uses_only_last_iteration(self, X, rng):
        net = small_net(t_train=2)
        y_main, y_aux = rng.integers(0, 10, size=3), rng.integers(0, 4, size=3)
        out = forward_iterate(net, X, 2)
        expected = nd.softmax_cross_entropy(out.logits_main[-1], y_main) + nd.softmax_cross_entropy(
            out.logits_aux[-1], y_aux
        )
        assert total_loss(net, X, y_main, y_aux).item() == expected.item()


def test_head_independence(X, rng):
    net = small_net()
    before = forward_iterate(net, X, 2)
    net.head_aux.weight.data += rng.normal(size=net.head_aux.weight.shape)
    after = forward_iterate(net, X, 2)
    for a, b in zip(before.logits_main, after.logits_main):
        np.testing.assert_array_equal(a.data, b.data)
    net.head_main.bias.data += 3.0
    final = forward_iterate(net, X, 2)
    for a, b in zip(after.logits_aux, final.logits_aux):
        np.testing.assert_array_equal(a.data, b.data)


class TestFeedForward:
    def test_depth_zero_is_heads_on_h0(self, X):
        net = small_net(cell_kind="feedforward", ff_depth=2)
        main, aux = feedforward_baseline(net, X, depth=0)
        ref_main, ref_aux = net.heads(input_transform(net, X))
        np.testing.assert_array_equal(main.data, ref_main.data)
        np.testing.assert_array_equal(aux.data, ref_aux.data)

    def test_zero_residual_branch(self, X):
        net = small_net(cell_kind="feedforward", ff_depth=3)
        for block in net.blocks:
            block.conv2.weight.data[...] = 0.0
            block.conv2.bias.data[...] = 0.0
        # h0 is already non-negative, so relu(h0 + 0) = h0
        np.testing.assert_array_equal(feedforward_baseline(net, X)[0].data, feedforward_baseline(net, X, 0)[0].data)

    def test_depth_two_manual_chain(self, X):
        net = small_net(cell_kind="feedforward", ff_depth=2)
        h = np.maximum(conv2d_loops(X, net.input_conv.weight.data, net.input_conv.bias.data, 1, 1), 0)
        for block in net.blocks:
            inner = np.maximum(conv2d_loops(h, block.conv1.weight.data, block.conv1.bias.data, 1, 1), 0)
            h = np.maximum(h + conv2d_loops(inner, block.conv2.weight.data, block.conv2.bias.data, 1, 1), 0)
        np.testing.assert_allclose(
            feedforward_baseline(net, X)[0].data, net.heads(nd.Tensor(h))[0].data, atol=1e-12
        )

    def test_no_iterations(self, X):
        with pytest.raises(ConfigError):
            forward_iterate(small_net(cell_kind="feedforward"), X, 2)

    def test_depth_out_of_range(self, X):
        with pytest.raises(ConfigError):
            feedforward_baseline(small_net(cell_kind="feedforward", ff_depth=1), X, depth=2)


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(t_train=5, t_test=4), dict(t_train=0), dict(channels=0), dict(cell_kind="lstm"), dict(downsample="x")],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            NetConfig(**kw)

    def test_defaults(self):
        cfg = NetConfig()
        assert (cfg.channels, cfg.t_train, cfg.t_test) == (128, 30, 100)


def test_parameter_count_is_exact():
    net = small_net()
    assert net.num_parameters() == sum(p.data.size for _, p in net.named_parameters())
    ligru = small_net(channels=16).num_parameters()
    gru = small_net(channels=16, cell_kind="gru").num_parameters()
    assert ligru < gru


def test_same_seed_same_weights():
    a, b = small_net(seed=3), small_net(seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
