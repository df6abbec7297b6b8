import numpy as np
import pytest

from hpnet.conv import sparse_conv3d
from hpnet.errors import ContractError, DimensionError
from hpnet.network import (
    HPNet,
    HPNetConfig,
    Scheme,
    frames_to_blocks,
    lstm3d_step,
    rollout_frames,
)
from hpnet.tensor import Tensor, grad_check, no_grad, tsum

from test_conv import conv3d_reference

RNG = np.random.default_rng(1234)


def tiny_config(**kw):
    base = dict(levels=2, channels=(2, 3), block_depth=2, scheme=Scheme.BLOCK_TO_BLOCK, seed=7)
    base.update(kw)
    return HPNetConfig(**base)


def zero_net(config):
    net = HPNet(config)
    for t in net.named_params().values():
        t.data[:] = 0.0
    return net


class TestConfig:
    def test_frame_to_frame_forces_single_frame(self):
        cfg = HPNetConfig(levels=1, channels=(4,), block_depth=5, scheme="ff")
        assert cfg.block_depth == 1 and cfg.block_stride == 1
        assert cfg.kernel_shape == (1, 3, 3)

    def test_block_to_block_requires_matching_stride(self):
        with pytest.raises(ContractError):
            HPNetConfig(levels=1, channels=(4,), block_depth=5, block_stride=2, scheme="bb")
        cfg = HPNetConfig(levels=1, channels=(4,), block_depth=5, scheme="bb")
        assert cfg.block_stride == 5

    def test_block_to_frame_default_slides_by_one(self):
        cfg = HPNetConfig(levels=1, channels=(4,), block_depth=5, scheme="bf")
        assert cfg.block_stride == 1
        assert cfg.kernel_shape == (3, 3, 3)

    def test_channels_must_match_levels(self):
        with pytest.raises(ContractError):
            HPNetConfig(levels=3, channels=(4, 8))

    def test_scheme_parse(self):
        assert Scheme.parse("BB") is Scheme.BLOCK_TO_BLOCK
        assert Scheme.parse("frame-to-frame") is Scheme.FRAME_TO_FRAME
        with pytest.raises(ContractError):
            Scheme.parse("xy")

    def test_default_loss_weights(self):
        cfg = tiny_config(levels=3, channels=(2, 2, 2))
        assert cfg.level_loss_weights == (1.0, 0.1, 0.1)
        assert cfg.step_weights(5) == (0.0, 0.25, 0.25, 0.25, 0.25)
        assert cfg.step_weights(1) == (0.0,)

    def test_frame_size_divisibility(self):
        net = HPNet(tiny_config(levels=3, channels=(1, 1, 1)))
        with pytest.raises(DimensionError):
            net.init_states((10, 8))


class TestInit:
    def test_seed_determinism(self):
        a = HPNet(tiny_config()).named_params()
        b = HPNet(tiny_config()).named_params()
        for name in a:
            assert np.array_equal(a[name].data, b[name].data), name

    def test_forget_bias_one_others_zero(self):
        net = HPNet(tiny_config())
        p = net.named_params()
        b = p["level1.lstm.ifgo.bias"].data  # gate order i, f, g, o
        n = b.size // 4
        assert np.all(b[n : 2 * n] == 1.0)
        assert np.all(b[:n] == 0.0) and np.all(b[2 * n :] == 0.0)
        assert np.all(p["level1.p.bias"].data == 0.0)

    def test_weight_bound_scales_with_fan_in(self):
        net = HPNet(tiny_config())
        w = net.named_params()["level1.r.weights"].data  # fan-in 1*27
        assert np.max(np.abs(w)) <= (1.0 / 27) ** 0.5
        assert "level1.e.bias" not in net.named_params()

    def test_shapes_follow_channel_plan(self):
        net = HPNet(tiny_config())
        p = net.named_params()
        assert p["level1.r.weights"].data.shape == (2, 1, 3, 3, 3)
        assert p["level1.p.weights"].data.shape == (1, 2, 3, 3, 3)
        # z at level 1: x(1) + own E(2) + upsampled H2(3); plus hidden(2)
        assert p["level1.lstm.ifgo.weights"].data.shape == (4 * 2, 8, 3, 3, 3)
        # z at level 2 (top): pooled [R1,E1](4) + own E(3); plus hidden(3)
        assert p["level2.lstm.ifgo.weights"].data.shape == (4 * 3, 10, 3, 3, 3)


class TestLSTM:
    def test_zero_weights_analytic(self):
        cfg = tiny_config(levels=1, channels=(2,))
        net = zero_net(cfg)
        net.levels[0].lstm.ifgo.bias.data[2:4] = 1.0  # forget slice, n=2
        v = RNG.normal(size=(2, 2, 4, 4))
        z = Tensor(np.zeros((3, 2, 4, 4)))
        h, c = lstm3d_step(z, Tensor(np.zeros_like(v)), Tensor(v), net.levels[0].lstm)
        sig = lambda x: 1.0 / (1.0 + np.exp(-x))
        assert np.allclose(c.data, sig(1.0) * v)
        assert np.allclose(h.data, sig(0.0) * np.tanh(sig(1.0) * v))

    def test_all_zero_inputs_give_zero_hidden(self):
        cfg = tiny_config(levels=1, channels=(2,))
        net = zero_net(cfg)
        z = Tensor(np.zeros((3, 2, 4, 4)))
        h, c = lstm3d_step(z, Tensor(np.zeros((2, 2, 4, 4))), Tensor(np.zeros((2, 2, 4, 4))), net.levels[0].lstm)
        assert not h.data.any() and not c.data.any()

    def test_matches_scalar_reference(self):
        r = np.random.default_rng(5)
        lstm = HPNet(tiny_config(levels=1, channels=(2,))).levels[0].lstm
        z = r.normal(size=(3, 2, 4, 4))
        h0 = r.normal(size=(2, 2, 4, 4))
        c0 = r.normal(size=(2, 2, 4, 4))

        x = np.concatenate([z, h0], axis=0)
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        wd, bd = lstm.ifgo.weights.data, lstm.ifgo.bias.data
        n = lstm.hidden_channels
        i = sig(conv3d_reference(x, wd[:n], bd[:n]))
        f = sig(conv3d_reference(x, wd[n : 2 * n], bd[n : 2 * n]))
        g = np.tanh(conv3d_reference(x, wd[2 * n : 3 * n], bd[2 * n : 3 * n]))
        o = sig(conv3d_reference(x, wd[3 * n :], bd[3 * n :]))
        c_want = f * c0 + i * g
        h_want = o * np.tanh(c_want)

        h, c = lstm3d_step(Tensor(z), Tensor(h0), Tensor(c0), lstm)
        assert np.max(np.abs(h.data - h_want)) < 1e-12
        assert np.max(np.abs(c.data - c_want)) < 1e-12


def random_blocks(n, hw=(8, 8), depth=2, ch=1, seed=0):
    r = np.random.default_rng(seed)
    return [r.random(size=(ch, depth, *hw)) for _ in range(n)]


class TestModuleAndNetworkStep:
    def test_zero_net_first_step(self):
        net = zero_net(tiny_config())
        blk = random_blocks(1)[0]
        states = net.init_states((8, 8))
        states, res = net.network_step(blk, states)
        assert not res.p1.data.any()
        assert res.level_losses[0] == pytest.approx(np.mean(blk**2))
        # zero R at level 1 leaves level 2 consuming zeros
        assert res.level_losses[1] == 0.0

    def test_identical_input_keeps_r(self):
        net = HPNet(tiny_config())
        blk = random_blocks(1)[0]
        states = net.init_states((8, 8))
        with no_grad():
            states, _ = net.network_step(blk, states)
            r_before = states[0].r.data.copy()
            states, _ = net.network_step(blk, states)
        assert np.array_equal(states[0].r.data, r_before)

    def test_level_shapes_halve(self):
        net = HPNet(tiny_config())
        states = net.init_states((8, 8))
        blk = random_blocks(1)[0]
        with no_grad():
            states, _ = net.network_step(blk, states)
        assert states[0].r.shape == (2, 2, 8, 8)
        assert states[1].r.shape == (3, 2, 4, 4)
        assert states[1].i_prev.shape == (2, 2, 4, 4)

    def test_single_level_has_no_topdown(self):
        net = HPNet(tiny_config(levels=1, channels=(2,)))
        states = net.init_states((8, 8))
        with no_grad():
            _, res = net.network_step(random_blocks(1)[0], states)
        assert res.p1.shape == (1, 2, 8, 8)

    def test_level_weight_masking(self):
        cfg = tiny_config(level_loss_weights=(1.0, 0.0))
        net = HPNet(cfg)
        states = net.init_states((8, 8))
        with no_grad():
            _, res = net.network_step(random_blocks(1)[0], states)
        assert res.loss.item() == pytest.approx(res.level_losses[0])

    def test_prediction_in_range(self):
        net = HPNet(tiny_config(seed=99))
        blocks = random_blocks(4, seed=3)
        with no_grad():
            out = net.forward_sequence(blocks)
        for p in out.predictions:
            assert p.min() >= 0.0 and p.max() <= net.config.p_max

    def test_block_shape_mismatch(self):
        net = HPNet(tiny_config())
        states = net.init_states((8, 8))
        with pytest.raises(DimensionError):
            net.network_step(np.zeros((1, 3, 8, 8)), states)

    def test_telescoping_r_equals_direct_conv(self):
        # R accumulates sparse convs of input deltas; by linearity it
        # must equal the sparse conv of the latest block alone
        net = HPNet(tiny_config(seed=11))
        blocks = random_blocks(20, seed=8)
        states = net.init_states((8, 8))
        with no_grad():
            for b in blocks:
                states, _ = net.network_step(b, states)
            direct = sparse_conv3d(Tensor(blocks[-1]), net.levels[0].r_kernel)
        assert np.max(np.abs(states[0].r.data - direct.data)) < 1e-12

    def test_step_determinism(self):
        cfg = tiny_config(seed=21)
        blocks = random_blocks(3, seed=2)
        losses = []
        for _ in range(2):
            net = HPNet(cfg)
            with no_grad():
                out = net.forward_sequence(blocks)
            losses.append(out.step_losses)
        assert losses[0] == losses[1]


class TestSequence:
    def test_empty_sequence_rejected(self):
        with pytest.raises(ContractError):
            HPNet(tiny_config()).forward_sequence([])

    def test_first_block_unweighted(self):
        net = HPNet(tiny_config(seed=4))
        blocks = random_blocks(3, seed=5)
        out = net.forward_sequence(blocks)
        want = 0.5 * (out.step_losses[1] + out.step_losses[2])
        assert out.loss.item() == pytest.approx(want)

    def test_single_block_sequence_zero_weight(self):
        net = HPNet(tiny_config(seed=4))
        out = net.forward_sequence(random_blocks(1))
        assert out.loss.item() == 0.0

    def test_sequence_gradients_check_out(self):
        # end-to-end finite differences through an 8-block unroll
        cfg = tiny_config(levels=1, channels=(1,), block_depth=2, seed=13)
        net = HPNet(cfg)
        blocks = random_blocks(8, hw=(4, 4), seed=17)
        from hpnet.conv import ConvKernel3D

        def f(t):
            keep = net.levels[0].lstm.ifgo
            net.levels[0].lstm.ifgo = ConvKernel3D(t, keep.bias)
            try:
                return net.forward_sequence(blocks).loss
            finally:
                net.levels[0].lstm.ifgo = keep

        assert grad_check(f, net.levels[0].lstm.ifgo.weights.data.copy(), eps=1e-5) < 1e-4

    def test_capture_collects_per_level_maps(self):
        net = HPNet(tiny_config(seed=3))
        with no_grad():
            out = net.forward_sequence(random_blocks(2), capture=True)
        assert len(out.captured) == 2 and len(out.captured[0]) == 2
        assert out.captured[0][1]["e"].shape == (3, 2, 4, 4)


class TestRollout:
    def test_zero_net_rolls_zeros(self):
        net = zero_net(tiny_config())
        seeds = random_blocks(2, seed=1)
        preds = net.rollout(seeds, 3)
        assert len(preds) == 3
        for p in preds:
            assert not p.any()

    def test_requires_future_blocks(self):
        net = HPNet(tiny_config())
        with pytest.raises(ContractError):
            net.rollout(random_blocks(1), 0)
        with pytest.raises(ContractError):
            net.rollout([], 2)

    def test_outputs_bounded(self):
        net = HPNet(tiny_config(seed=23))
        preds = net.rollout(random_blocks(2, seed=9), 4)
        for p in preds:
            assert p.min() >= 0.0 and p.max() <= 1.0

    def test_block_to_frame_window_slides(self):
        cfg = HPNetConfig(levels=1, channels=(2,), block_depth=3, block_stride=1, scheme="bf")
        net = zero_net(cfg)
        seeds = [np.arange(3 * 16, dtype=np.float64).reshape(1, 3, 4, 4) / 100.0]
        preds = net.rollout(seeds, 2)
        # zero net predicts zero frames; the window keeps sliding
        assert np.array_equal(preds[0][:, :2], seeds[0][:, 1:])
        assert not preds[0][:, 2].any()
        assert np.array_equal(preds[1][:, 0], seeds[0][0:1, 2])
        assert not preds[1][:, 1:].any()


class TestFrameHelpers:
    def test_frames_to_blocks_counts(self):
        frames = RNG.random(size=(11, 4, 4))
        assert len(frames_to_blocks(frames, 5, 5)) == 2
        assert len(frames_to_blocks(frames, 5, 1)) == 7
        assert len(frames_to_blocks(frames, 1, 1)) == 11
        with pytest.raises(ContractError):
            frames_to_blocks(frames[:3], 5, 5)

    def test_rollout_frames_length_and_zero_net(self):
        cfg = tiny_config(levels=1, channels=(2,), block_depth=2)
        net = zero_net(cfg)
        frames = RNG.random(size=(6, 8, 8))
        out = rollout_frames(net, frames, 5)
        assert out.shape == (5, 8, 8)
        assert not out.any()
