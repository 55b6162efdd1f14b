import numpy as np
import pytest

from siplab.nets import (WAVEPACKET_T0_HIGH, WAVEPACKET_T0_LOW, build_mlp, build_unet,
                         build_wavepacket_net)
from siplab.tensor import grad

from conftest import numeric_grad, rel_err


def unet_count_oracle(levels, f, cin, cout):
    """Parameter count of the documented layout, summed block by block."""
    conv = lambda a, b, k=3: a * b * k * k + b
    bn = lambda c: 2 * c
    double = lambda a, m, b: conv(a, m) + bn(m) + conv(m, b) + bn(b)
    return (double(cin, f, f) + (levels - 1) * double(f, f, f)
            + (levels - 1) * double(2 * f, f, f) + conv(f, cout, 1))


class TestMLP:
    def test_param_count(self):
        assert build_mlp([2, 32, 64, 32, 2]).param_count == 4354

    def test_zero_weights_give_zero(self):
        net = build_mlp([1, 16, 64, 16, 1], "sigmoid")
        net.theta[:] = 0.0
        assert np.all(net.forward(np.zeros((3, 1))).data == 0.0)

    def test_identity_layer(self, rng):
        net = build_mlp([3, 3])
        net.view("fc0.w")[...] = np.eye(3)
        net.view("fc0.b")[...] = 0.0
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(net.forward(x).data, x)

    def test_empty_sizes_rejected(self):
        with pytest.raises(ValueError):
            build_mlp([])

    def test_wrong_input_width(self):
        with pytest.raises(ValueError, match="input"):
            build_mlp([2, 4, 1]).forward(np.zeros((3, 3)))

    def test_views_share_theta(self):
        net = build_mlp([2, 4, 1])
        net.theta[:] = 0.0
        net.view("fc1.b")[...] = 7.0
        assert net.theta[-1] == 7.0

    def test_gradient_matches_finite_differences(self, rng):
        net = build_mlp([2, 5, 3, 1], "sigmoid", seed=3)
        x = rng.normal(size=(4, 2))
        out, leaves = net.forward_with_leaves(x)
        g = net.flatten(grad((out * out).sum(), leaves))
        theta0 = net.theta.copy()

        def f(th):
            net.theta[:] = th
            return float((net.forward(x).data ** 2).sum())

        num = numeric_grad(f, theta0)
        net.theta[:] = theta0
        assert rel_err(g, num) < 1e-6


class TestUNet:
    @pytest.mark.parametrize("levels,cin,cout,expected", [(4, 1, 1, 37697), (5, 2, 2, 49570)])
    def test_reference_counts(self, levels, cin, cout, expected):
        assert build_unet(levels, 16, cin, cout).param_count == expected

    @pytest.mark.parametrize("levels,cin,cout", [(1, 1, 1), (2, 3, 1), (3, 1, 4), (4, 2, 2)])
    def test_count_matches_recipe(self, levels, cin, cout):
        assert build_unet(levels, 16, cin, cout).param_count == unet_count_oracle(levels, 16, cin, cout)

    def test_batch_norm_stats_not_counted(self):
        net = build_unet(4, 16, 1, 1)
        assert net.param_count == net.theta.size
        assert len(net.buffers) > 0

    @pytest.mark.parametrize("shape", [(2, 1, 8, 8), (1, 1, 16, 24), (3, 1, 32, 32)])
    def test_output_shape(self, rng, shape):
        net = build_unet(4, 16, 1, 1)
        assert net.forward(rng.normal(size=shape), "train").shape == shape

    def test_zero_head_gives_zero(self):
        net = build_unet(4, 16, 1, 1)
        net.view("outc.w")[...] = 0.0
        assert np.all(net.forward(np.zeros((1, 1, 16, 16)), "eval").data == 0.0)

    def test_indivisible_extent_rejected(self):
        with pytest.raises(ValueError, match="divisible by 8"):
            build_unet(4).forward(np.zeros((1, 1, 12, 16)))

    def test_eval_is_pure(self, rng):
        net = build_unet(3, 16, 1, 1, seed=1)
        x = rng.normal(size=(2, 1, 8, 8))
        net.forward(x, "train")
        bufs = {k: v.copy() for k, v in net.buffers.items()}
        a = net.forward(x, "eval").data
        b = net.forward(x, "eval").data
        np.testing.assert_array_equal(a, b)
        for k in bufs:
            np.testing.assert_array_equal(bufs[k], net.buffers[k])

    def test_running_stats_move_toward_batch_stats(self, rng):
        net = build_unet(2, 16, 1, 1)
        x = rng.normal(2.0, 3.0, size=(4, 1, 8, 8))
        seen = [net.buffers["inc.bn1.mean"].copy()]
        for _ in range(4):
            net.forward(x, "train")
            seen.append(net.buffers["inc.bn1.mean"].copy())
        # theta is fixed, so every pass sees the same batch mean: r_n = (1 - 0.9^n) * mean
        batch_mean = seen[1] / 0.1
        for n, r in enumerate(seen):
            np.testing.assert_allclose(r, batch_mean * (1 - 0.9 ** n), rtol=1e-12, atol=1e-15)
        gaps = [np.abs(r - batch_mean).max() for r in seen]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))

    def test_gradient_matches_finite_differences(self, rng):
        net = build_unet(2, 4, 1, 1, seed=2)
        x = rng.normal(size=(2, 1, 4, 4))
        up = rng.normal(size=(2, 1, 4, 4))
        out, leaves = net.forward_with_leaves(x, "train")
        g = net.flatten(grad((out * up).sum(), leaves))
        theta0 = net.theta.copy()
        idx = rng.choice(theta0.size, 40, replace=False)

        def f(th):
            net.theta[:] = th
            return float((net.forward(x, "train").data * up).sum())

        for i in idx:
            e = np.zeros_like(theta0)
            e[i] = 1e-5
            num = (f(theta0 + e) - f(theta0 - e)) / 2e-5
            assert abs(num - g[i]) <= 1e-5 * max(abs(g[i]), 1e-2 * np.abs(g).max())
        net.theta[:] = theta0

    def test_checkpoint_round_trip(self, tmp_path, rng):
        net = build_unet(3, 16, 1, 1, seed=5)
        net.forward(rng.normal(size=(2, 1, 8, 8)), "train")
        path = tmp_path / "net.sipg"
        net.save(path)
        other = build_unet(3, 16, 1, 1, seed=9).load(path)
        assert other.theta.tobytes() == net.theta.tobytes()
        for k in net.buffers:
            assert other.buffers[k].tobytes() == net.buffers[k].tobytes()

    def test_checkpoint_architecture_mismatch(self, tmp_path):
        path = tmp_path / "net.sipg"
        build_unet(3).save(path)
        with pytest.raises(ValueError):
            build_unet(4).load(path)


class TestWavePacketNet:
    def test_param_count_from_recipe(self):
        conv = lambda a, b: a * b * 3 + b
        dense = lambda a, b: a * b + b
        expected = conv(1, 16) + conv(16, 16) + 4 * (2 * conv(16, 16)) + dense(128, 64) + dense(64, 32) + dense(32, 1)
        assert build_wavepacket_net().param_count == expected == 17489

    def test_zero_weights_give_midpoint(self):
        net = build_wavepacket_net()
        net.theta[:] = 0.0
        out = net.forward(np.zeros((2, 256))).data
        np.testing.assert_allclose(out, 0.5 * (WAVEPACKET_T0_LOW + WAVEPACKET_T0_HIGH))
        assert out[0, 0] == pytest.approx(76.8)

    @pytest.mark.parametrize("scale", [0.0, 1.0, 100.0])
    def test_head_range(self, rng, scale):
        net = build_wavepacket_net(seed=4)
        out = net.forward(scale * rng.normal(size=(8, 256))).data
        assert np.all(out >= WAVEPACKET_T0_LOW) and np.all(out < WAVEPACKET_T0_HIGH)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError, match="256"):
            build_wavepacket_net().forward(np.zeros((1, 200)))

    def test_gradient_matches_finite_differences(self, rng):
        net = build_wavepacket_net(seed=6)
        x = rng.normal(size=(2, 256))
        out, leaves = net.forward_with_leaves(x)
        g = net.flatten(grad(out.sum(), leaves))
        theta0 = net.theta.copy()
        for i in rng.choice(theta0.size, 25, replace=False):
            e = np.zeros_like(theta0)
            e[i] = 1e-5
            net.theta[:] = theta0 + e
            fp = net.forward(x).data.sum()
            net.theta[:] = theta0 - e
            fm = net.forward(x).data.sum()
            num = (fp - fm) / 2e-5
            assert abs(num - g[i]) <= 1e-5 * max(abs(g[i]), 1e-2 * np.abs(g).max())
        net.theta[:] = theta0


class TestInit:
    @pytest.mark.parametrize("scheme,bound", [
        ("kaiming", lambda s: np.sqrt(6.0 / s.fan_in)),
        ("fan-in", lambda s: 1.0 / np.sqrt(s.fan_in)),
        ("xavier", lambda s: np.sqrt(6.0 / (s.fan_in + s.fan_out))),
    ])
    def test_weight_bounds(self, scheme, bound):
        net = build_mlp([30, 200, 40], seed=0).init(1, scheme)
        for s in net.specs:
            if s.kind == "weight":
                w = net.view(s.name)
                assert np.abs(w).max() <= bound(s)
                # uniform draws fill most of the range
                assert np.abs(w).max() > 0.95 * bound(s)

    def test_fan_in_draws_biases(self):
        net = build_mlp([30, 200, 40], seed=0).init(1, "fan-in")
        b = net.view("fc0.b")
        assert 0 < np.abs(b).max() <= 1 / np.sqrt(30)

    def test_other_schemes_zero_biases(self):
        net = build_mlp([3, 5, 2], seed=0).init(1, "kaiming")
        assert not net.view("fc0.b").any() and not net.view("fc1.b").any()

    def test_relu_mlp_default_is_fan_in(self):
        a = build_mlp([3, 5, 2], seed=4)
        b = build_mlp([3, 5, 2], seed=0).init(4, "fan-in")
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_seeded(self):
        a = build_unet(4, 16, 1, 1, seed=3)
        b = build_unet(4, 16, 1, 1, seed=3)
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError, match="init scheme"):
            build_mlp([2, 2]).init(0, "orthogonal")
