import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate2d

from sadcnn.network import (CKPT_MAGIC, CheckpointError, CombinedLossProbe, NetworkSpec,
                            StructureAwareNet, SubnetSpec, build_baseline_dcnn, build_subnet,
                            checkpoint_bytes, combined_loss, gradient_checks, load_checkpoint,
                            parse_checkpoint, save_checkpoint)
from sadcnn.tensor import Conv2d, ReLU, finite_difference_check


def count_params(depth, cin, m, k=5):
    # counted layer by layer from the channel plan, independent of SubnetSpec
    total = cin * m * k * k + m
    total += (depth - 2) * (m * m * k * k + m)
    total += m * k * k + 1
    return total


def oracle_subnet(x, subnet):
    """Evaluate a conv/ReLU stack with scipy's 2-D correlation, one image at a time."""
    convs = [layer for layer in subnet if isinstance(layer, Conv2d)]
    out = []
    for img in x.astype(np.float64):
        a = img
        for idx, conv in enumerate(convs):
            w, b = conv.params.weights.astype(np.float64), conv.params.bias.astype(np.float64)
            nxt = np.stack([b[o] + sum(correlate2d(a[c], w[o, c], mode="same") for c in range(a.shape[0]))
                            for o in range(w.shape[0])])
            a = np.maximum(nxt, 0) if idx < len(convs) - 1 else nxt
        out.append(a)
    return np.stack(out)


class TestCounts:
    def test_default_irs(self):
        assert NetworkSpec().irs.n_params == 1_437_761 == count_params(16, 1, 64)

    def test_baseline_depth_17(self):
        assert NetworkSpec(0, 0, 17).n_params == 1_540_225 == count_params(17, 1, 64)
        assert build_baseline_dcnn(17).n_params == 1_540_225

    def test_default_full_network(self):
        spec = NetworkSpec()
        expected = count_params(16, 1, 64) + count_params(6, 1, 64) + count_params(16, 3, 64)
        assert spec.n_params == expected
        assert StructureAwareNet.build(spec).n_params == expected

    def test_irs_layer_plan(self):
        plan = NetworkSpec().irs.channel_plan()
        assert len(plan) == 16
        assert plan[0] == (1, 64) and plan[-1] == (64, 1)
        assert plan[1:-1] == [(64, 64)] * 14

    def test_depth_two(self):
        net = build_subnet(SubnetSpec(2, 1, 8), 0)
        kinds = [type(layer) for layer in net]
        assert kinds == [Conv2d, ReLU, Conv2d]

    @pytest.mark.parametrize("kwargs", [dict(p=0, q=3), dict(p=1, q=3), dict(r=1), dict(k=4)])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(ValueError):
            NetworkSpec(**kwargs)


class TestForward:
    def test_shapes(self, rng):
        net = StructureAwareNet.build(NetworkSpec(3, 3, 3, 8))
        outs = net.forward(rng.random((1, 1, 32, 32)).astype(np.float32))
        assert [o.shape for o in outs] == [(1, 1, 32, 32)] * 3

    @settings(max_examples=8, deadline=None)
    @given(p=st.integers(2, 4), q=st.integers(2, 3), r=st.integers(2, 4), h=st.integers(5, 20),
           w=st.integers(5, 20))
    def test_shape_preserved_any_spec(self, p, q, r, h, w):
        net = StructureAwareNet.build(NetworkSpec(p, q, r, 4, 3))
        outs = net.forward(np.zeros((2, 1, h, w), np.float32))
        assert all(o.shape == (2, 1, h, w) for o in outs)

    def test_zero_network(self):
        net = StructureAwareNet.build(NetworkSpec(2, 2, 2, 4))
        for p in net.parameters():
            p.weights[...] = 0
        outs = net.forward(np.random.default_rng(0).random((1, 1, 16, 16)).astype(np.float32))
        assert all(not o.any() for o in outs)

    def test_matches_definitional_oracle(self, rng):
        net = StructureAwareNet.build(NetworkSpec(3, 2, 3, 6), seed=4)
        for p in net.parameters():
            p.bias[:] = rng.normal(scale=0.1, size=p.bias.shape)
        x = (rng.random((2, 1, 12, 10)) < 0.5).astype(np.float32)
        initial, smap, final = net.forward(x)
        o_init = oracle_subnet(x, net.irs)
        o_smap = oracle_subnet(o_init, net.ismp)
        o_final = oracle_subnet(np.concatenate([x, o_init, o_smap], axis=1), net.rs)
        for got, want in ((initial, o_init), (smap, o_smap), (final, o_final)):
            assert np.abs(got - want).max() <= 1e-5 * max(np.abs(want).max(), 1.0)

    def test_deterministic(self, rng):
        x = rng.random((2, 1, 16, 16)).astype(np.float32)
        a = StructureAwareNet.build(NetworkSpec(3, 3, 3, 8), seed=1).forward(x)
        b = StructureAwareNet.build(NetworkSpec(3, 3, 3, 8), seed=1).forward(x)
        assert all(np.array_equal(u, v) for u, v in zip(a, b))

    def test_bad_input_shape(self):
        net = StructureAwareNet.build(NetworkSpec(2, 2, 2, 4))
        with pytest.raises(ValueError, match=r"\(N, 1, H, W\)"):
            net.forward(np.zeros((1, 2, 8, 8), np.float32))


class TestBaseline:
    def test_same_seed_same_weights(self):
        a, b = build_baseline_dcnn(4, 8, seed=3), build_baseline_dcnn(4, 8, seed=3)
        assert all(np.array_equal(p.weights, q.weights) for p, q in zip(a.parameters(), b.parameters()))

    def test_depth_two_layers(self):
        assert [type(layer) for layer in build_baseline_dcnn(2, 8).rs] == [Conv2d, ReLU, Conv2d]

    def test_equals_plain_sequential_stack(self, rng):
        net = build_baseline_dcnn(5, 8, seed=9)
        plain = build_subnet(SubnetSpec(5, 1, 8), np.random.default_rng([9, 2]))
        x = rng.random((2, 1, 16, 16)).astype(np.float32)
        assert net.n_params == sum(p.size for p in plain.parameters())
        assert np.array_equal(net.forward(x)[2], plain.forward(x))
        assert net.forward(x)[:2] == (None, None)

    def test_rs_of_full_net_reads_three_channels(self):
        net = StructureAwareNet.build(NetworkSpec(2, 2, 4, 8))
        assert net.rs.layers[0].params.in_channels == 3
        assert build_baseline_dcnn(4, 8).rs.layers[0].params.in_channels == 1


class TestBackward:
    def test_zero_loss_gradient(self, rng):
        net = StructureAwareNet.build(NetworkSpec(2, 2, 2, 4), dtype=np.float64)
        x = rng.random((1, 1, 8, 8))
        net.forward(x)
        net.backward(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))
        assert all(not p.weight_grad.any() and not p.bias_grad.any() for p in net.parameters())

    @pytest.mark.parametrize("lam", [1.0, 0.0, 0.3])
    def test_full_graph_finite_differences(self, lam, rng):
        net = StructureAwareNet.build(NetworkSpec(2, 2, 2, 4), seed=2, dtype=np.float64)
        probe = CombinedLossProbe(net, rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8)), lam)
        x = (rng.random((2, 1, 8, 8)) < 0.5).astype(np.float64)
        assert finite_difference_check(probe, x, samples=24) < 1e-4

    def test_baseline_finite_differences(self, rng):
        net = StructureAwareNet.build(NetworkSpec(0, 0, 3, 4), seed=2, dtype=np.float64)
        probe = CombinedLossProbe(net, rng.random((1, 1, 8, 8)), rng.random((1, 1, 8, 8)))
        assert finite_difference_check(probe, rng.random((1, 1, 8, 8))) < 1e-4

    def test_irs_and_ismp_get_gradient_with_lambda_zero(self, rng):
        net = StructureAwareNet.build(NetworkSpec(3, 3, 3, 8), seed=5, dtype=np.float64)
        x = (rng.random((2, 1, 16, 16)) < 0.5).astype(np.float64)
        rs_loss, ismp_loss, total = combined_loss(net, x, rng.random(x.shape), rng.random(x.shape), 0.0)
        assert total == rs_loss and ismp_loss > 0
        for sub in (net.irs, net.ismp):
            assert sum(float(np.abs(p.weight_grad).sum()) for p in sub.parameters()) > 0

    def test_freeze_irs_leaves_irs_grads_zero(self, rng):
        net = StructureAwareNet.build(NetworkSpec(2, 2, 2, 4), seed=5)
        x = (rng.random((1, 1, 8, 8)) < 0.5).astype(np.float32)
        combined_loss(net, x, rng.random(x.shape), rng.random(x.shape), freeze_irs=True)
        assert all(not p.weight_grad.any() for p in net.irs.parameters())
        assert any(p.weight_grad.any() for p in net.ismp.parameters())

    def test_gradient_check_suite(self):
        results = dict(gradient_checks(full=True))
        assert "full-network" in results
        assert max(results.values()) < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        net = StructureAwareNet.build(NetworkSpec(3, 2, 3, 8), seed=8)
        path = tmp_path / "a.ckpt"
        save_checkpoint(net, path, stage=0, step=123, seed=8)
        ck = load_checkpoint(path)
        assert (ck.stage, ck.step, ck.seed, ck.spec) == (0, 123, 8, net.spec)
        for p, q in zip(net.parameters(), ck.net.parameters()):
            assert np.array_equal(p.weights, q.weights) and np.array_equal(p.bias, q.bias)
        assert checkpoint_bytes(ck.net, 0, 123, 8) == path.read_bytes()

    def test_baseline_round_trip(self, tmp_path):
        net = build_baseline_dcnn(3, 4, seed=1)
        save_checkpoint(net, tmp_path / "b.ckpt")
        ck = load_checkpoint(tmp_path / "b.ckpt")
        assert ck.spec.is_baseline and ck.net.irs is None

    def test_header_layout(self):
        data = checkpoint_bytes(StructureAwareNet.build(NetworkSpec(2, 2, 2, 4)), 1, 7, 3)
        assert data[:8] == CKPT_MAGIC
        assert np.frombuffer(data[8:40], "<u4").tolist() == [1, 2, 2, 2, 4, 5, 1, 0]

    @pytest.mark.parametrize("cut", [3, 20, 60, 500, -5])
    def test_truncated(self, cut):
        data = checkpoint_bytes(StructureAwareNet.build(NetworkSpec(2, 2, 2, 4)))
        with pytest.raises(CheckpointError, match="offset"):
            parse_checkpoint(data[:cut])

    def test_corrupted_payload(self):
        data = bytearray(checkpoint_bytes(StructureAwareNet.build(NetworkSpec(2, 2, 2, 4))))
        data[100] ^= 1
        with pytest.raises(CheckpointError, match="CRC32"):
            parse_checkpoint(bytes(data))

    def test_bad_magic(self):
        data = checkpoint_bytes(StructureAwareNet.build(NetworkSpec(2, 2, 2, 4)))
        with pytest.raises(CheckpointError, match="magic"):
            parse_checkpoint(b"XXXXXXXX" + data[8:])

    def test_spec_mismatch(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(StructureAwareNet.build(NetworkSpec(2, 2, 2, 4)), path)
        assert load_checkpoint(path, NetworkSpec(2, 2, 2, 4)).spec == NetworkSpec(2, 2, 2, 4)
        with pytest.raises(CheckpointError, match="expected NetworkSpec"):
            load_checkpoint(path, NetworkSpec(2, 2, 3, 4))
