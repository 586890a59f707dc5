import numpy as np
import pytest

from masksparsity.compute import ShapeError, softmax_cross_entropy
from masksparsity.gradcheck import numeric_grad, rel_error
from masksparsity.model import (GraphError, LayerSpec, ModelGraph, backward, build_plain_cnn,
                                build_resnet_cifar, find_coupling_groups, flops_count, forward,
                                layer_flops, param_count, reinitialized)


def single_conv(cin=3, cout=16, seed=0):
    layers = [
        LayerSpec("conv", "c", (-1,), cin, cout, 3, 1, 1),
        LayerSpec("bn", "b", (0,)),
        LayerSpec("avgpool", "p", (1,)),
        LayerSpec("linear", "fc", (2,), cout, 2),
    ]
    from masksparsity.compute import BatchNormState
    rng = np.random.default_rng(seed)
    weights = {"c.weight": rng.standard_normal((cout, cin, 3, 3)).astype(np.float32),
               "fc.weight": np.zeros((2, cout), np.float32), "fc.bias": np.zeros(2, np.float32)}
    return ModelGraph(layers, weights, {"b": BatchNormState.create(cout)})


class TestCounting:
    def test_single_conv_macs(self):
        g = single_conv()
        assert layer_flops(g, (32, 32))["c"] == 442_368
        assert flops_count(g) == 442_368 + 16 * 2

    def test_plain_cnn_hand_sum(self):
        g = build_plain_cnn([16, 32], num_classes=10)
        conv1 = 3 * 3 * 3 * 16 * 32 * 32
        conv2 = 3 * 3 * 16 * 32 * 16 * 16  # width grows, stride 2
        assert flops_count(g, (32, 32)) == conv1 + conv2 + 32 * 10

    def test_halving_output_channels_halves_conv_macs(self):
        assert layer_flops(single_conv(cout=8), (32, 32))["c"] * 2 == layer_flops(single_conv(), (32, 32))["c"]

    def test_resnet56_totals(self):
        g = build_resnet_cifar(9)
        assert 123_500_000 <= flops_count(g) <= 128_500_000
        assert 845_000 <= param_count(g) <= 861_000

    def test_resnet8_depth(self):
        g = build_resnet_cifar(1)
        weighted = [l for l in g.layers if l.kind in ("conv", "linear") and "proj" not in l.name]
        assert len(weighted) == 8

    def test_param_count_includes_bn(self):
        g = build_plain_cnn([8], num_classes=2, in_channels=1)
        assert param_count(g) == 8 * 1 * 9 + 2 * 8 + 2 * 8 + 2


class TestStructure:
    def test_single_width_has_one_conv_bn(self):
        kinds = [l.kind for l in build_plain_cnn([8]).layers]
        assert kinds.count("conv") == 1 and kinds.count("bn") == 1

    def test_empty_widths_rejected(self):
        with pytest.raises(ValueError):
            build_plain_cnn([])

    def test_resnet8_coupling(self):
        groups = sorted(sorted(g) for g in build_resnet_cifar(1).coupling_groups)
        assert groups == [["s1.b0.bn2", "stem.bn"], ["s2.b0.bn2", "s2.b0.proj_bn"],
                          ["s3.b0.bn2", "s3.b0.proj_bn"]]

    def test_resnet56_groups(self):
        groups = find_coupling_groups(build_resnet_cifar(9))
        assert sorted(len(g) for g in groups) == [10, 10, 10]

    def test_plain_has_no_groups(self, plain):
        assert plain.coupling_groups == []

    def test_conv_without_bn_rejected(self):
        layers = [LayerSpec("conv", "c", (-1,), 1, 2, 1, 1, 0), LayerSpec("relu", "r", (0,)),
                  LayerSpec("avgpool", "p", (1,)), LayerSpec("linear", "fc", (2,), 2, 2)]
        weights = {"c.weight": np.zeros((2, 1, 1, 1)), "fc.weight": np.zeros((2, 2)), "fc.bias": np.zeros(2)}
        with pytest.raises(GraphError):
            ModelGraph(layers, weights, {})

    def test_add_channel_mismatch_rejected(self):
        from masksparsity.compute import BatchNormState
        layers = [LayerSpec("conv", "c1", (-1,), 1, 2, 1, 1, 0), LayerSpec("bn", "b1", (0,)),
                  LayerSpec("conv", "c2", (-1,), 1, 3, 1, 1, 0), LayerSpec("bn", "b2", (2,)),
                  LayerSpec("add", "a", (1, 3)), LayerSpec("avgpool", "p", (4,)),
                  LayerSpec("linear", "fc", (5,), 2, 2)]
        weights = {"c1.weight": np.zeros((2, 1, 1, 1)), "c2.weight": np.zeros((3, 1, 1, 1)),
                   "fc.weight": np.zeros((2, 2)), "fc.bias": np.zeros(2)}
        bn = {"b1": BatchNormState.create(2), "b2": BatchNormState.create(3)}
        with pytest.raises(GraphError):
            ModelGraph(layers, weights, bn)

    def test_topology_round_trip(self, resnet8):
        layers = [LayerSpec.from_dict(d) for d in resnet8.topology()]
        assert [l.to_dict() for l in layers] == resnet8.topology()

    def test_fingerprint_tracks_topology_only(self, plain):
        assert plain.fingerprint() == reinitialized(plain, 99).fingerprint()
        assert plain.fingerprint() != build_plain_cnn([4, 7], 3, 2).fingerprint()

    def test_parameters_alias_bn_state(self, plain):
        plain.parameters()["bn1.gamma"][0] = 42.0
        assert plain.bn["bn1"].gamma[0] == 42.0

    def test_copy_is_deep(self, plain):
        c = plain.copy()
        c.bn["bn1"].gamma[:] = 0
        c.weights["conv1.weight"][:] = 0
        assert plain.bn["bn1"].gamma.all() and plain.weights["conv1.weight"].any()

    def test_init_conventions(self):
        g = build_resnet_cifar(1, base_width=16, seed=0)
        w = g.weights["s3.b0.conv2.weight"]
        fan_out = w.shape[0] * 9
        assert w.std() == pytest.approx(np.sqrt(2 / fan_out), rel=0.05)
        assert all((s.gamma == 1).all() and (s.beta == 0).all() for s in g.bn.values())

    def test_seeded_init(self):
        a, b = build_plain_cnn([4], seed=1), build_plain_cnn([4], seed=1)
        np.testing.assert_array_equal(a.weights["conv1.weight"], b.weights["conv1.weight"])


class TestExecution:
    def test_zero_gamma_stem_logits_are_biases(self):
        g = build_plain_cnn([4], num_classes=3)
        g.bn["bn1"].gamma[:] = 0
        g.weights["fc.bias"][:] = [0.1, -0.2, 0.3]
        out = forward(g, np.zeros((2, 3, 8, 8), np.float32))
        np.testing.assert_allclose(out, [[0.1, -0.2, 0.3]] * 2, atol=1e-7)

    def test_eval_is_deterministic(self, resnet8, rng):
        x = rng.standard_normal((3, 3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(forward(resnet8, x), forward(resnet8, x))

    def test_wrong_input_channels(self, plain):
        with pytest.raises(ShapeError):
            forward(plain, np.zeros((1, 3, 8, 8), np.float32))

    def test_backward_requires_training_forward(self, plain):
        forward(plain, np.zeros((2, 2, 4, 4), np.float32))
        with pytest.raises(RuntimeError):
            backward(plain, np.zeros((2, 3), np.float32))

    @pytest.mark.parametrize("builder", ["plain", "resnet"])
    def test_end_to_end_gradient(self, rng, builder):
        if builder == "plain":
            g = build_plain_cnn([3, 4], 3, 2, seed=2).astype(np.float64)
        else:
            g = build_resnet_cifar(1, 3, 2, base_width=2, seed=2).astype(np.float64)
        for s in g.bn.values():
            s.gamma[:] = rng.uniform(0.5, 1.5, s.gamma.size)
            s.beta[:] = rng.normal(0, 0.3, s.beta.size)
        x = rng.standard_normal((4, 2, 4, 4))
        y = rng.integers(0, 3, 4)
        _, gl = softmax_cross_entropy(forward(g, x, training=True), y)
        grads = backward(g, gl)
        f = lambda: softmax_cross_entropy(forward(g, x, training=True), y)[0]  # noqa: E731
        for name, p in g.parameters().items():
            assert rel_error(grads[name], numeric_grad(f, p)) < 1e-5, name

    def test_astype_float64(self, plain):
        g = plain.astype(np.float64)
        assert g.dtype == np.float64 and all(s.gamma.dtype == np.float64 for s in g.bn.values())
