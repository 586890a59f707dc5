import json

import numpy as np
import pytest

from conftest import randomize_bn
from masksparsity.mask import ChannelMask, MaskError, uniform_mask
from masksparsity.model import build_plain_cnn, flops_count, forward, param_count
from masksparsity.prune import PruneReport, apply_surgery, equivalence_check, report, zeroed_reference


def zeros_mask(graph):
    return ChannelMask({n: np.zeros(c) for n, c in graph.channel_counts().items()})


def random_mask(graph, rng):
    m = uniform_mask(graph, 0.0, resolve=False)
    for name, v in m.layers.items():
        v[:] = rng.random(v.size) < 0.4
        if v.all():
            v[0] = 0
    from masksparsity.mask import resolve_constraints
    return resolve_constraints(m, graph)


class TestSurgery:
    def test_zero_mask_is_noop(self, resnet8, rng):
        randomize_bn(resnet8, rng)
        pruned = apply_surgery(resnet8, zeros_mask(resnet8))
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        assert pruned.topology() == resnet8.topology()
        np.testing.assert_array_equal(forward(pruned, x), forward(resnet8, x))

    def test_two_conv_shapes_and_flops(self):
        g = build_plain_cnn([2, 3], num_classes=2, in_channels=1)
        m = ChannelMask({"bn1": [0, 1], "bn2": [0, 0, 0]})
        p = apply_surgery(g, m)
        assert p.weights["conv1.weight"].shape == (1, 1, 3, 3)
        assert p.weights["conv2.weight"].shape == (3, 1, 3, 3)
        np.testing.assert_array_equal(p.weights["conv2.weight"], g.weights["conv2.weight"][:, [0]])
        assert flops_count(p, (8, 8)) == 9 * 1 * 1 * 64 + 9 * 1 * 3 * 16 + 3 * 2

    def test_linear_input_sliced(self):
        g = build_plain_cnn([4], num_classes=2, in_channels=1)
        p = apply_surgery(g, ChannelMask({"bn1": [1, 0, 1, 0]}))
        np.testing.assert_array_equal(p.weights["fc.weight"], g.weights["fc.weight"][:, [1, 3]])

    def test_running_stats_carried(self, plain, rng):
        randomize_bn(plain, rng)
        p = apply_surgery(plain, ChannelMask({"bn1": [0, 1, 0, 1], "bn2": np.zeros(6)}))
        np.testing.assert_array_equal(p.bn["bn1"].running_var, plain.bn["bn1"].running_var[[0, 2]])

    def test_bad_mask_leaves_no_output(self, resnet8):
        layers = {n: np.zeros(c) for n, c in resnet8.channel_counts().items()}
        layers["stem.bn"][0] = 1
        with pytest.raises(MaskError):
            apply_surgery(resnet8, ChannelMask(layers))

    def test_source_untouched(self, resnet8, rng):
        before = {k: v.copy() for k, v in resnet8.parameters().items()}
        apply_surgery(resnet8, random_mask(resnet8, rng))
        assert all(np.array_equal(before[k], v) for k, v in resnet8.parameters().items())


class TestEquivalence:
    def test_zero_mask_exact(self, resnet8, rng):
        randomize_bn(resnet8, rng)
        x = rng.standard_normal((3, 3, 8, 8)).astype(np.float32)
        assert equivalence_check(resnet8, zeros_mask(resnet8), x) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_random_masks(self, seed):
        rng = np.random.default_rng(seed)
        from masksparsity.model import build_resnet_cifar
        g = randomize_bn(build_resnet_cifar(1, 5, 3, base_width=4, seed=seed), rng)
        x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
        assert equivalence_check(g, random_mask(g, rng), x) < 1e-5

    def test_leaving_beta_shows_difference(self, plain, rng):
        randomize_bn(plain, rng)
        plain.bn["bn1"].beta[1] = 2.0
        m = ChannelMask({"bn1": [0, 1, 0, 0], "bn2": np.zeros(6)})
        x = rng.standard_normal((3, 2, 8, 8)).astype(np.float32)
        assert equivalence_check(plain, m, x, zero_beta=False) > 1e-3

    def test_zeroed_reference_only_touches_masked(self, plain, rng):
        randomize_bn(plain, rng)
        ref = zeroed_reference(plain, ChannelMask({"bn1": [0, 1, 0, 0], "bn2": np.zeros(6)}))
        assert ref.bn["bn1"].gamma[1] == 0 and ref.bn["bn1"].beta[1] == 0
        np.testing.assert_array_equal(ref.bn["bn2"].gamma, plain.bn["bn2"].gamma)


class TestReport:
    def test_noop(self, resnet8):
        r = report(resnet8, resnet8, (8, 8))
        assert r.flops_reduction == 0 and r.to_dict()["flops_reduction_pct"] == "0.00"

    def test_halving_single_conv_model(self):
        from test_model import single_conv
        g = single_conv(cin=4, cout=8)
        p = apply_surgery(g, ChannelMask({"b": [0, 1] * 4}))
        conv = lambda m: m.weights["c.weight"].size * 32 * 32  # noqa: E731
        assert conv(p) * 2 == conv(g)

    def test_halving_every_channel_of_a_conv_quarters_it(self):
        g = build_plain_cnn([4, 4], num_classes=2, in_channels=1)
        m = ChannelMask({"bn1": [0, 1, 0, 1], "bn2": [0, 1, 0, 1]})
        from masksparsity.model import layer_flops
        before, after = layer_flops(g, (8, 8)), layer_flops(apply_surgery(g, m), (8, 8))
        assert after["conv2"] * 4 == before["conv2"]

    def test_two_decimal_strings(self):
        r = PruneReport(10000, 4512, 100, 50, {})
        assert r.to_dict()["flops_reduction_pct"] == "54.88"
        assert r.summary().count("54.88") == 1

    def test_growth_rejected(self):
        with pytest.raises(ValueError):
            PruneReport(1, 2, 1, 1, {})

    def test_per_layer_and_json(self, resnet8, rng):
        m = random_mask(resnet8, rng)
        r = report(resnet8, apply_surgery(resnet8, m), (8, 8))
        doc = json.loads(json.dumps(r.to_dict()))
        kept = {e["layer"]: e["kept"] for e in doc["per_layer"]}
        assert kept == {n: int((v == 0).sum()) for n, v in m.layers.items()}
        assert r.params_after == param_count(apply_surgery(resnet8, m))
