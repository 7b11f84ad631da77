"""Graph execution, losses, optimizer, LR schedule and gradient checking."""

import math

import numpy as np
import pytest
from oracles import numeric_grad

from contextnet import ops
from contextnet.autodiff import (OptimizerState, backward, contextnet_loss,
                                 cross_entropy, forward, grad_check, poly_lr,
                                 rmsprop_step)
from contextnet.data import downsample_labels
from contextnet.errors import GraphError, NumericsError, ShapeError
from contextnet.graphdef import GraphBuilder, init_params


def chain_graph():
    gb = GraphBuilder((6, 8, 3))
    out = gb.conv("c1", "input", 4, k=3, stride=2, bias=True)
    out = gb.relu6("r1", out)
    out = gb.conv("c2", out, 2, k=1, bias=True)
    return gb.build({"out": out})


class TestForward:
    def test_values_for_every_layer(self):
        g = chain_graph()
        p = init_params(g, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((2, 6, 8, 3)).astype(np.float32)
        tape = forward(g, p, x)
        assert set(tape.values) == {l.name for l in g.layers}
        assert tape.values["c2"].shape == (2, 3, 4, 2)

    def test_input_shape_checked(self):
        g = chain_graph()
        p = init_params(g, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            forward(g, p, np.zeros((2, 6, 8, 4), np.float32))
        with pytest.raises(ShapeError):
            forward(g, p, np.zeros((6, 8, 3), np.float32))

    def test_deterministic_inference(self):
        g = chain_graph()
        p = init_params(g, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((1, 6, 8, 3)).astype(np.float32)
        a = forward(g, p, x).values["c2"]
        b = forward(g, p, x).values["c2"]
        np.testing.assert_array_equal(a, b)

    def test_zero_layers_ablation(self):
        g = chain_graph()
        p = init_params(g, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((1, 6, 8, 3)).astype(np.float32)
        tape = forward(g, p, x, zero_layers=("c1",))
        assert np.all(tape.values["c1"] == 0.0)
        # downstream of the zeroed layer only the c2 bias survives
        manual = ops.conv2d(
            ops.relu6(np.zeros_like(tape.values["c1"])),
            ops.ConvParams(p["c2.kernel"], p["c2.bias"]))
        np.testing.assert_allclose(tape.values["c2"], manual, atol=1e-7)

    def test_dropout_needs_rng_in_training(self):
        gb = GraphBuilder((4, 4, 2))
        out = gb.dropout("d", "input", 0.5)
        g = gb.build({"out": out})
        x = np.ones((1, 4, 4, 2), np.float32)
        with pytest.raises(GraphError, match="random generator"):
            forward(g, {}, x, training=True)
        tape = forward(g, {}, x, training=True, rng=np.random.default_rng(0))
        vals = np.unique(tape.values["d"])
        assert all(v == 0.0 or abs(v - 2.0) < 1e-6 for v in vals)

    def test_backward_rejects_unknown_output(self):
        g = chain_graph()
        p = init_params(g, np.random.default_rng(0))
        x = np.zeros((1, 6, 8, 3), np.float32)
        tape = forward(g, p, x)
        with pytest.raises(GraphError):
            backward(g, p, tape, {"nope": np.zeros((1, 3, 4, 2), np.float32)})


class TestCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        logits = np.zeros((1, 2, 2, 4), np.float32)
        labels = np.zeros((1, 2, 2), np.int32)
        loss, grad = cross_entropy(logits, labels)
        assert abs(loss - math.log(4)) < 1e-7
        # gradient: (softmax - onehot)/n = (0.25 - onehot)/4
        assert abs(grad[0, 0, 0, 0] - (0.25 - 1.0) / 4) < 1e-7
        assert abs(grad[0, 0, 0, 1] - 0.25 / 4) < 1e-7

    def test_confident_correct_is_near_zero(self):
        logits = np.zeros((1, 1, 1, 3), np.float32)
        logits[0, 0, 0, 1] = 50.0
        labels = np.ones((1, 1, 1), np.int32)
        loss, _ = cross_entropy(logits, labels)
        assert loss < 1e-6

    def test_void_pixels_are_excluded(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((1, 2, 3, 5)).astype(np.float32)
        labels = rng.integers(0, 5, (1, 2, 3)).astype(np.int32)
        full, _ = cross_entropy(logits, labels)
        labels2 = labels.copy()
        labels2[0, 0, 0] = 255
        part, grad = cross_entropy(logits, labels2)
        # recompute over the 5 remaining pixels by brute force
        acc = []
        for i in range(2):
            for j in range(3):
                if labels2[0, i, j] == 255:
                    continue
                z = logits[0, i, j].astype(np.float64)
                acc.append(-(z[labels2[0, i, j]] - np.log(np.exp(z).sum())))
        assert abs(part - np.mean(acc)) < 1e-6
        assert np.all(grad[0, 0, 0] == 0.0)
        assert full != part

    def test_all_void_is_zero(self):
        logits = np.ones((1, 2, 2, 3), np.float32)
        labels = np.full((1, 2, 2), 255, np.int32)
        loss, grad = cross_entropy(logits, labels)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_label_out_of_range(self):
        logits = np.zeros((1, 1, 1, 3), np.float32)
        with pytest.raises(ShapeError):
            cross_entropy(logits, np.full((1, 1, 1), 7, np.int32))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((1, 2, 2, 3))
        labels = rng.integers(0, 3, (1, 2, 2)).astype(np.int32)
        labels[0, 1, 1] = 255
        _, grad = cross_entropy(logits, labels)
        num = numeric_grad(lambda: cross_entropy(logits, labels)[0], logits)
        assert np.max(np.abs(grad - num)) < 1e-8


class TestCombinedLoss:
    def test_total_is_weighted_sum(self):
        rng = np.random.default_rng(4)
        final = rng.standard_normal((2, 8, 8, 3)).astype(np.float32)
        aux = rng.standard_normal((2, 2, 2, 3)).astype(np.float32)
        labels = rng.integers(0, 3, (2, 8, 8)).astype(np.int32)
        total, g_final, g_aux = contextnet_loss(final, aux, labels,
                                                aux_weight=0.4)
        lf, gf = cross_entropy(final, labels)
        la, ga = cross_entropy(aux, downsample_labels(labels, 4))
        assert abs(total - (lf + 0.4 * la)) < 1e-6
        np.testing.assert_allclose(g_final, gf)
        np.testing.assert_allclose(g_aux, 0.4 * ga, rtol=1e-6)

    def test_zero_weight_detaches_aux(self):
        rng = np.random.default_rng(5)
        final = rng.standard_normal((1, 4, 4, 3)).astype(np.float32)
        aux = rng.standard_normal((1, 2, 2, 3)).astype(np.float32)
        labels = rng.integers(0, 3, (1, 4, 4)).astype(np.int32)
        total, _, g_aux = contextnet_loss(final, aux, labels, aux_weight=0.0)
        assert total == cross_entropy(final, labels)[0]
        assert np.all(g_aux == 0.0)
        total2, _, g_none = contextnet_loss(final, None, labels)
        assert g_none is None and total2 == total

    def test_indivisible_aux_size_rejected(self):
        final = np.zeros((1, 6, 6, 3), np.float32)
        aux = np.zeros((1, 4, 4, 3), np.float32)
        labels = np.zeros((1, 6, 6), np.int32)
        with pytest.raises(ShapeError):
            contextnet_loss(final, aux, labels)


class TestOptimizer:
    def test_hand_recurrence_two_steps(self):
        params = {"w": np.array([1.0])}
        state = OptimizerState()
        rmsprop_step(params, {"w": np.array([1.0])}, state, lr=0.1)
        ms1 = 0.1 * 1.0
        mom1 = 0.1 * 1.0 / math.sqrt(ms1 + 1.0)
        w1 = 1.0 - mom1
        assert abs(params["w"][0] - w1) < 1e-12
        assert abs(state.ms["w"][0] - ms1) < 1e-12
        rmsprop_step(params, {"w": np.array([0.5])}, state, lr=0.05)
        ms2 = 0.9 * ms1 + 0.1 * 0.25
        mom2 = 0.9 * mom1 + 0.05 * 0.5 / math.sqrt(ms2 + 1.0)
        assert abs(params["w"][0] - (w1 - mom2)) < 1e-12

    def test_unseen_keys_left_alone(self):
        params = {"a": np.array([1.0]), "b": np.array([2.0])}
        rmsprop_step(params, {"a": np.array([1.0])}, OptimizerState(), 0.1)
        assert params["b"][0] == 2.0

    def test_non_finite_gradient_rejected(self):
        params = {"a": np.array([1.0])}
        with pytest.raises(NumericsError):
            rmsprop_step(params, {"a": np.array([np.nan])}, OptimizerState(), 0.1)

    def test_state_buffers_match_param_shapes(self):
        params = {"k": np.zeros((3, 3, 2, 4))}
        state = OptimizerState()
        rmsprop_step(params, {"k": np.ones((3, 3, 2, 4))}, state, 0.01)
        assert state.ms["k"].shape == (3, 3, 2, 4)
        assert state.mom["k"].shape == (3, 3, 2, 4)


class TestPolyLR:
    def test_endpoints_and_midpoint(self):
        assert poly_lr(0.045, 0, 1000) == 0.045
        assert poly_lr(0.045, 1000, 1000) == 0.0
        mid = poly_lr(0.045, 500, 1000)
        assert abs(mid - 0.045 * 0.5 ** 0.98) < 1e-15

    def test_clamped_outside_range(self):
        assert poly_lr(0.1, 2000, 1000) == 0.0
        assert poly_lr(0.1, -5, 1000) == 0.1

    def test_monotone_decreasing(self):
        vals = [poly_lr(0.045, i, 100) for i in range(101)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_bad_max_iter(self):
        with pytest.raises(ShapeError):
            poly_lr(0.1, 0, 0)


class TestGradCheck:
    """End-to-end reverse-mode vs central differences on small graphs.

    Toy graphs mirror the real network's convention that a convolution
    feeding batch norm carries no bias (such a bias has exactly zero
    gradient, which finite differences report as noise).
    """

    def check(self, build, seeds=range(5), tol=1e-3):
        worst = 0.0
        for seed in seeds:
            g = build()
            p = init_params(g, np.random.default_rng(seed))
            x = np.random.default_rng(seed + 100).standard_normal(
                (2,) + tuple(g.input_shape)).astype(np.float32)
            report = grad_check(g, p, x, seed=seed)
            worst = max(worst, report["max_rel_err"])
        assert worst < tol, f"worst relative error {worst:.3e}"
        return worst

    def test_conv_bias_chain(self):
        def build():
            gb = GraphBuilder((5, 6, 3))
            out = gb.conv("c1", "input", 4, k=3, stride=2, bias=True)
            out = gb.relu6("r1", out)
            out = gb.conv("c2", out, 2, k=1, bias=True)
            return gb.build({"out": out})
        self.check(build)

    def test_depthwise_dilated(self):
        def build():
            gb = GraphBuilder((6, 6, 3))
            out = gb.depthwise("d1", "input", k=3, dilation=2, bias=True)
            out = gb.relu6("r1", out)
            return gb.build({"out": out})
        self.check(build)

    def test_batch_norm_training_stats(self):
        def build():
            gb = GraphBuilder((5, 5, 2))
            out = gb.conv("c1", "input", 3, k=3)
            out = gb.batch_norm("bn1", out)
            out = gb.relu6("r1", out)
            out = gb.conv("c2", out, 2, k=1, bias=True)
            return gb.build({"out": out})
        self.check(build)

    def test_bottleneck_composite(self):
        def build():
            gb = GraphBuilder((6, 6, 2))
            out = gb.conv("expand", "input", 4, k=1)
            out = gb.batch_norm("expand_bn", out)
            out = gb.relu6("expand_relu", out)
            out = gb.depthwise("dw", out, k=3)
            out = gb.batch_norm("dw_bn", out)
            out = gb.relu6("dw_relu", out)
            out = gb.conv("project", out, 2, k=1)
            out = gb.batch_norm("project_bn", out)
            out = gb.add("res", "input", out)
            return gb.build({"out": out})
        self.check(build)

    def test_fusion_subgraph(self):
        def build():
            gb = GraphBuilder((8, 8, 2))
            low = gb.pool_down("pool", "input", 2)
            low = gb.conv("ctx_c", low, 3, k=3, stride=2)
            low = gb.batch_norm("ctx_bn", low)
            low = gb.relu6("ctx_r", low)
            up = gb.upsample("up", low, 4)
            up = gb.depthwise("f_dw", up, k=3, dilation=4)
            up = gb.batch_norm("f_dw_bn", up)
            up = gb.relu6("f_dw_r", up)
            up = gb.conv("f_ctx", up, 4, k=1)
            up = gb.batch_norm("f_ctx_bn", up)
            det = gb.conv("det_c", "input", 4, k=3, stride=1)
            det = gb.batch_norm("det_bn", det)
            fused = gb.add("f_add", up, det)
            fused = gb.relu6("f_r", fused)
            out = gb.conv("head", fused, 3, k=1, bias=True)
            out = gb.softmax("sm", out)
            return gb.build({"out": out})
        self.check(build)

    def test_dropout_path_is_deterministic_per_seed(self):
        def build():
            gb = GraphBuilder((4, 4, 3))
            out = gb.conv("c1", "input", 4, k=1, bias=True)
            out = gb.dropout("drop", out, 0.3)
            out = gb.conv("c2", out, 2, k=1, bias=True)
            return gb.build({"out": out})
        self.check(build)

    def test_input_gradient_also_checked(self):
        gb = GraphBuilder((4, 4, 2))
        out = gb.conv("c1", "input", 3, k=3, bias=True)
        g = gb.build({"out": out})
        p = init_params(g, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((1, 4, 4, 2)).astype(np.float32)
        report = grad_check(g, p, x)
        assert report["input"] < 1e-3
        assert set(report["per_param"]) == set(p)
