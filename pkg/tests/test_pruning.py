"""Filter ranking, coupled keep-sets and structural pruning."""

import numpy as np
import pytest

from contextnet import autodiff
from contextnet.architecture import ContextNetConfig, build_contextnet, count_params
from contextnet.errors import ConfigError, GraphError
from contextnet.graphdef import GraphBuilder, init_params
from contextnet.pruning import (FilterRank, PruneSchedule, coupling_groups,
                                format_prune_report, progressive_prune,
                                prune_filters, rank_filters_l1)


def brute_force_rank(kernel):
    """Independent absolute-sum ranking with the lowest-index tie rule."""
    n = kernel.shape[3]
    norms = [float(np.abs(kernel[:, :, :, i]).sum()) for i in range(n)]
    order = sorted(range(n), key=lambda i: (norms[i], i))
    return norms, order


class TestRanking:
    def test_matches_brute_force_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            k = rng.standard_normal((3, 3, int(rng.integers(1, 5)),
                                     int(rng.integers(2, 9)))).astype(np.float32)
            rank = rank_filters_l1(k, "x")
            norms, order = brute_force_rank(k)
            np.testing.assert_allclose(rank.norms, norms, rtol=1e-6)
            assert rank.order.tolist() == order

    def test_tie_breaks_toward_lower_index(self):
        k = np.ones((1, 1, 1, 4), np.float32)
        k[0, 0, 0, 1] = -1.0  # same l1 norm as the others
        order = rank_filters_l1(k).order.tolist()
        assert order == [0, 1, 2, 3]

    def test_zero_filters_rank_first(self):
        rng = np.random.default_rng(1)
        k = rng.standard_normal((3, 3, 2, 5)).astype(np.float32) + 1.0
        k[:, :, :, 3] = 0.0
        k[:, :, :, 0] = 0.0
        order = rank_filters_l1(k).order.tolist()
        assert order[:2] == [0, 3]

    def test_scale_invariant_order(self):
        rng = np.random.default_rng(2)
        k = rng.standard_normal((3, 3, 4, 8)).astype(np.float32)
        base = rank_filters_l1(k).order
        for scale in (0.25, 3.0, 117.0):
            np.testing.assert_array_equal(rank_filters_l1(scale * k).order, base)

    def test_rejects_non_4d(self):
        with pytest.raises(GraphError):
            rank_filters_l1(np.zeros((3, 3, 4), np.float32))


class TestSchedule:
    def test_default_is_valid(self):
        PruneSchedule().validate()

    def test_must_strictly_decrease(self):
        with pytest.raises(ConfigError, match="decrease"):
            PruneSchedule(multipliers=(2.0, 2.0, 1.0)).validate()

    def test_must_end_at_one(self):
        with pytest.raises(ConfigError, match="1.0"):
            PruneSchedule(multipliers=(2.0, 1.5)).validate()

    def test_needs_two_entries(self):
        with pytest.raises(ConfigError):
            PruneSchedule(multipliers=(1.0,)).validate()

    def test_negative_finetune_rejected(self):
        with pytest.raises(ConfigError):
            PruneSchedule(finetune_epochs=-1).validate()


class TestCouplingGroups:
    def test_residual_add_couples_producers(self):
        gb = GraphBuilder((8, 8, 3))
        a = gb.conv("a", "input", 4, k=3)
        b_mid = gb.conv("mid", a, 6, k=1)
        b = gb.conv("b", b_mid, 4, k=1)
        s = gb.add("s", a, b)
        out = gb.conv("out", s, 2, k=1)
        g = gb.build({"out": out})
        groups = coupling_groups(g)
        assert ["a", "b"] in groups
        assert ["mid"] in groups
        assert ["out"] in groups

    def test_passthrough_layers_inherit_source(self):
        gb = GraphBuilder((8, 8, 3))
        a = gb.conv("a", "input", 4, k=3)
        x = gb.batch_norm("bn", a)
        x = gb.relu6("r", x)
        x = gb.depthwise("dw", x, k=3)
        b = gb.conv("b", x, 4, k=1)
        s = gb.add("s", a, b)
        g = gb.build({"out": s})
        assert ["a", "b"] in coupling_groups(g)

    def test_input_sourced_channels_are_not_prunable(self):
        gb = GraphBuilder((8, 8, 3))
        r = gb.relu6("r", "input")
        c = gb.conv("c", r, 4, k=1)
        g = gb.build({"out": c})
        assert coupling_groups(g) == [["c"]]

    def test_add_through_concat_rejected(self):
        gb = GraphBuilder((8, 8, 2))
        a = gb.conv("a", "input", 2, k=1)
        b = gb.conv("b", "input", 2, k=1)
        cat = gb.concat("cat", [a, b])
        d = gb.conv("d", "input", 4, k=1)
        s = gb.add("s", cat, d)
        g = gb.build({"out": s})
        with pytest.raises(GraphError, match="concat"):
            coupling_groups(g)

    def test_real_network_group_structure(self):
        g = build_contextnet(ContextNetConfig(3, (32, 64), 4))
        groups = {tuple(grp) for grp in coupling_groups(g)}
        assert ("context/conv_in", "context/b1_0/project",
                "context/b2_0/project") in groups
        assert ("context/b3_0/project", "context/b3_1/project",
                "context/b3_2/project") in groups
        assert ("fuse/ctx", "fuse/det") in groups
        assert ("head/conv",) in groups


class TestPruneFilters:
    def linear_chain(self):
        gb = GraphBuilder((6, 6, 3))
        a = gb.conv("a", "input", 6, k=3, bias=True)
        out = gb.conv("out", a, 4, k=1, bias=True)
        return gb.build({"out": out})

    def test_zero_weight_equivalence_linear_consumer(self):
        g = self.linear_chain()
        p = init_params(g, np.random.default_rng(0))
        keep = [0, 2, 4]
        pg, pp = prune_filters(g, p, "a", keep)
        x = np.random.default_rng(1).standard_normal((2, 6, 6, 3)).astype(np.float32)
        pruned_out = autodiff.forward(pg, pp, x).values["out"]
        zeroed = {k: v.copy() for k, v in p.items()}
        for i in (1, 3, 5):
            zeroed["a.kernel"][:, :, :, i] = 0.0
            zeroed["a.bias"][i] = 0.0
        zero_out = autodiff.forward(g, zeroed, x).values["out"]
        assert np.max(np.abs(pruned_out - zero_out)) < 1e-5

    def test_zero_weight_equivalence_through_concat(self):
        gb = GraphBuilder((6, 6, 3))
        a = gb.conv("a", "input", 4, k=1, bias=True)
        b = gb.conv("b", "input", 3, k=1, bias=True)
        cat = gb.concat("cat", [a, b])
        out = gb.conv("out", cat, 2, k=1, bias=True)
        g = gb.build({"out": out})
        p = init_params(g, np.random.default_rng(4))
        pg, pp = prune_filters(g, p, "a", [1, 2])
        assert pg.layer("cat").out_shape[2] == 5
        x = np.random.default_rng(5).standard_normal((1, 6, 6, 3)).astype(np.float32)
        pruned_out = autodiff.forward(pg, pp, x).values["out"]
        zeroed = {k: v.copy() for k, v in p.items()}
        for i in (0, 3):
            zeroed["a.kernel"][:, :, :, i] = 0.0
            zeroed["a.bias"][i] = 0.0
        zero_out = autodiff.forward(g, zeroed, x).values["out"]
        assert np.max(np.abs(pruned_out - zero_out)) < 1e-5

    def test_consumer_and_bn_shapes_follow(self):
        gb = GraphBuilder((8, 8, 3))
        a = gb.conv("a", "input", 8, k=3)
        x = gb.batch_norm("bn", a)
        x = gb.relu6("r", x)
        x = gb.depthwise("dw", x, k=3)
        out = gb.conv("out", x, 5, k=1)
        g = gb.build({"out": out})
        p = init_params(g, np.random.default_rng(0))
        pg, pp = prune_filters(g, p, "a", [0, 1, 6])
        assert pg.layer("a").out_shape[2] == 3
        assert pp["a.kernel"].shape == (3, 3, 3, 3)
        assert pp["bn.gamma"].shape == (3,)
        assert pp["bn.running_var"].shape == (3,)
        assert pp["dw.kernel"].shape == (3, 3, 3, 1)
        assert pp["out.kernel"].shape == (1, 1, 3, 5)
        # kept slices carry the original values
        np.testing.assert_array_equal(pp["a.kernel"],
                                      p["a.kernel"][:, :, :, [0, 1, 6]])
        np.testing.assert_array_equal(pp["out.kernel"],
                                      p["out.kernel"][:, :, [0, 1, 6], :])

    def test_residual_group_shares_keep_set(self):
        gb = GraphBuilder((8, 8, 3))
        a = gb.conv("a", "input", 6, k=3)
        mid = gb.conv("mid", a, 4, k=1)
        b = gb.conv("b", mid, 6, k=1)
        s = gb.add("s", a, b)
        g = gb.build({"out": s})
        p = init_params(g, np.random.default_rng(0))
        pg, pp = prune_filters(g, p, "a", [0, 5])
        assert pp["a.kernel"].shape[3] == 2
        assert pp["b.kernel"].shape[3] == 2
        assert pg.layer("s").out_shape[2] == 2
        np.testing.assert_array_equal(pp["b.kernel"],
                                      p["b.kernel"][:, :, :, [0, 5]])

    def test_inputs_not_mutated(self):
        g = self.linear_chain()
        p = init_params(g, np.random.default_rng(0))
        snapshot = {k: v.copy() for k, v in p.items()}
        prune_filters(g, p, "a", [0, 1])
        for k in snapshot:
            np.testing.assert_array_equal(p[k], snapshot[k])
        assert g.layer("a").out_shape[2] == 6

    def test_bad_keep_sets_rejected(self):
        g = self.linear_chain()
        p = init_params(g, np.random.default_rng(0))
        with pytest.raises(GraphError, match="empty"):
            prune_filters(g, p, "a", [])
        with pytest.raises(GraphError, match="outside"):
            prune_filters(g, p, "a", [0, 6])
        with pytest.raises(GraphError):
            prune_filters(g, p, "r", [0])  # not a conv ("r" missing anyway)

    def test_non_conv_target_rejected(self):
        gb = GraphBuilder((6, 6, 3))
        a = gb.conv("a", "input", 4, k=1)
        r = gb.relu6("r", a)
        g = gb.build({"out": r})
        p = init_params(g, np.random.default_rng(0))
        with pytest.raises(GraphError, match="conv"):
            prune_filters(g, p, "r", [0])


class TestProgressive:
    def setup_net(self, mult=2.0, seed=0):
        cfg = ContextNetConfig(3, (32, 64), 4, width_multiplier=mult)
        g = build_contextnet(cfg)
        p = init_params(g, np.random.default_rng(seed))
        return g, p

    @staticmethod
    def reference(mult):
        return build_contextnet(ContextNetConfig(3, (32, 64), 4,
                                                 width_multiplier=mult))

    def test_full_schedule_reaches_reference_widths(self):
        g, p = self.setup_net()
        calls = []

        def finetune(stage_graph, stage_params, idx, mult):
            calls.append(mult)
            return float(idx)

        g2, p2, reports = progressive_prune(g, p, PruneSchedule(),
                                            self.reference, finetune)
        assert calls == [1.5, 1.25, 1.0]
        ref = self.reference(1.0)
        for layer in ref.layers:
            assert g2.layer(layer.name).out_shape == layer.out_shape
        assert count_params(g2) == count_params(ref)
        counts = [count_params(g)] + [r.params_after for r in reports]
        assert all(b < a for a, b in zip(counts, counts[1:]))
        assert [r.finetune_metric for r in reports] == [0.0, 1.0, 2.0]
        # pruned graph still executes
        x = np.zeros((1, 32, 64, 3), np.float32)
        autodiff.forward(g2, p2, x)

    def test_classifier_width_never_changes(self):
        g, p = self.setup_net()
        g2, _, _ = progressive_prune(g, p, PruneSchedule(), self.reference)
        assert g2.layer("head/conv").out_shape[2] == 3
        assert g2.layer("aux/conv").out_shape[2] == 3

    def test_kept_filters_are_group_top_norms(self):
        g, p = self.setup_net()
        # stage 1 target for a singleton expansion conv
        layer = "context/b3_1/expand"
        current = g.layer(layer).out_shape[2]
        target = self.reference(1.5).layer(layer).out_shape[2]
        norms = np.abs(p[layer + ".kernel"]).sum(axis=(0, 1, 2))
        expect_drop = set(np.argsort(norms, kind="stable")[:current - target].tolist())
        g2, p2, _ = progressive_prune(
            g, p, PruneSchedule(multipliers=(2.0, 1.5, 1.25, 1.0)), self.reference)
        # after all stages the kept set is nested, so dropped-at-stage-1
        # filters can never resurface
        kept_norms = np.abs(p2[layer + ".kernel"]).sum(axis=(0, 1, 2))
        surviving = set(np.round(kept_norms, 5).tolist())
        dropped = {round(float(norms[i]), 5) for i in expect_drop}
        assert not (surviving & dropped)

    def test_start_width_mismatch_rejected(self):
        g, p = self.setup_net(mult=1.5)
        with pytest.raises(ConfigError, match="multiplier"):
            progressive_prune(g, p, PruneSchedule(), self.reference)

    def test_report_text_lists_layers(self):
        g, p = self.setup_net()
        _, _, reports = progressive_prune(g, p, PruneSchedule(), self.reference)
        text = format_prune_report(reports)
        assert "1.5x" in text and "1.0x" in text
        assert "kept" in text
