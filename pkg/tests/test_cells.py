"""Cell construction, forward semantics, and the JSON schema."""

import numpy as np
import pytest

from wirelens import ops
from wirelens.autodiff import Tape, Tensor
from wirelens.cells import (
    CANDIDATES,
    CellSpec,
    Network,
    NetworkSpec,
    build_minimal_cell,
    build_modified_cell,
    build_simplified_cell,
)
from wirelens.datasets import synth_dataset
from wirelens.ops import NormConfig


def minimal_net(seed=0, **kw):
    spec = NetworkSpec(cells=(build_minimal_cell(),), **kw)
    return Network(spec, seed=seed)


def small_batch(seed=0, n=16, classes=10):
    data = synth_dataset(classes, (3, 8, 8), n, 1.0, seed=seed)
    return data.images, data.labels


class TestCellSpecs:
    def test_minimal_cell_shape(self):
        cell = build_minimal_cell()
        edges = cell.op_edges()
        assert len(edges) == 5
        assert edges == ((0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
        assert cell.edge_kind((2, 3)) == "intermediate"
        assert all(cell.edge_kind(e) == "input" for e in edges[:4])
        assert cell.output_node == 4

    def test_minimal_cell_default_candidates(self):
        cell = build_minimal_cell()
        for edge in cell.op_edges():
            assert cell.candidates[edge] == CANDIDATES
            assert cell.candidates[edge][0] == "none"
            assert cell.candidates[edge][1] == "skip_connect"

    def test_simplified_cell_edges(self):
        cell = build_simplified_cell()
        assert cell.op_edges() == ((0, 1), (0, 2), (1, 2))
        assert cell.surviving_intermediates() == (1, 2)

    def test_modified_cell_drops_node1_output_and_pins_01(self):
        cell = build_modified_cell()
        assert cell.surviving_intermediates() == (2,)
        assert cell.fixed_ops == {(0, 1): "sep_conv_3x3"}
        assert (0, 1) not in cell.sampled_edges()
        assert cell.sampled_edges() == ((0, 2), (1, 2))

    def test_search_space_membership(self):
        # every non-modified build keeps all predecessors and the output
        for cell in (build_minimal_cell(), build_simplified_cell()):
            out = cell.output_node
            for j in cell.intermediate_nodes:
                for i in range(j):
                    assert (i, j) in cell.op_edges()
                assert (j, out) not in cell.deleted_edges

    def test_cell_json_round_trip(self):
        for cell in (build_minimal_cell(), build_modified_cell()):
            again = CellSpec.from_json(cell.to_json())
            assert again == cell

    def test_network_json_round_trip(self):
        spec = NetworkSpec(cells=(build_minimal_cell(), build_minimal_cell()),
                           stem_channels=4, num_classes=7,
                           norm=NormConfig(kind="layer", eps=1e-7, affine=True),
                           stacking="conv_norm_relu")
        again = NetworkSpec.from_json(spec.to_json())
        assert again == spec


class TestForward:
    def test_sample_must_cover_sampled_edges(self):
        net = minimal_net()
        x, _ = small_batch()
        with pytest.raises(ValueError, match="cover"):
            net.forward(x, {(0, (0, 2)): 1})

    def test_all_none_gives_uniform_softmax(self):
        net = minimal_net()
        x, labels = small_batch()
        sel = dict.fromkeys(net.spec.sampled_edges(), 0)
        trace = net.forward(x, sel)
        np.testing.assert_allclose(trace.logits.data, 0.0, atol=1e-15)
        loss, entropy = net.loss(trace, labels)
        np.testing.assert_allclose(float(loss.data), np.log(10), atol=1e-12)

    def test_single_skip_path_equals_composition(self):
        # skip everywhere: node2 = 2*stem, node3 = stem+stem+node2
        net = minimal_net()
        x, _ = small_batch()
        sel = dict.fromkeys(net.spec.sampled_edges(), 1)
        trace = net.forward(x, sel)
        tape = Tape()
        stem = ops.normalize(tape, ops.conv2d(tape, Tensor(x), net.params["stem.conv"]),
                             net.spec.norm)
        node2 = 2.0 * stem.data
        node3 = 2.0 * stem.data + node2
        out = np.concatenate([node2, node3], axis=1)
        logits = out.mean(axis=(2, 3)) @ net.params["head.linear"].data
        np.testing.assert_allclose(trace.logits.data, logits, atol=1e-12)

    def test_one_hot_forward_matches_manual_assembly(self):
        net = minimal_net(seed=3)
        x, _ = small_batch(seed=1)
        sel = {(0, (0, 2)): 4, (0, (1, 2)): 0, (0, (0, 3)): 3,
               (0, (1, 3)): 2, (0, (2, 3)): 6}
        trace = net.forward(x, sel)

        tape = Tape()
        cfg = net.spec.norm
        stem = ops.normalize(tape, ops.conv2d(tape, Tensor(x), net.params["stem.conv"]), cfg)

        def block(v, name, ksize, dilation, groups):
            v = ops.relu(tape, v)
            v = ops.conv2d(tape, v, net.params[name], padding=dilation * (ksize - 1) // 2,
                           dilation=dilation, groups=groups)
            return ops.normalize(tape, v, cfg)

        x02 = block(stem, "cell0.edge0-2.sep_conv_3x3.conv", 3, 1, 8)
        node2 = x02.data  # (1,2) is none
        x03 = ops.normalize(tape, ops.avg_pool3x3(tape, stem), cfg)
        x13 = ops.normalize(tape, ops.max_pool3x3(tape, stem), cfg)
        x23 = block(ops.add_n(tape, [x02]), "cell0.edge2-3.dil_conv_5x5.conv", 5, 2, 1)
        node3 = x03.data + x13.data + x23.data
        out = np.concatenate([node2, node3], axis=1)
        logits = out.mean(axis=(2, 3)) @ net.params["head.linear"].data
        np.testing.assert_allclose(trace.logits.data, logits, atol=1e-12, rtol=0)

    def test_output_channels_double_for_two_intermediates(self):
        net = minimal_net()
        x, _ = small_batch()
        rng = np.random.default_rng(0)
        sel = {k: int(rng.integers(8)) for k in net.spec.sampled_edges()}
        trace = net.forward(x, sel)
        assert trace.cell_outputs[0].shape[1] == 2 * net.spec.stem_channels

    def test_unsampled_candidate_parameters_get_no_gradient(self):
        net = minimal_net()
        x, labels = small_batch()
        sel = dict.fromkeys(net.spec.sampled_edges(), 4)  # sep_conv_3x3 everywhere
        trace = net.forward(x, sel, capture=True)
        net.loss(trace, labels, backward=True)
        for name, p in net.params.items():
            if "dil_conv" in name or "sep_conv_5x5" in name:
                assert p.grad is None or not p.grad.any(), name
            if "sep_conv_3x3" in name:
                assert p.grad is not None and p.grad.any(), name

    def test_none_edge_contributes_exact_zero(self):
        net = minimal_net(seed=4)
        x, labels = small_batch(seed=2)
        sel = {(0, (0, 2)): 4, (0, (1, 2)): 0, (0, (0, 3)): 4,
               (0, (1, 3)): 4, (0, (2, 3)): 4}
        trace = net.forward(x, sel, capture=True)
        act = trace.activation(0, (1, 2))
        assert not act.tensor.data.any()

    def test_fixed_edge_must_not_appear_in_sample(self):
        spec = NetworkSpec(cells=(build_modified_cell(),), in_channels=3)
        net = Network(spec, seed=0)
        x, _ = small_batch()
        sel = {(0, (0, 2)): 2, (0, (1, 2)): 3, (0, (0, 1)): 4}
        with pytest.raises(ValueError, match="extra"):
            net.forward(x, sel)

    def test_mixture_weights_receive_cost_vector_gradient(self):
        # grad wrt mixture weights equals per-candidate contraction
        net = minimal_net(seed=5)
        x, labels = small_batch(seed=3)
        w = np.full(8, 1.0 / 8)
        sel = {k: w.copy() for k in net.spec.sampled_edges()}
        trace = net.forward(x, sel, capture=True)
        net.loss(trace, labels, backward=True)
        key = (0, (0, 2))
        wt = trace.edge_weights[key]
        assert wt.grad is not None and wt.grad.shape == (8,)
        # none candidate's entry contracts with a zero tensor
        assert wt.grad[0] == 0.0


class TestStackedCells:
    def test_two_cell_channel_bookkeeping(self):
        spec = NetworkSpec(cells=(build_minimal_cell(), build_minimal_cell()),
                           stem_channels=4)
        net = Network(spec, seed=0)
        assert spec.cell_channels() == (4, 8)
        assert spec.head_features() == 16
        x, labels = small_batch()
        rng = np.random.default_rng(1)
        sel = {k: int(rng.integers(8)) for k in spec.sampled_edges()}
        trace = net.forward(x, sel)
        assert trace.cell_outputs[1].shape[1] == 16
        assert trace.logits.shape == (16, 10)


class TestInit:
    def test_init_is_seed_deterministic(self):
        a = minimal_net(seed=9)
        b = minimal_net(seed=9)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_conv_init_variance_tracks_fan_in(self):
        spec = NetworkSpec(cells=(build_minimal_cell(),), stem_channels=16)
        net = Network(spec, seed=1)
        w = net.params["cell0.edge0-2.dil_conv_3x3.conv"].data  # fan_in 16*9
        assert abs(w.std() - np.sqrt(2.0 / 144)) < 0.15 * np.sqrt(2.0 / 144)

    def test_unit_init_scheme(self):
        net = minimal_net(seed=1, stem_channels=16)
        unit = Network(net.spec, seed=1, init="unit")
        w = unit.params["cell0.edge0-2.dil_conv_3x3.conv"].data
        assert abs(w.std() - 1.0) < 0.15
