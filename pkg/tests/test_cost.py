"""Tests for MAdds, parameters and the connectivity-aware latency table."""

import math

import numpy as np
import pytest

from src.arch import FeatureSpec, NetworkPlan, decode_genome
from src.cost import (
    LatencyModel,
    LatencyTable,
    cost_report,
    graph_madds,
    graph_params,
    estimate_latency,
    merge_path_madds,
    sdo_grid_violations,
    signature_madds,
    signature_params,
    synth_lut,
    total_madds,
)
from src.errors import ConfigurationError, LatencyLookupError, UnsupportedOpError
from src.graph import OpSignature, expand_network, merge_path_nodes
from src.spaces import sample_with


@pytest.mark.unit
class TestOperatorCosts:
    """Closed-form per-operator costs."""

    def test_conv1x1_madds(self):
        """20x20, 48 -> 128 channels."""
        assert signature_madds(OpSignature("conv1x1", 20, 20, 48, 128)) == 2_457_600

    def test_depthwise_madds(self):
        """20x20, 3x3 kernel, 128 channels."""
        assert signature_madds(OpSignature("depthwise_conv", 20, 20, 128, 128, kernel=3)) == 460_800

    def test_free_ops(self):
        """Nearest-neighbor upsampling, adds and ReLU cost nothing."""
        for kind in ("upsample", "add", "relu"):
            assert signature_madds(OpSignature(kind, 20, 40, 64, 64, 2, 2)) == 0

    def test_params(self):
        """Parameter counts of a 1x1 conv and a depthwise conv."""
        assert signature_params(OpSignature("conv1x1", 20, 20, 48, 128)) == 6_144
        assert signature_params(OpSignature("depthwise_conv", 10, 10, 64, 64, kernel=5)) == 1_600

    def test_squeeze_excite(self):
        """Two pooled 1x1 convs plus the channelwise scale."""
        sig = OpSignature("squeeze_excite", 10, 10, 64, 64)
        assert signature_madds(sig) == 2 * 64 * 16 + 100 * 64
        assert signature_params(sig) == 2 * 64 * 16

    def test_unknown_kind(self):
        """Ops without a cost model are rejected."""
        with pytest.raises(UnsupportedOpError):
            signature_madds(OpSignature("maxpool", 20, 10, 64, 64))


@pytest.mark.unit
class TestMergePathCost:
    """Size-dependent ordering of merge paths."""

    def test_downsample_first(self):
        """Shrinking 20 -> 10 with k=2, C=48, F=128."""
        cost = merge_path_madds(FeatureSpec(4, 20, 48), 10, 128, sdo_enabled=True)
        assert cost.madds == 633_600
        assert cost.order == "resize_then_conv"

    def test_conv_first(self):
        """The same path with ordering disabled."""
        assert merge_path_madds(FeatureSpec(4, 20, 48), 10, 128, sdo_enabled=False).madds == 2_508_800

    def test_formula_matches_graph(self):
        """Closed-form path costs equal the MAdds of the operators built for them."""
        for in_res, res in [(40, 10), (5, 40), (20, 20)]:
            for sdo in (True, False):
                nodes = merge_path_nodes(in_res, 48, res, 96, sdo)
                expected = sum(signature_madds(n.signature) for n in nodes)
                assert merge_path_madds(FeatureSpec(0, in_res, 48), res, 96, sdo).madds == expected

    def test_grid_has_no_violations(self):
        """Down-sample-then-conv is strictly cheaper on every grid case."""
        checked, violations = sdo_grid_violations()
        assert checked == 3 * 6 * 7 * 4
        assert violations == []


@pytest.mark.unit
class TestGraphCosts:
    """Whole-graph totals."""

    def test_totals_sum_rows(self, single_block_plan):
        """Report totals are the sums of their columns."""
        report = graph_madds(expand_network(single_block_plan(repeats=3)))
        assert report.madds == sum(r.madds for r in report.rows)
        assert report.params == sum(r.params for r in report.rows)
        assert report.latency_ms is None

    def test_pruning_never_adds_cost(self, single_block_plan):
        """Pruned graphs cost no more than unpruned ones."""
        pruned = expand_network(single_block_plan())
        unpruned = expand_network(single_block_plan(), prune=False)
        assert total_madds(pruned) < total_madds(unpruned)
        assert graph_params(pruned) < graph_params(unpruned)

    @pytest.mark.parametrize("repeats", [4, 5])
    def test_disabling_sdo_costs_more(self, single_block_plan, repeats):
        """Re-costing the single-block cell without ordering raises head MAdds."""
        with_sdo = total_madds(expand_network(single_block_plan(repeats=repeats)))
        without = total_madds(expand_network(single_block_plan(repeats=repeats, sdo_enabled=False)))
        assert without > with_sdo

    def test_repeats_grow_cost(self, single_block_plan):
        """Each extra cell adds the same MAdds."""
        costs = [total_madds(expand_network(single_block_plan(repeats=r))) for r in (1, 2, 3)]
        assert costs[2] - costs[1] == costs[1] - costs[0] > 0


@pytest.mark.unit
class TestLatencyTable:
    """Table-driven latency estimates."""

    def test_reachable_only(self, mnasfpn_space, mnasfpn_lut):
        """Unreachable blocks never change the estimate, which is the sum of its rows."""
        rng = np.random.default_rng(21)
        for _ in range(100):
            cell = decode_genome(sample_with(mnasfpn_space, rng), mnasfpn_space)
            plan = NetworkPlan(cell, repeats=1)
            pruned = estimate_latency(expand_network(plan), mnasfpn_lut)
            unpruned = estimate_latency(expand_network(plan, prune=False), mnasfpn_lut)
            assert pruned.latency_ms == unpruned.latency_ms
            assert pruned.latency_ms == math.fsum(ms for _, ms in pruned.rows)
            assert pruned.rows[0] == ("overhead", 100.0)

    def test_missing_signature(self, single_block_plan):
        """Lookups of absent signatures fail and list what is missing."""
        graph = expand_network(single_block_plan())
        with pytest.raises(LatencyLookupError) as exc:
            estimate_latency(graph, LatencyTable({}, 10.0))
        message = str(exc.value)
        expected = {str(n.signature) for n in graph.nodes}
        assert {str(s) for s in exc.value.signatures} == expected
        assert all(sig in message for sig in expected)
        assert "conv1x1" in message
        assert isinstance(exc.value, LookupError)

    def test_latency_grows_with_reachable_work(self, single_block_plan, mnasfpn_lut):
        """More cells, more latency."""
        one = estimate_latency(expand_network(single_block_plan(repeats=1)), mnasfpn_lut)
        two = estimate_latency(expand_network(single_block_plan(repeats=2)), mnasfpn_lut)
        assert two.latency_ms > one.latency_ms

    def test_text_round_trip(self, tmp_path, single_block_plan):
        """Saved tables load back with identical entries."""
        lut = synth_lut([expand_network(single_block_plan())], LatencyModel(noise=0.1, seed=3))
        path = tmp_path / "lut.txt"
        lut.save(path)
        loaded = LatencyTable.load(path)
        assert dict(loaded.entries) == dict(lut.entries)
        assert loaded.overhead_ms == lut.overhead_ms

    def test_malformed_text(self):
        """Tables need an overhead row and well-formed lines."""
        with pytest.raises(ConfigurationError):
            LatencyTable.from_text("conv1x1 in=20x48 out=20x48 k=1 s=1 -> 0.5\n")
        with pytest.raises(ConfigurationError):
            LatencyTable.from_text("overhead -> 1.0\nnot a row\n")

    def test_negative_entry(self):
        """Latencies must be non-negative."""
        with pytest.raises(ConfigurationError):
            LatencyTable({OpSignature("add", 5, 5, 16, 16): -1.0})

    def test_synthetic_model(self, single_block_plan):
        """Noise-free entries follow the linear MAdds model."""
        model = LatencyModel(ms_per_madd=1e-6, fixed_ms=0.01, overhead_ms=50.0)
        lut = synth_lut([expand_network(single_block_plan())], model)
        sig = OpSignature("depthwise_conv", 20, 20, 96, 96, kernel=3)
        assert lut.lookup(sig) == pytest.approx(1e-6 * signature_madds(sig) + 0.01)

    def test_seeded_noise_is_reproducible(self, single_block_plan):
        """Noisy tables with the same seed are identical; the noise is real."""
        graphs = [expand_network(single_block_plan(repeats=2))]
        noisy = LatencyModel(ms_per_madd=1e-6, fixed_ms=0.01, overhead_ms=50.0, noise=0.1, seed=42)
        first, second = synth_lut(graphs, noisy), synth_lut(graphs, noisy)
        assert first == second
        assert first.to_text() == second.to_text()
        clean = synth_lut(graphs, noisy.model_copy(update={"noise": 0.0}))
        assert first.entries.keys() == clean.entries.keys()
        assert first.entries != clean.entries
        other = synth_lut(graphs, noisy.model_copy(update={"seed": 43}))
        assert other.entries != first.entries

    def test_report_groups(self, single_block_plan, mnasfpn_lut):
        """Grouped latency splits overhead, blocks and cell-wide adds."""
        report = cost_report(expand_network(single_block_plan(repeats=2)), mnasfpn_lut)
        groups = report.grouped_latency()
        assert groups["overhead"] == 100.0
        assert groups["cell_adds"] > 0
        assert sum(groups.values()) == pytest.approx(report.latency_ms)
