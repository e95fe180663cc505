import math

import numpy as np
import pytest

from semihoc.metrics import (
    bmhd,
    confidence_accuracy_bins,
    decomposition_matrix,
    gate_fpr_coverage,
    spl_purity_and_depth,
)
from semihoc.spl import AgeGateState, SplChain

ROOT, MAMMAL, BIRD, CAT, DOG, EAGLE, JUNCO = range(7)


def micro_mean_distance(preds, gts, tree):
    return float(np.mean([tree.tree_distance(p, g) for p, g in zip(preds, gts)]))


class TestBmhd:
    def test_perfect_predictions(self, animals):
        preds = [CAT, DOG, MAMMAL, BIRD]
        report = bmhd(preds, preds, animals)
        assert report.id == 0.0 and report.ood == 0.0 and report.mix == 0.0

    def test_parent_predictions_give_one(self, animals):
        report = bmhd([BIRD, BIRD], [JUNCO, MAMMAL], animals)
        # Junco (ID) predicted at parent: distance 1; Mammal (OOD) predicted
        # at sibling: distance 2
        assert report.id == 1.0
        assert report.ood == 2.0
        assert report.mix == 1.5

    def test_macro_not_micro(self, animals):
        # class Cat: one sample at distance 1; class Junco: nine at distance 3
        preds = [MAMMAL] + [MAMMAL] * 9
        gts = [CAT] + [JUNCO] * 9
        report = bmhd(preds, gts, animals)
        assert report.id == 2.0  # (1 + 3) / 2, class-balanced
        assert micro_mean_distance(preds, gts, animals) == pytest.approx(2.8)

    def test_missing_component_makes_mix_undefined(self, animals):
        report = bmhd([CAT], [CAT], animals)
        assert report.ood is None
        with pytest.raises(ValueError):
            _ = report.mix

    def test_matches_bruteforce_grouping(self, animals):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 7, 50)
        gts = rng.integers(0, 7, 50)
        report = bmhd(preds, gts, animals)
        groups = {}
        for p, g in zip(preds, gts):
            groups.setdefault(int(g), []).append(animals.tree_distance(int(p), int(g)))
        id_means = [np.mean(v) for c, v in groups.items() if animals.is_leaf(c)]
        ood_means = [np.mean(v) for c, v in groups.items() if not animals.is_leaf(c)]
        assert report.id == pytest.approx(np.mean(id_means))
        assert report.ood == pytest.approx(np.mean(ood_means))


class TestDecomposition:
    def test_exact_prediction_in_origin_cell(self, animals):
        m = decomposition_matrix([CAT], [CAT], animals, "id")
        assert m[0, 0] == 100.0

    def test_parent_prediction(self, animals):
        # prediction = parent of gt: LCA is the prediction
        m = decomposition_matrix([MAMMAL], [CAT], animals, "ood")
        assert m[1, 0] == 100.0

    def test_child_prediction(self, animals):
        m = decomposition_matrix([CAT], [MAMMAL], animals, "id")
        assert m[0, 1] == 100.0

    def test_percentages_sum_to_100(self, animals):
        rng = np.random.default_rng(1)
        preds = rng.integers(0, 7, 40)
        gts = rng.integers(0, 7, 40)
        for subset in ("id", "ood"):
            m = decomposition_matrix(preds, gts, animals, subset)
            if m.size:
                assert abs(m.sum() - 100.0) < 1e-9

    def test_empty_subset(self, animals):
        m = decomposition_matrix([CAT], [CAT], animals, "ood")
        assert m.size == 0

    def test_origin_cell_is_exact_accuracy(self, animals):
        rng = np.random.default_rng(2)
        preds = rng.integers(0, 7, 60)
        gts = rng.integers(0, 7, 60)
        m = decomposition_matrix(preds, gts, animals, "id")
        id_rows = [i for i in range(60) if animals.is_leaf(int(preds[i]))]
        exact = np.mean([preds[i] == gts[i] for i in id_rows])
        assert m[0, 0] == pytest.approx(100.0 * exact)


class TestPurityAndDepth:
    def test_pure_at_internal(self, animals):
        out = spl_purity_and_depth({1: SplChain((MAMMAL,), 0.95)}, {1: MAMMAL}, animals)
        assert out == (1.0, 1.0)

    def test_wrong_branch_impure(self, animals):
        out = spl_purity_and_depth({1: SplChain((BIRD,), 0.95)}, {1: MAMMAL}, animals)
        assert out[0] == 0.0

    def test_overprediction_impure_at_depth_two(self, animals):
        out = spl_purity_and_depth({1: SplChain((MAMMAL, CAT), 0.95)}, {1: MAMMAL}, animals)
        assert out == (0.0, 2.0)

    def test_empty_chains_excluded(self, animals):
        chains = {1: SplChain((), 0.95), 2: SplChain((MAMMAL,), 0.95)}
        out = spl_purity_and_depth(chains, {1: MAMMAL, 2: MAMMAL}, animals)
        assert out == (1.0, 1.0)

    def test_no_assigned_samples(self, animals):
        assert spl_purity_and_depth({1: SplChain((), 0.95)}, {1: MAMMAL}, animals) is None


class TestGateFprCoverage:
    def test_gate_passes_everything(self):
        gate = AgeGateState(1, 0.2)
        records = [(1, 3, True), (1, 5, False), (2, 7, False)]
        out = gate_fpr_coverage(records, gate)
        assert out.coverage == 1.0 and out.fpr == 1.0 and out.fpr_defined

    def test_gate_blocks_everything(self):
        gate = AgeGateState(1, 0.2, cutoffs={1: -1.0, 2: -1.0})
        records = [(1, 3, True), (1, 5, False), (2, 7, False)]
        out = gate_fpr_coverage(records, gate)
        assert out.coverage == 0.0 and out.fpr == 0.0

    def test_counting(self):
        gate = AgeGateState(1, 0.2, cutoffs={1: 5.0})
        records = [(1, e, e != 6) for e in range(1, 9)] + [(2, 1, False), (2, 1, True)]
        # node 1: epochs 1..8, cutoff 5 -> 5 pass; node 2: both pass
        out = gate_fpr_coverage(records, gate)
        assert out.coverage == 7 / 10
        # incorrect: (1, 6) blocked, (2, 1) passes -> fpr 1/2
        assert out.fpr == 0.5

    def test_no_incorrect_flagged(self):
        gate = AgeGateState(1, 0.2)
        out = gate_fpr_coverage([(1, 3, True)], gate)
        assert out.fpr == 0.0 and not out.fpr_defined


class TestConfidenceBins:
    def test_all_correct_high_confidence(self):
        table = confidence_accuracy_bins([0.99] * 8, [True] * 8, n_bins=10)
        assert table.accuracy[-1] == 1.0
        assert table.counts[-1] == 8 and table.counts[:-1].sum() == 0

    def test_frequencies_sum_to_one(self):
        rng = np.random.default_rng(3)
        table = confidence_accuracy_bins(rng.random(100), rng.random(100) > 0.5, n_bins=7)
        assert math.isclose(table.frequency.sum(), 1.0)

    def test_confidence_one_lands_in_top_bin(self):
        table = confidence_accuracy_bins([1.0], [True], n_bins=4)
        assert table.counts[-1] == 1

    def test_empty_bins_are_nan(self):
        table = confidence_accuracy_bins([0.05], [False], n_bins=4)
        assert np.isnan(table.accuracy[2])

    def test_subtree_conf_at_least_node_conf(self, animals):
        # superset sum: argmax node's subtree confidence >= its own mass
        from semihoc.prohoc import fuse, predict_node, subtree_confidences

        rng = np.random.default_rng(4)
        for _ in range(20):
            d1 = rng.random(2) + 1e-9
            d2 = rng.random(4) + 1e-9
            dist = fuse([d1 / d1.sum(), d2 / d2.sum()], animals)
            node = predict_node(dist)
            conf = subtree_confidences(dist.probs, animals)
            assert conf[node] >= dist.probs[node]
