"""Evaluation and diagnostics: tree-distance scores, error decomposition,
pseudo-label purity, gate quality, and confidence-accuracy tables.

The headline score is the class-balanced mean hierarchical distance: samples
are grouped by ground-truth node, per-class mean tree distances are macro-
averaged separately over leaf (ID) and internal (OOD) ground truths, and the
mixed score is the arithmetic mean of the two, so rare classes and the OOD
side carry full weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .hierarchy import Hierarchy
from .spl import AgeGateState, SplChain


@dataclass(frozen=True)
class BmhdReport:
    id: float | None
    ood: float | None

    @property
    def mix(self) -> float:
        if self.id is None or self.ood is None:
            raise ValueError("mixed score undefined: need both ID and OOD ground truths")
        return 0.5 * (self.id + self.ood)


def bmhd(predictions, ground_truths, hierarchy: Hierarchy) -> BmhdReport:
    """Class-balanced mean tree distance, split by leaf/internal ground truth."""
    per_class: dict[int, list[int]] = {}
    for pred, gt in zip(predictions, ground_truths):
        per_class.setdefault(int(gt), []).append(hierarchy.tree_distance(int(pred), int(gt)))
    id_means = [np.mean(v) for c, v in sorted(per_class.items()) if hierarchy.is_leaf(c)]
    ood_means = [np.mean(v) for c, v in sorted(per_class.items()) if not hierarchy.is_leaf(c)]
    return BmhdReport(
        id=float(np.mean(id_means)) if id_means else None,
        ood=float(np.mean(ood_means)) if ood_means else None,
    )


def decomposition_matrix(predictions, ground_truths, hierarchy: Hierarchy, subset: str) -> np.ndarray:
    """Percentage matrix of (underprediction, overprediction) distances.

    Row: distance from the lowest common ancestor to the ground truth.
    Column: distance from the LCA to the prediction. `subset` selects the
    samples by what was predicted: 'id' keeps leaf predictions, 'ood'
    internal ones. Cell (0, 0) is the exactly-correct fraction.
    """
    if subset not in ("id", "ood"):
        raise ValueError("subset must be 'id' or 'ood'")
    size = hierarchy.max_depth + 1
    counts = np.zeros((size, size))
    total = 0
    for pred, gt in zip(predictions, ground_truths):
        pred, gt = int(pred), int(gt)
        if hierarchy.is_leaf(pred) != (subset == "id"):
            continue
        anc = hierarchy.lca(pred, gt)
        under = hierarchy.tree_distance(anc, gt)
        over = hierarchy.tree_distance(anc, pred)
        counts[under, over] += 1
        total += 1
    if total == 0:
        return np.zeros((0, 0))
    return counts * (100.0 / total)


def spl_purity_and_depth(
    chains: dict[int, SplChain], ground_truths: dict[int, int], hierarchy: Hierarchy
) -> tuple[float, float] | None:
    """Purity and mean depth of the deepest assigned node, or None when no
    sample has a non-empty chain.

    Purity counts a sample as correct when its ground truth lies inside the
    subtree of the deepest assigned node.
    """
    pure, depths = [], []
    for g, chain in chains.items():
        deepest = chain.deepest()
        if deepest is None:
            continue
        gt = ground_truths[g]
        pure.append(gt in hierarchy.subtree(deepest))
        depths.append(int(hierarchy.depths[deepest]))
    if not depths:
        return None
    return float(np.mean(pure)), float(np.mean(depths))


@dataclass(frozen=True)
class GateReport:
    fpr: float
    coverage: float
    n_assignments: int
    n_incorrect: int

    @property
    def fpr_defined(self) -> bool:
        return self.n_incorrect > 0


def gate_fpr_coverage(records, gate: AgeGateState) -> GateReport:
    """Micro-averaged gate quality over first-assignment records.

    `records` holds (node, epoch, correct) triples; an assignment passes the
    gate when its epoch does not exceed the node's cutoff. FPR is the
    fraction of incorrect assignments that pass (reported as 0 when there
    are none, flagged via fpr_defined); coverage is the fraction of all
    assignments that pass.
    """
    total = passed = incorrect = incorrect_passed = 0
    for node, epoch, correct in records:
        ok = epoch <= gate.cutoff(node)
        total += 1
        passed += ok
        if not correct:
            incorrect += 1
            incorrect_passed += ok
    coverage = passed / total if total else 1.0
    fpr = incorrect_passed / incorrect if incorrect else 0.0
    return GateReport(fpr=fpr, coverage=coverage, n_assignments=total, n_incorrect=incorrect)


@dataclass(frozen=True)
class ConfidenceBins:
    """Equal-width confidence bins with per-bin accuracy and frequency."""

    edges: np.ndarray  # n_bins + 1 edges over [0, 1]
    accuracy: np.ndarray  # nan for empty bins
    frequency: np.ndarray  # sums to 1 when any sample present
    counts: np.ndarray


def confidence_accuracy_bins(confidences, correct, n_bins: int = 30) -> ConfidenceBins:
    """Bin confidences into [0,1] and average correctness per bin."""
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if n_bins < 1:
        raise ValueError("need at least one bin")
    idx = np.minimum((confidences * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    hits = np.bincount(idx, weights=correct, minlength=n_bins)
    with np.errstate(invalid="ignore"):
        accuracy = np.where(counts > 0, hits / np.maximum(counts, 1), math.nan)
    total = counts.sum()
    frequency = counts / total if total else counts.astype(np.float64)
    return ConfidenceBins(
        edges=np.linspace(0.0, 1.0, n_bins + 1),
        accuracy=accuracy,
        frequency=frequency,
        counts=counts,
    )
