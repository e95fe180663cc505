"""Subtree pseudo-labels, their assignment log, and age-gating.

A subtree pseudo-label on node c asserts that a sample lives somewhere in
c's subtree. It is assigned when the summed probability of the subtree
exceeds a threshold; with a threshold above one half the assigned nodes of a
sample always form a single root-anchored path, because sibling subtree
confidences cannot both exceed 1/2.

Age-gating counters a failure mode of self-training on open-set data: nodes
keep collecting new, increasingly deep assignments late in training, well
after the initial wave of correct ones. Per node we detect the first
significant drop after the assignment-frequency peak (histogram over
first-assignment epochs) and block any assignment that happened after that
cutoff. Cutoffs only ever tighten; reopening a node later would defeat the
purpose of the gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .hierarchy import Hierarchy
from .prohoc import subtree_confidences


@dataclass(frozen=True)
class SplChain:
    """Assigned non-root nodes for one sample, ordered shallow to deep."""

    nodes: tuple[int, ...]
    tau: float

    def __len__(self) -> int:
        return len(self.nodes)

    def deepest(self) -> int | None:
        return self.nodes[-1] if self.nodes else None


def compute_spls(probs: np.ndarray, hierarchy: Hierarchy, tau: float) -> SplChain:
    """Nodes whose subtree confidence strictly exceeds tau (root excluded).

    tau = 1 is allowed and assigns nothing: the strict comparison makes it
    the degenerate supervised-only setting.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    conf = subtree_confidences(np.asarray(probs, dtype=np.float64), hierarchy)
    assigned = [c for c in range(1, hierarchy.n_nodes) if conf[c] > tau]
    assigned.sort(key=lambda c: (int(hierarchy.depths[c]), c))
    return SplChain(tuple(assigned), tau)


def compute_spls_batch(probs: np.ndarray, hierarchy: Hierarchy, tau: float) -> list[SplChain]:
    """compute_spls over a batch of node distributions."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    conf = subtree_confidences(probs, hierarchy)
    order = sorted(range(1, hierarchy.n_nodes), key=lambda c: (int(hierarchy.depths[c]), c))
    chains = []
    for row in conf:
        chains.append(SplChain(tuple(c for c in order if row[c] > tau), tau))
    return chains


class SplLog:
    """Mapping (node, sample id) -> epoch of first assignment.

    Entries exist only while the pair keeps being reassigned: a node missing
    from a sample's current chain drops the entry, and a later reassignment
    re-enters with the later epoch.
    """

    def __init__(self):
        self.by_sample: dict[int, dict[int, int]] = {}

    def get(self, node: int, sample_id: int) -> int | None:
        return self.by_sample.get(sample_id, {}).get(node)

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_sample.values())

    def epochs_per_node(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for entries in self.by_sample.values():
            for node, epoch in entries.items():
                out.setdefault(node, []).append(epoch)
        return out

    def state_dict(self) -> dict:
        return {"by_sample": {g: dict(v) for g, v in self.by_sample.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.by_sample = {int(g): {int(c): int(e) for c, e in v.items()} for g, v in state["by_sample"].items()}


def update_log(log: SplLog, sample_id: int, chain: SplChain, epoch: int) -> None:
    """First-assignment epochs are kept; nodes absent from the chain drop out."""
    entries = log.by_sample.setdefault(sample_id, {})
    chain_nodes = set(chain.nodes)
    for node in chain.nodes:
        if node not in entries:
            entries[node] = epoch
    for node in [c for c in entries if c not in chain_nodes]:
        del entries[node]
    if not entries:
        del log.by_sample[sample_id]


def detect_cutoff(epochs, current_epoch: int, bin_width: int, drop_threshold: float) -> float:
    """First histogram bin whose count drops below a fraction of the peak.

    Epochs are binned into consecutive width-w bins anchored at zero and
    covering [0, current_epoch], empty bins included. Scanning in order, a
    bin that exceeds the running maximum raises it; otherwise a count
    strictly below drop_threshold * maximum ends the scan and its left edge
    is returned. Returns infinity when no such drop occurs.
    """
    if bin_width < 1:
        raise ValueError("bin width must be >= 1")
    if not 0.0 < drop_threshold < 1.0:
        raise ValueError("drop threshold must be in (0, 1)")
    n_bins = current_epoch // bin_width + 1
    counts = [0] * n_bins
    for e in epochs:
        if not 0 <= e <= current_epoch:
            raise ValueError(f"assignment epoch {e} outside [0, {current_epoch}]")
        counts[e // bin_width] += 1

    max_count = 0
    for i, count in enumerate(counts):
        if count > max_count:
            max_count = count
        elif count < drop_threshold * max_count:
            return float(i * bin_width)
    return math.inf


@dataclass
class AgeGateState:
    """Per-node cutoff epochs plus the detector hyperparameters."""

    bin_width: int = 1
    drop_threshold: float = 0.01
    cutoffs: dict[int, float] = field(default_factory=dict)

    def cutoff(self, node: int) -> float:
        return self.cutoffs.get(node, math.inf)

    def state_dict(self) -> dict:
        return {
            "bin_width": self.bin_width,
            "drop_threshold": self.drop_threshold,
            "cutoffs": dict(self.cutoffs),
        }

    def load_state_dict(self, state: dict) -> None:
        self.bin_width = int(state["bin_width"])
        self.drop_threshold = float(state["drop_threshold"])
        self.cutoffs = {int(c): float(t) for c, t in state["cutoffs"].items()}


def update_cutoffs(state: AgeGateState, log: SplLog, current_epoch: int) -> None:
    """End-of-epoch cutoff detection; a cutoff can only ever decrease."""
    for node, epochs in log.epochs_per_node().items():
        detected = detect_cutoff(epochs, current_epoch, state.bin_width, state.drop_threshold)
        if detected < state.cutoff(node):
            state.cutoffs[node] = detected


def apply_gating(chain: SplChain, log: SplLog, state: AgeGateState, sample_id: int) -> SplChain:
    """Drop chain nodes whose logged assignment is strictly past the cutoff."""
    kept = []
    for node in chain.nodes:
        epoch = log.get(node, sample_id)
        if epoch is not None and epoch > state.cutoff(node):
            continue
        kept.append(node)
    return SplChain(tuple(kept), chain.tau)
