"""Fuse depth-specific class probabilities into one hierarchical distribution.

Every internal node gets a local branch distribution over its children, read
off the depth network one level below and renormalized, plus a stop
probability: the normalized entropy of that branch distribution, clamped
away from 0 and 1. A node's probability is its stop probability times the
product of (continue x branch) factors along the path from the root, so the
whole-tree distribution telescopes to exactly one. High child entropy means
the depth networks cannot commit below a node, which is precisely when
stopping there (predicting out-of-distribution at that node) should be
likely.

The rest of the system depends only on the resulting distribution over all
nodes, so this fusion is a pluggable seam: any other rule that maps depth
outputs to a normalized node distribution could be swapped in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierarchy import Hierarchy

STOP_EPS = 1e-4


@dataclass(frozen=True)
class HierarchicalDistribution:
    """Probability per hierarchy node (root, internal nodes and leaves)."""

    probs: np.ndarray  # float64, length n_nodes

    def __len__(self) -> int:
        return len(self.probs)


def fuse_batch(depth_outputs: list[np.ndarray], hierarchy: Hierarchy, eps: float = STOP_EPS) -> np.ndarray:
    """Hierarchical node distributions for a batch, one row per sample.

    depth_outputs[d-1] holds the depth-d probabilities over depth space d,
    shaped (n, |space_d|); each row must sum to one.
    """
    if len(depth_outputs) != hierarchy.max_depth:
        raise ValueError(
            f"expected {hierarchy.max_depth} depth outputs, got {len(depth_outputs)}"
        )
    outputs = []
    for d, out in enumerate(depth_outputs, start=1):
        out = np.asarray(out, dtype=np.float64)
        if out.ndim == 1:
            out = out[None, :]
        if out.shape[1] != len(hierarchy.depth_space(d)):
            raise ValueError(
                f"depth {d} output has {out.shape[1]} classes, space has "
                f"{len(hierarchy.depth_space(d))}"
            )
        outputs.append(out)
    n = outputs[0].shape[0]
    if any(out.shape[0] != n for out in outputs):
        raise ValueError("depth outputs disagree on the batch size")

    probs = np.zeros((n, hierarchy.n_nodes))
    mass = np.zeros((n, hierarchy.n_nodes))
    mass[:, 0] = 1.0

    for a in hierarchy.topo_order:
        children = hierarchy.children[a]
        if not children:
            probs[:, a] = mass[:, a]  # leaves stop with probability one
            continue
        d = int(hierarchy.depths[a]) + 1
        branch = np.zeros((n, len(children)))
        for j, c in enumerate(children):
            col = hierarchy.space_index(c, d)
            if col >= 0:
                branch[:, j] = outputs[d - 1][:, col]
        total = branch.sum(axis=1, keepdims=True)
        uniform = total[:, 0] <= 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            branch = np.where(uniform[:, None], 1.0 / len(children), branch / total)

        if len(children) == 1:
            stop = np.full(n, eps)
        else:
            plogp = branch * np.log(np.where(branch > 0.0, branch, 1.0))
            stop = np.clip(-plogp.sum(axis=1) / np.log(len(children)), eps, 1.0 - eps)

        probs[:, a] = mass[:, a] * stop
        carried = mass[:, a] * (1.0 - stop)
        for j, c in enumerate(children):
            mass[:, c] = carried * branch[:, j]
    return probs


def fuse(depth_outputs: list[np.ndarray], hierarchy: Hierarchy, eps: float = STOP_EPS) -> HierarchicalDistribution:
    """Single-sample fusion; depth_outputs are vectors over the depth spaces."""
    return HierarchicalDistribution(fuse_batch(depth_outputs, hierarchy, eps)[0])


def predict_node(dist: HierarchicalDistribution | np.ndarray) -> int:
    """Argmax node; exact ties go to the smallest node id."""
    probs = dist.probs if isinstance(dist, HierarchicalDistribution) else np.asarray(dist)
    return int(np.argmax(probs))


def predict_nodes(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax over a batch of node distributions."""
    return np.argmax(probs, axis=1)


def subtree_confidences(probs: np.ndarray, hierarchy: Hierarchy) -> np.ndarray:
    """Per-node subtree probability sums, accumulated bottom-up.

    Accumulating child sums into the parent keeps the telescoping exact in
    floating point: a parent's value can never fall below any child's.
    """
    single = probs.ndim == 1
    conf = np.atleast_2d(np.asarray(probs, dtype=np.float64)).copy()
    for c in reversed(hierarchy.topo_order):
        p = hierarchy.parents[c]
        if p >= 0:
            conf[:, p] += conf[:, c]
    return conf[0] if single else conf


def root_to_node_path(hierarchy: Hierarchy, node: int) -> tuple[int, ...]:
    return hierarchy.ancestors_or_self(node)


def format_prediction_line(
    hierarchy: Hierarchy, sample_id: int, probs: np.ndarray, subtree_conf: np.ndarray
) -> str:
    """One prediction-dump row: id, argmax node, its probability, and the
    subtree-confidence chain along the root-to-argmax path."""
    node = predict_node(probs)
    chain = ",".join(f"{c}:{float(subtree_conf[c])!r}" for c in root_to_node_path(hierarchy, node))
    return f"{sample_id}\t{node}\t{float(probs[node])!r}\t{chain}"
