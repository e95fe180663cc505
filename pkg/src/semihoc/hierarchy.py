"""Rooted class-tree representation and tree algebra.

A hierarchy is a rooted tree over dense integer node ids 0..n-1 (root is 0).
Leaf nodes carrying labeled training data form the ID class set; internal
nodes are the possible out-of-distribution prediction targets. On top of the
tree we build, for each depth d in 1..D:

* the classification space at depth d: nodes at exactly depth d, plus ID
  leaves that sit shallower than d (so every depth head can always place an
  ID sample somewhere);
* the relatives-at-depth mapping: the ancestors-or-self and descendants of a
  node intersected with the depth-d space;
* the uniform target distribution over that mapping, used as the
  cross-entropy target when a sample is supervised at node granularity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class HierarchyError(ValueError):
    """Raised for malformed hierarchy structures or files."""


@dataclass(frozen=True)
class DepthSpace:
    """Ordered classification space at one depth (ascending node id)."""

    depth: int
    nodes: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.nodes)

    def index_of(self, node: int) -> int:
        return self.nodes.index(node)


@dataclass(frozen=True)
class TargetDistribution:
    """Probability vector over one DepthSpace, uniform on its support."""

    depth: int
    probs: np.ndarray  # float64 over the DepthSpace ordering

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.probs))


class Hierarchy:
    """Immutable rooted class tree with precomputed tree algebra.

    Parameters
    ----------
    parents : parent id per node; exactly the root (id 0) has parent -1.
    names : one unique name per node.
    id_leaves : ids of the in-distribution classes; must all be leaves and
        must not cover every node.
    """

    def __init__(self, parents, names, id_leaves):
        parents = np.asarray(parents, dtype=np.int64)
        self.parents = parents
        self.names = tuple(names)
        self.id_leaves = frozenset(int(c) for c in id_leaves)
        self.n_nodes = len(parents)
        self._validate_shape()

        self.depths = self._compute_depths()
        self.max_depth = int(self.depths.max())
        children: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for c in range(1, self.n_nodes):
            children[parents[c]].append(c)
        self.children = tuple(tuple(ch) for ch in children)
        self.leaves = frozenset(c for c in range(self.n_nodes) if not self.children[c])
        self._validate_id_set()

        # Topological order with parents before children (root first).
        self.topo_order = tuple(int(i) for i in np.argsort(self.depths, kind="stable"))
        self._depth_spaces = tuple(
            DepthSpace(d, self._depth_space_members(d)) for d in range(1, self.max_depth + 1)
        )
        # node -> column index inside each depth space, -1 when absent
        self._space_index = np.full((self.max_depth, self.n_nodes), -1, dtype=np.int64)
        for d, space in enumerate(self._depth_spaces, start=1):
            for j, c in enumerate(space.nodes):
                self._space_index[d - 1, c] = j

    # -- construction helpers -------------------------------------------------

    def _validate_shape(self) -> None:
        if self.n_nodes < 2:
            raise HierarchyError("hierarchy needs a root and at least one more node")
        if len(self.names) != self.n_nodes:
            raise HierarchyError("names/parents length mismatch")
        if len(set(self.names)) != self.n_nodes:
            raise HierarchyError("node names must be unique")
        if self.parents[0] != -1:
            raise HierarchyError("root must be node 0 with parent -1")
        if np.count_nonzero(self.parents == -1) != 1:
            raise HierarchyError("exactly one root allowed")
        bad = [c for c in range(1, self.n_nodes) if not 0 <= self.parents[c] < self.n_nodes]
        if bad:
            raise HierarchyError(f"node {bad[0]} has an invalid parent id")

    def _compute_depths(self) -> np.ndarray:
        depths = np.full(self.n_nodes, -1, dtype=np.int64)
        depths[0] = 0
        for c in range(self.n_nodes):
            path = []
            node = c
            while depths[node] < 0:
                path.append(node)
                node = int(self.parents[node])
                if len(path) > self.n_nodes:
                    raise HierarchyError("parent links contain a cycle")
            base = depths[node]
            for k, p in enumerate(reversed(path), start=1):
                depths[p] = base + k
        return depths

    def _validate_id_set(self) -> None:
        for c in self.id_leaves:
            if not 0 <= c < self.n_nodes:
                raise HierarchyError(f"ID class id {c} out of range")
            if c not in self.leaves:
                raise HierarchyError(f"ID class {self.names[c]!r} is not a leaf")
        if not self.id_leaves:
            raise HierarchyError("at least one ID class required")
        if len(self.id_leaves) == self.n_nodes:
            raise HierarchyError("ID classes must be a strict subset of the nodes")

    def _depth_space_members(self, d: int) -> tuple[int, ...]:
        members = [c for c in range(self.n_nodes) if self.depths[c] == d]
        members += [c for c in self.id_leaves if self.depths[c] < d]
        return tuple(sorted(members))

    # -- basic queries ---------------------------------------------------------

    def _check_node(self, c: int) -> int:
        c = int(c)
        if not 0 <= c < self.n_nodes:
            raise ValueError(f"invalid node id {c}")
        return c

    def is_leaf(self, c: int) -> bool:
        return self._check_node(c) in self.leaves

    def name_to_id(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    def ancestors_or_self(self, c: int) -> tuple[int, ...]:
        """Path from the root down to c, inclusive."""
        c = self._check_node(c)
        path = []
        while c != -1:
            path.append(c)
            c = int(self.parents[c])
        return tuple(reversed(path))

    def ancestor_at_depth(self, c: int, d: int) -> int:
        c = self._check_node(c)
        if not 0 <= d <= self.depths[c]:
            raise ValueError(f"node {c} has no ancestor at depth {d}")
        while self.depths[c] > d:
            c = int(self.parents[c])
        return c

    def subtree(self, c: int) -> frozenset[int]:
        """The node together with all of its descendants."""
        c = self._check_node(c)
        out = [c]
        stack = [c]
        while stack:
            for ch in self.children[stack.pop()]:
                out.append(ch)
                stack.append(ch)
        return frozenset(out)

    def lca(self, a: int, b: int) -> int:
        """Deepest node that is an ancestor-or-self of both arguments."""
        a, b = self._check_node(a), self._check_node(b)
        while self.depths[a] > self.depths[b]:
            a = int(self.parents[a])
        while self.depths[b] > self.depths[a]:
            b = int(self.parents[b])
        while a != b:
            a = int(self.parents[a])
            b = int(self.parents[b])
        return a

    def tree_distance(self, a: int, b: int) -> int:
        """Number of edges on the path between two nodes."""
        anc = self.lca(a, b)
        return int(self.depths[a] + self.depths[b] - 2 * self.depths[anc])

    # -- depth spaces and targets ----------------------------------------------

    def _check_depth(self, d: int) -> int:
        d = int(d)
        if not 1 <= d <= self.max_depth:
            raise ValueError(f"depth {d} out of range 1..{self.max_depth}")
        return d

    def depth_space(self, d: int) -> DepthSpace:
        return self._depth_spaces[self._check_depth(d) - 1]

    def space_index(self, c: int, d: int) -> int:
        """Column of node c inside depth space d, or -1 when absent."""
        return int(self._space_index[self._check_depth(d) - 1, self._check_node(c)])

    def s_mapping(self, c: int, d: int) -> frozenset[int]:
        """Ancestors-or-self and descendants of c present at depth d."""
        c = self._check_node(c)
        d = self._check_depth(d)
        relatives = self.subtree(c) | set(self.ancestors_or_self(c))
        return frozenset(relatives & set(self.depth_space(d).nodes))

    def target_distribution(self, c: int, d: int) -> TargetDistribution | None:
        """Uniform distribution over s_mapping(c, d); None when that is empty."""
        support = self.s_mapping(c, d)
        if not support:
            return None
        space = self.depth_space(d)
        probs = np.zeros(len(space), dtype=np.float64)
        mass = 1.0 / len(support)
        for node in support:
            probs[self._space_index[d - 1, node]] = mass
        return TargetDistribution(d, probs)

    def target_matrix(self, nodes, d: int) -> np.ndarray:
        """Stacked target rows for several nodes at one depth.

        Rows for nodes with an empty mapping at this depth are all-zero, so
        they contribute nothing to a cross-entropy sum.
        """
        space = self.depth_space(d)
        out = np.zeros((len(nodes), len(space)), dtype=np.float64)
        for i, c in enumerate(nodes):
            t = self.target_distribution(c, d)
            if t is not None:
                out[i] = t.probs
        return out

    def summary(self) -> str:
        n_internal = self.n_nodes - len(self.leaves)
        lines = [
            f"nodes: {self.n_nodes}",
            f"max depth: {self.max_depth}",
            f"leaves: {len(self.leaves)} (ID classes: {len(self.id_leaves)})",
            f"internal nodes: {n_internal}",
            "depth space sizes: "
            + ", ".join(f"d{d}={len(self.depth_space(d))}" for d in range(1, self.max_depth + 1)),
        ]
        return "\n".join(lines)


# -- text format ----------------------------------------------------------------

def load_hierarchy(path) -> Hierarchy:
    """Load the tab-separated edge-list format.

    One `child<TAB>parent` line per non-root node, then a line `#id`
    followed by one ID class name per line. Node ids are assigned densely:
    root is 0, the remaining nodes are numbered in file order.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()

    edges: list[tuple[str, str]] = []
    id_names: list[str] = []
    section = "edges"
    for lineno, line in enumerate(raw_lines, start=1):
        line = line.strip()
        if not line:
            continue
        if line == "#id":
            if section == "ids":
                raise HierarchyError(f"line {lineno}: duplicate #id section")
            section = "ids"
            continue
        if section == "edges":
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise HierarchyError(f"line {lineno}: expected 'child<TAB>parent'")
            edges.append((parts[0], parts[1]))
        else:
            id_names.append(line)

    if section != "ids":
        raise HierarchyError("missing #id section")
    if not edges:
        raise HierarchyError("no edges found")

    child_names = [c for c, _ in edges]
    if len(set(child_names)) != len(child_names):
        dup = next(c for c in child_names if child_names.count(c) > 1)
        raise HierarchyError(f"node {dup!r} defined more than once")
    parent_names = {p for _, p in edges}
    roots = parent_names - set(child_names)
    if len(roots) != 1:
        raise HierarchyError(f"expected exactly one root, found {sorted(roots)}")
    root = roots.pop()

    ids = {root: 0}
    for c, _ in edges:
        ids[c] = len(ids)
    names = [None] * len(ids)
    parents = np.full(len(ids), -1, dtype=np.int64)
    names[0] = root
    for c, p in edges:
        names[ids[c]] = c
        parents[ids[c]] = ids[p]

    id_leaves = []
    for name in id_names:
        if name not in ids:
            raise HierarchyError(f"ID class {name!r} does not appear in the tree")
        id_leaves.append(ids[name])
    return Hierarchy(parents, names, id_leaves)


def save_hierarchy(hierarchy: Hierarchy, path) -> None:
    """Write the edge-list format; inverse of load_hierarchy."""
    lines = []
    for c in range(1, hierarchy.n_nodes):
        lines.append(f"{hierarchy.names[c]}\t{hierarchy.names[hierarchy.parents[c]]}")
    lines.append("#id")
    lines.extend(hierarchy.names[c] for c in sorted(hierarchy.id_leaves))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def hierarchy_bytes(hierarchy: Hierarchy) -> bytes:
    """Canonical file content of a hierarchy, used for content hashing."""
    import io

    buf = io.StringIO()
    for c in range(1, hierarchy.n_nodes):
        buf.write(f"{hierarchy.names[c]}\t{hierarchy.names[hierarchy.parents[c]]}\n")
    buf.write("#id\n")
    for c in sorted(hierarchy.id_leaves):
        buf.write(f"{hierarchy.names[c]}\n")
    return buf.getvalue().encode("utf-8")


def hierarchy_hash(hierarchy: Hierarchy) -> int:
    from .rng import fnv1a_64

    return fnv1a_64(hierarchy_bytes(hierarchy))


def example_tree() -> Hierarchy:
    """Seven-node animal tree used throughout the tests and docs."""
    names = ["Root", "Mammal", "Bird", "Cat", "Dog", "Eagle", "Junco"]
    parents = [-1, 0, 0, 1, 1, 2, 2]
    return Hierarchy(parents, names, id_leaves=[3, 4, 5, 6])


def random_tree(rng: np.random.Generator, n_nodes: int, recent_bias: int = 5) -> Hierarchy:
    """Random hierarchy for property tests; every leaf is an ID class.

    Each node attaches to a random earlier node, biased toward recent ones
    so trees get several levels instead of being star-shaped.
    """
    if n_nodes < 3:
        n_nodes = 3
    parents = np.full(n_nodes, -1, dtype=np.int64)
    for c in range(1, n_nodes):
        if c == 1 or rng.random() < 0.3:
            parents[c] = 0 if c == 1 else int(rng.integers(0, c))
        else:
            parents[c] = int(rng.integers(max(0, c - recent_bias), c))
    names = [f"n{i}" for i in range(n_nodes)]
    has_child = set(int(p) for p in parents[1:])
    leaves = [c for c in range(n_nodes) if c not in has_child]
    return Hierarchy(parents, names, id_leaves=leaves)
