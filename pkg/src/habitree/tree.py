"""Finite event trees and the measure-theoretic primitives built on them.

A rooted tree with transition probabilities is the whole probability model:
depth-k nodes are the atoms of the period-k information set, the filtration
is the sequence of depth partitions, and every random process is one number
per node (an :class:`AdaptedProcess`).  Coarser conditioning structures
(intermediate sigma-algebras, idiosyncratic factor filtrations) are
:class:`Partition` objects over the nodes of one depth.

Conventions
-----------
* Nodes are stored in breadth-first order, so the nodes of depths <= d form a
  prefix of the index range; an adapted process over periods 0..d is a flat
  array over that prefix.
* Probabilities are stored as parent->child transition probabilities;
  unconditional atom probabilities are recomputed on demand as products along
  the root path (no renormalization drift).
* Comparisons use absolute tolerance 1e-12 on order-one quantities unless a
  caller overrides.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import SchemaError

PROB_TOL = 1e-12


@dataclass
class EventTree:
    """Rooted finite probability tree with depth-indexed filtration.

    Attributes
    ----------
    ids : tuple of str
        External node identifiers, breadth-first order (root first).
    parent : ndarray of int
        Parent index per node, -1 for the root.
    trans_prob : ndarray of float
        Transition probability from the parent, in (0, 1]; 1.0 at the root.
    horizon : int
        Number of periods T; all leaves sit at depth T.
    """

    ids: tuple
    parent: np.ndarray
    trans_prob: np.ndarray
    horizon: int
    depth: np.ndarray = field(init=False)
    children: list = field(init=False)
    depth_nodes: list = field(init=False)

    def __post_init__(self):
        n = len(self.ids)
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.trans_prob = np.asarray(self.trans_prob, dtype=np.float64)
        if len(set(self.ids)) != n:
            raise SchemaError("nodes.id", "duplicate node ids")
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1 or roots[0] != 0:
            raise SchemaError("nodes.parent", "exactly one root, stored first")
        depth = np.zeros(n, dtype=np.int64)
        for i in range(1, n):
            p = self.parent[i]
            if not 0 <= p < i:
                raise SchemaError("nodes.parent", "nodes must be breadth-first ordered")
            depth[i] = depth[p] + 1
        self.depth = depth
        if np.any((self.trans_prob <= 0.0) | (self.trans_prob > 1.0)):
            raise SchemaError("nodes.prob", "transition probabilities must lie in (0, 1]")
        self.children = [np.flatnonzero(self.parent == i) for i in range(n)]
        if self.horizon != int(depth.max()):
            raise SchemaError("horizon", f"horizon {self.horizon} != deepest node depth {int(depth.max())}")
        for i in range(n):
            kids = self.children[i]
            if len(kids) == 0:
                if depth[i] != self.horizon:
                    raise SchemaError("nodes", f"leaf {self.ids[i]} at depth {depth[i]} < horizon")
            else:
                psum = self.trans_prob[kids].sum()
                if abs(psum - 1.0) > PROB_TOL:
                    raise SchemaError("nodes.prob", f"children of {self.ids[i]} sum to {psum!r}")
        self.depth_nodes = [np.flatnonzero(depth == k) for k in range(self.horizon + 1)]
        self._index = {nid: i for i, nid in enumerate(self.ids)}
        for arr in (self.parent, self.trans_prob, self.depth):
            arr.setflags(write=False)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_edges(cls, nodes: Iterable, horizon: Optional[int] = None) -> "EventTree":
        """Build a tree from (id, parent_id or None, transition_prob) triples.

        Input order is free; nodes are re-sorted breadth-first.
        """
        raw = list(nodes)
        by_id = {}
        for nid, pid, prob in raw:
            if nid in by_id:
                raise SchemaError("nodes.id", f"duplicate id {nid!r}")
            by_id[nid] = (pid, float(prob))
        roots = [nid for nid, (pid, _) in by_id.items() if pid is None]
        if len(roots) != 1:
            raise SchemaError("nodes.parent", f"need exactly one root, got {len(roots)}")
        kids = {}
        for nid, (pid, _) in by_id.items():
            if pid is not None:
                if pid not in by_id:
                    raise SchemaError("nodes.parent", f"unknown parent {pid!r} of {nid!r}")
                kids.setdefault(pid, []).append(nid)
        order, frontier = [roots[0]], [roots[0]]
        while frontier:
            nxt = []
            for nid in frontier:
                nxt.extend(kids.get(nid, []))
            order.extend(nxt)
            frontier = nxt
        if len(order) != len(by_id):
            raise SchemaError("nodes.parent", "cycle or unreachable nodes")
        pos = {nid: i for i, nid in enumerate(order)}
        parent = np.array([-1 if by_id[n][0] is None else pos[by_id[n][0]] for n in order])
        prob = np.array([1.0 if by_id[n][0] is None else by_id[n][1] for n in order])
        depth_max = 0
        d = {order[0]: 0}
        for n in order[1:]:
            d[n] = d[by_id[n][0]] + 1
            depth_max = max(depth_max, d[n])
        return cls(tuple(order), parent, prob, horizon if horizon is not None else depth_max)

    @classmethod
    def single_path(cls, horizon: int) -> "EventTree":
        """Deterministic tree: one node per period."""
        nodes = [("n0", None, 1.0)]
        nodes += [(f"n{k}", f"n{k - 1}", 1.0) for k in range(1, horizon + 1)]
        return cls.from_edges(nodes, horizon)

    @classmethod
    def uniform(cls, horizon: int, branching: int,
                probs: Optional[Sequence[float]] = None) -> "EventTree":
        """Regular tree with the same branching and child probabilities at
        every non-leaf node."""
        if probs is None:
            probs = [1.0 / branching] * branching
        if len(probs) != branching:
            raise SchemaError("probs", "one probability per child required")
        nodes = [("r", None, 1.0)]
        frontier = ["r"]
        for k in range(horizon):
            nxt = []
            for nid in frontier:
                for j in range(branching):
                    cid = f"{nid}.{j}" if nid != "r" else f"{j}"
                    nodes.append((cid, nid, float(probs[j])))
                    nxt.append(cid)
            frontier = nxt
        return cls.from_edges(nodes, horizon)

    # -- queries -------------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.ids)

    def index(self, node_id: str) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise SchemaError("node", f"unknown node id {node_id!r}") from None

    def n_upto(self, depth: int) -> int:
        """Number of nodes at depths <= depth (the BFS prefix length)."""
        return sum(len(self.depth_nodes[k]) for k in range(depth + 1))

    def ancestor(self, node: int, at_depth: int) -> int:
        d = int(self.depth[node])
        if at_depth > d:
            raise ValueError("ancestor depth beyond node depth")
        while d > at_depth:
            node = int(self.parent[node])
            d -= 1
        return node

    def ancestor_matrix(self) -> np.ndarray:
        """anc[i, l] = ancestor of node i at depth l (or -1 for l > depth(i))."""
        anc = np.full((self.n_nodes, self.horizon + 1), -1, dtype=np.int64)
        for i in range(self.n_nodes):
            d = int(self.depth[i])
            anc[i, d] = i
            j = i
            for l in range(d - 1, -1, -1):
                j = int(self.parent[j])
                anc[i, l] = j
        return anc

    def probabilities(self) -> np.ndarray:
        """Unconditional atom probabilities, recomputed as root-path products."""
        p = np.ones(self.n_nodes)
        for i in range(1, self.n_nodes):
            p[i] = p[self.parent[i]] * self.trans_prob[i]
        return p

    def descendants_at(self, node: int, depth: int) -> np.ndarray:
        """Indices of depth-`depth` descendants of `node` (itself if equal depth)."""
        cur = np.array([node], dtype=np.int64)
        for _ in range(depth - int(self.depth[node])):
            cur = np.concatenate([self.children[int(i)] for i in cur]) if len(cur) else cur
        return cur


def node_probability(tree: EventTree, node) -> float:
    """Unconditional probability of a node's atom (product of transition
    probabilities along the root path).  `node` may be an id or an index."""
    i = tree.index(node) if isinstance(node, str) else int(node)
    if not 0 <= i < tree.n_nodes:
        raise SchemaError("node", f"unknown node index {node!r}")
    p = 1.0
    while i >= 0:
        p *= tree.trans_prob[i]
        i = tree.parent[i]
    return p


@dataclass
class AdaptedProcess:
    """One real value per node for every depth up to `depth`.

    Adaptedness is structural: the depth-k slice is the period-k random
    variable.  Values are stored flat over the BFS prefix of the tree.
    """

    tree: EventTree
    depth: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        want = self.tree.n_upto(self.depth)
        if self.values.shape != (want,):
            raise SchemaError("process", f"expected {want} values for depth {self.depth}, "
                                         f"got {self.values.shape}")
        self.values.setflags(write=False)

    @classmethod
    def constant(cls, tree: EventTree, value: float, depth: Optional[int] = None) -> "AdaptedProcess":
        d = tree.horizon if depth is None else depth
        return cls(tree, d, np.full(tree.n_upto(d), float(value)))

    @classmethod
    def from_depth_arrays(cls, tree: EventTree, arrays: Sequence[np.ndarray]) -> "AdaptedProcess":
        return cls(tree, len(arrays) - 1, np.concatenate([np.asarray(a, dtype=float) for a in arrays]))

    def at_depth(self, k: int) -> np.ndarray:
        lo = self.tree.n_upto(k - 1) if k > 0 else 0
        return self.values[lo:self.tree.n_upto(k)]

    def value_at(self, node) -> float:
        i = self.tree.index(node) if isinstance(node, str) else int(node)
        return float(self.values[i])

    def __mul__(self, scalar: float) -> "AdaptedProcess":
        return AdaptedProcess(self.tree, self.depth, self.values * float(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "AdaptedProcess":
        return AdaptedProcess(self.tree, self.depth, self.values / float(scalar))


@dataclass
class Partition:
    """Grouping of same-depth nodes into disjoint covering blocks.

    Represents a sub-sigma-algebra of the depth-`depth` information set:
    an intermediate sigma-algebra between consecutive depths, or an
    idiosyncratic factor sigma-algebra (whose blocks may span sibling
    groups; use :meth:`is_intermediate` when the former is required).
    """

    tree: EventTree
    depth: int
    blocks: tuple

    def __post_init__(self):
        self.blocks = tuple(tuple(int(i) for i in b) for b in self.blocks)
        want = set(int(i) for i in self.tree.depth_nodes[self.depth])
        seen = set()
        for b in self.blocks:
            if not b:
                raise SchemaError("partition", "empty block")
            for i in b:
                if i not in want:
                    raise SchemaError("partition", f"node {i} not at depth {self.depth}")
                if i in seen:
                    raise SchemaError("partition", f"node {i} in two blocks")
                seen.add(i)
        if seen != want:
            raise SchemaError("partition", "blocks do not cover the depth")

    @classmethod
    def trivial(cls, tree: EventTree, depth: int) -> "Partition":
        return cls(tree, depth, (tuple(int(i) for i in tree.depth_nodes[depth]),))

    @classmethod
    def singletons(cls, tree: EventTree, depth: int) -> "Partition":
        return cls(tree, depth, tuple((int(i),) for i in tree.depth_nodes[depth]))

    @classmethod
    def sibling_groups(cls, tree: EventTree, depth: int) -> "Partition":
        """Blocks = children groups of each depth-(k-1) node (the depth-(k-1)
        information set viewed at depth k)."""
        if depth == 0:
            return cls.trivial(tree, 0)
        blocks = tuple(tuple(int(c) for c in tree.children[int(u)])
                       for u in tree.depth_nodes[depth - 1])
        return cls(tree, depth, blocks)

    @classmethod
    def from_node_ids(cls, tree: EventTree, depth: int, id_blocks) -> "Partition":
        return cls(tree, depth, tuple(tuple(tree.index(i) for i in b) for b in id_blocks))

    def block_index(self) -> np.ndarray:
        """Map depth-k node index -> block number."""
        out = {}
        for bi, b in enumerate(self.blocks):
            for i in b:
                out[i] = bi
        return np.array([out[int(i)] for i in self.tree.depth_nodes[self.depth]])

    def is_intermediate(self) -> bool:
        """True when each block sits inside one sibling group, i.e. the
        generated sigma-algebra contains the depth-(k-1) information set."""
        if self.depth == 0:
            return True
        for b in self.blocks:
            parents = {int(self.tree.parent[i]) for i in b}
            if len(parents) != 1:
                return False
        return True

    def refines(self, other: "Partition") -> bool:
        """True when every block of self lies inside a block of other."""
        owner = {}
        for bi, b in enumerate(other.blocks):
            for i in b:
                owner[i] = bi
        return all(len({owner[i] for i in b}) == 1 for b in self.blocks)


# -- conditioning operations -------------------------------------------------


def _aggregate_one_level(tree: EventTree, values: np.ndarray, k: int) -> np.ndarray:
    """E[X | depth k-1] for X given on depth-k nodes, via transition weights."""
    out = np.empty(len(tree.depth_nodes[k - 1]))
    pos = {int(n): j for j, n in enumerate(tree.depth_nodes[k])}
    for j, u in enumerate(tree.depth_nodes[k - 1]):
        kids = tree.children[int(u)]
        out[j] = float(np.sum(tree.trans_prob[kids] * values[[pos[int(c)] for c in kids]]))
    return out


def cond_expectation_arrays(tree: EventTree, values_m: np.ndarray, m: int, k: int) -> np.ndarray:
    """E[X_m | G_k] as an array over depth-k nodes."""
    if k > m:
        raise ValueError(f"cannot condition depth {m} data on finer depth {k}")
    cur = np.asarray(values_m, dtype=float)
    for j in range(m, k, -1):
        cur = _aggregate_one_level(tree, cur, j)
    return cur


def cond_expectation(tree: EventTree, process: AdaptedProcess, k: int) -> AdaptedProcess:
    """Conditional expectation of the deepest slice of `process` onto depth k.

    Returns the martingale closure (E[X | G_j])_{j<=k} as an adapted process,
    so the depth-k slice is E[X | G_k] and the tower property is composition.
    """
    m = process.depth
    if k > m:
        raise ValueError(f"cannot condition depth {m} process on finer depth {k}")
    cur = process.at_depth(m).copy()
    for j in range(m, k, -1):
        cur = _aggregate_one_level(tree, cur, j)
    slices = [cur]
    for j in range(k, 0, -1):
        cur = _aggregate_one_level(tree, cur, j)
        slices.append(cur)
    slices.reverse()
    return AdaptedProcess.from_depth_arrays(tree, slices)


def _blockwise(tree: EventTree, process: AdaptedProcess, partition: Partition, reducer) -> np.ndarray:
    m = process.depth
    if partition.depth > m:
        raise ValueError("partition depth exceeds process depth")
    vals = process.at_depth(m)
    pos = {int(n): j for j, n in enumerate(tree.depth_nodes[m])}
    out = np.empty(len(tree.depth_nodes[partition.depth]))
    posk = {int(n): j for j, n in enumerate(tree.depth_nodes[partition.depth])}
    for b in partition.blocks:
        desc = np.concatenate([tree.descendants_at(i, m) for i in b])
        v = reducer(vals[[pos[int(d)] for d in desc]], desc)
        for i in b:
            out[posk[i]] = v
    return out


def cond_esssup(tree: EventTree, process: AdaptedProcess, partition: Partition) -> np.ndarray:
    """Blockwise essential supremum of the deepest slice of `process`,
    returned as an array over the partition's depth (constant on blocks)."""
    return _blockwise(tree, process, partition, lambda v, _: float(np.max(v)))


def cond_essinf(tree: EventTree, process: AdaptedProcess, partition: Partition) -> np.ndarray:
    """Blockwise essential infimum; see :func:`cond_esssup`."""
    return _blockwise(tree, process, partition, lambda v, _: float(np.min(v)))


def cond_expectation_on(tree: EventTree, process: AdaptedProcess, partition: Partition) -> np.ndarray:
    """Conditional expectation onto the sigma-algebra generated by a
    partition: blockwise probability-weighted average of the deepest slice."""
    p = tree.probabilities()

    def mean(vals, desc):
        w = p[desc]
        return float(np.sum(w * vals) / np.sum(w))

    return _blockwise(tree, process, partition, mean)
