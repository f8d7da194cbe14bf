"""Security market model on an event tree.

A market is a riskless bond (predictable rate) plus N dividend-paying risky
assets.  Period-k payoffs attainable from period k-1 portfolios form the
payoff space L_k; the associated aggregate state price density M is the unique
process with M_0 = 1 that prices every instrument and whose one-period
restriction lies in the payoff span.  Markets whose aggregate SPD vanishes or
changes sign are rejected at construction.

The perturbed SPD Mtilde augments M with habit-weighted conditional
expectations of its future values; it is the effective marginal price of
habit-adjusted consumption and feeds the optimizer's first-order conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import MarketError, SchemaError
from .tree import (
    AdaptedProcess,
    EventTree,
    Partition,
    cond_expectation_arrays,
)

PRUNE_TOL = 1e-10      # relative tolerance for dropping dependent payoff columns
PRICE_TOL = 1e-10      # pricing-identity tolerance for the aggregate SPD


@dataclass
class Asset:
    """One risky security: positive price process and nonnegative dividends
    (paid at depths 1..T; the root dividend entry must be zero)."""

    name: str
    prices: AdaptedProcess
    dividends: AdaptedProcess

    def __post_init__(self):
        T = self.prices.tree.horizon
        if self.prices.depth != T or self.dividends.depth != T:
            raise SchemaError("assets", f"{self.name}: prices/dividends must cover depths 0..{T}")
        if np.any(self.prices.values <= 0.0):
            raise SchemaError("assets.prices", f"{self.name}: prices must be strictly positive")
        if np.any(self.dividends.values < 0.0):
            raise SchemaError("assets.dividends", f"{self.name}: dividends must be nonnegative")
        if abs(self.dividends.at_depth(0)[0]) != 0.0:
            raise SchemaError("assets.dividends", f"{self.name}: no dividend at the root")


@dataclass
class AtomBasis:
    """Pruned payoff basis of one depth-(k-1) atom: columns of `kept` are the
    independent payoff vectors on the atom's children (bond first), and
    `onb` spans the same space orthonormally under the conditional-probability
    inner product (numerically preferable for projections and solves)."""

    atom: int
    children: np.ndarray
    cond_probs: np.ndarray
    full: np.ndarray          # all instrument payoffs, bond column 0
    kept: np.ndarray
    kept_cols: tuple
    onb: np.ndarray

    @property
    def rank(self) -> int:
        return self.kept.shape[1]

    def projector(self) -> np.ndarray:
        """Orthogonal projection matrix onto the payoff span in the weighted
        inner product."""
        return self.onb @ (self.onb.T * self.cond_probs[None, :])


@dataclass
class MarketSpec:
    """Tree market: assets, predictable nonnegative interest, and optional
    conditioning structure (intermediate partitions H_k, idiosyncratic factor
    partitions F_k).  Construction validates the data and computes the
    aggregate SPD, rejecting markets without a strictly positive one."""

    tree: EventTree
    assets: tuple
    interest: AdaptedProcess
    classC: Optional[tuple] = None      # Partition per depth k=1..T
    idio: Optional[tuple] = None        # Partition per depth k=1..T (F_k)
    _bases: list = field(init=False, repr=False)
    _spd: AdaptedProcess = field(init=False, repr=False)

    def __post_init__(self):
        tree = self.tree
        self.assets = tuple(self.assets)
        T = tree.horizon
        if self.interest.depth != T:
            raise SchemaError("interest", f"must cover depths 0..{T}")
        if np.any(self.interest.values < 0.0):
            raise SchemaError("interest", "rates must be nonnegative")
        for k in range(1, T + 1):
            rk = self.interest.at_depth(k)
            pos = {int(n): j for j, n in enumerate(tree.depth_nodes[k])}
            for u in tree.depth_nodes[k - 1]:
                vals = rk[[pos[int(c)] for c in tree.children[int(u)]]]
                if np.max(vals) - np.min(vals) > 1e-12:
                    raise SchemaError("interest", f"rate not predictable below node {tree.ids[int(u)]}")
        for part_set, name in ((self.classC, "classC_blocks"), (self.idio, "idio_factor")):
            if part_set is not None:
                if len(part_set) != T:
                    raise SchemaError(name, f"need one partition per depth 1..{T}")
                for k, part in enumerate(part_set, start=1):
                    if part.depth != k:
                        raise SchemaError(name, f"partition {k} has depth {part.depth}")
                if name == "classC_blocks" and not all(p.is_intermediate() for p in part_set):
                    raise SchemaError(name, "blocks must refine the parent atoms")
        self._bases = [None] + [self._build_bases(k) for k in range(1, T + 1)]
        self._spd = compute_aggregate_spd(self)

    # payoff bases ----------------------------------------------------------

    def _build_bases(self, k: int) -> list:
        tree = self.tree
        out = []
        rk = self.interest.at_depth(k)
        pos = {int(n): j for j, n in enumerate(tree.depth_nodes[k])}
        payoff_rows = [1.0 + rk]
        for a in self.assets:
            payoff_rows.append(a.prices.at_depth(k) + a.dividends.at_depth(k))
        for u in tree.depth_nodes[k - 1]:
            kids = tree.children[int(u)]
            sel = [pos[int(c)] for c in kids]
            full = np.column_stack([row[sel] for row in payoff_rows])
            w = tree.trans_prob[kids]
            kept_cols, kept, onb = _prune_columns(full, w)
            out.append(AtomBasis(int(u), kids, w, full, kept, kept_cols, onb))
        return out

    def atom_bases(self, k: int) -> list:
        if not 1 <= k <= self.tree.horizon:
            raise ValueError(f"depth {k} outside 1..{self.tree.horizon}")
        return self._bases[k]

    @property
    def spd(self) -> AdaptedProcess:
        return self._spd

    def is_complete(self) -> bool:
        return all(b.rank == len(b.children)
                   for k in range(1, self.tree.horizon + 1) for b in self._bases[k])

    def deterministic_rate(self) -> bool:
        for k in range(1, self.tree.horizon + 1):
            rk = self.interest.at_depth(k)
            if np.max(rk) - np.min(rk) > 1e-12:
                return False
        return True


def _prune_columns(full: np.ndarray, w: np.ndarray):
    """Greedy weighted Gram-Schmidt keeping numerically independent columns
    (bond first) at relative tolerance PRUNE_TOL; also returns the weighted
    orthonormal basis of the kept span (with one re-orthogonalization pass)."""
    kept_cols, ortho = [], []
    for j in range(full.shape[1]):
        v = full[:, j].astype(float)
        norm0 = np.sqrt(np.sum(w * v * v))
        if norm0 == 0.0:
            continue
        r = v.copy()
        for _ in range(2):
            for q in ortho:
                r -= np.sum(w * q * r) * q
        norm_r = np.sqrt(np.sum(w * r * r))
        if norm_r > PRUNE_TOL * norm0:
            kept_cols.append(j)
            ortho.append(r / norm_r)
    onb = np.column_stack(ortho) if ortho else np.zeros((full.shape[0], 0))
    return tuple(kept_cols), full[:, list(kept_cols)], onb


def payoff_space_basis(market: MarketSpec, k: int) -> list:
    """Pruned payoff-space basis of L_k, one :class:`AtomBasis` per
    depth-(k-1) atom (bond vector first, dependent columns dropped)."""
    return market.atom_bases(k)


def project(market: MarketSpec, X: Union[AdaptedProcess, np.ndarray], k: int) -> np.ndarray:
    """Orthogonal projection of X onto the payoff space L_k under E[XY].

    X may be an adapted process at depth >= k (its deepest slice is first
    conditioned down to depth k) or a raw array over depth-k nodes.  Returns
    the projection as an array over depth-k nodes.
    """
    tree = market.tree
    if k < 1:
        raise ValueError("payoff spaces start at depth 1")
    if isinstance(X, AdaptedProcess):
        target = cond_expectation_arrays(tree, X.at_depth(X.depth), X.depth, k)
    else:
        target = np.asarray(X, dtype=float)
        if target.shape != (len(tree.depth_nodes[k]),):
            raise ValueError("array input must align with depth-k nodes")
    pos = {int(n): j for j, n in enumerate(tree.depth_nodes[k])}
    out = np.empty_like(target)
    for basis in market.atom_bases(k):
        sel = [pos[int(c)] for c in basis.children]
        t = target[sel]
        if basis.rank == 0:
            raise MarketError(
                f"empty payoff span at atom {tree.ids[basis.atom]} depth {k}")
        out[sel] = basis.onb @ (basis.onb.T @ (basis.cond_probs * t))
    return out


def compute_aggregate_spd(market: MarketSpec) -> AdaptedProcess:
    """Aggregate state price density: M_0 = 1, every instrument priced at
    every atom, and M_k's restriction inside the payoff span.

    Solved atom by atom going forward: the payoff-span coordinates of M_k on
    each atom satisfy a Gram moment system; prices of pruned (redundant)
    instruments are then verified.  Raises MarketError when no solution
    exists or the SPD vanishes/changes sign.
    """
    tree = market.tree
    slices = [np.array([1.0])]
    for k in range(1, tree.horizon + 1):
        prev = slices[k - 1]
        posp = {int(n): j for j, n in enumerate(tree.depth_nodes[k - 1])}
        cur = np.empty(len(tree.depth_nodes[k]))
        pos = {int(n): j for j, n in enumerate(tree.depth_nodes[k])}
        for basis in market.atom_bases(k):
            m_prev = prev[posp[basis.atom]]
            prices = np.array([1.0] + [a.prices.value_at(basis.atom) for a in market.assets])
            # moment system over the orthonormal span coordinates; the
            # unsquared least-squares solve avoids Gram-conditioning loss
            A = basis.full.T @ (basis.cond_probs[:, None] * basis.onb)
            theta, *_ = np.linalg.lstsq(A, prices * m_prev, rcond=None)
            m_kids = basis.onb @ theta
            # redundant instruments must be priced consistently, else no SPD
            implied = basis.full.T @ (basis.cond_probs * m_kids)
            gaps = np.abs(implied - prices * m_prev)
            scale = np.maximum(1.0, np.abs(prices * m_prev))
            if np.any(gaps > PRICE_TOL * scale):
                bad = int(np.argmax(gaps / scale))
                raise MarketError(
                    f"no aggregate SPD: instrument {bad} mispriced at atom "
                    f"{tree.ids[basis.atom]} depth {k} (gap {gaps[bad]:.3e})")
            sel = [pos[int(c)] for c in basis.children]
            cur[sel] = m_kids
        if np.any(cur <= 0.0):
            raise MarketError(
                f"aggregate SPD vanishes or changes sign at depth {k}; market rejected")
        slices.append(cur)
    return AdaptedProcess.from_depth_arrays(tree, slices)


def spd_edge_ratios(tree: EventTree, M: AdaptedProcess) -> np.ndarray:
    """Per-node array of M(node)/M(parent) (1.0 at the root)."""
    ratios = np.ones(tree.n_nodes)
    v = M.values
    for i in range(1, tree.n_nodes):
        ratios[i] = v[i] / v[tree.parent[i]]
    return ratios


# -- perturbed SPD ------------------------------------------------------------


def static_habit_matrix(beta: float, horizon: int) -> np.ndarray:
    """Habit coefficients for last-period habits: beta on the first
    subdiagonal, zero elsewhere."""
    mat = np.zeros((horizon + 1, horizon + 1))
    for k in range(1, horizon + 1):
        mat[k, k - 1] = beta
    return mat


def _check_habits(habits: np.ndarray, horizon: int) -> np.ndarray:
    habits = np.asarray(habits, dtype=float)
    if habits.shape != (horizon + 1, horizon + 1):
        raise SchemaError("beta_matrix", f"expected shape {(horizon + 1, horizon + 1)}")
    if np.any(habits < 0.0):
        raise SchemaError("beta_matrix", "habit coefficients must be nonnegative")
    if np.any(np.triu(habits) != 0.0):
        raise SchemaError("beta_matrix", "habit matrix must be strictly lower triangular")
    return habits


def perturbed_spd(M: AdaptedProcess, habits: Union[float, np.ndarray]) -> AdaptedProcess:
    """Perturbed aggregate SPD.

    Computed by the backward recursion
    ``Mtilde_k = M_k + sum_{m>k} beta^(m)_k E[Mtilde_m | G_k]``
    (for static habits this is ``Mtilde_k = M_k + beta E[Mtilde_{k+1}|G_k]``),
    which unrolls to the habit-chain multi-sum over E[M_l | G_k].
    """
    tree = M.tree
    T = M.depth
    if np.isscalar(habits):
        habits = static_habit_matrix(float(habits), T)
    habits = _check_habits(habits, T)
    slices = [M.at_depth(k).copy() for k in range(T + 1)]
    tilde = [None] * (T + 1)
    tilde[T] = slices[T]
    # running[m] holds E[Mtilde_m | G_level] while level walks backward
    running = {T: tilde[T]}
    for k in range(T - 1, -1, -1):
        for m in list(running):
            running[m] = cond_expectation_arrays(tree, running[m], k + 1, k)
        acc = slices[k]
        for m in range(k + 1, T + 1):
            b = habits[m, k]
            if b != 0.0:
                acc = acc + b * running[m]
        tilde[k] = acc
        running[k] = tilde[k]
    return AdaptedProcess.from_depth_arrays(tree, tilde)


@dataclass
class SpdPair:
    """Aggregate SPD together with its habit-perturbed companion."""

    M: AdaptedProcess
    Mtilde: AdaptedProcess

    def __post_init__(self):
        if abs(self.M.at_depth(0)[0] - 1.0) > 1e-12:
            raise MarketError("aggregate SPD must be normalized to M_0 = 1")
        if np.any(self.M.values == 0.0):
            raise MarketError("aggregate SPD must be nonzero at every node")
        if np.any(self.Mtilde.values < self.M.values - 1e-12):
            raise MarketError("perturbed SPD below aggregate SPD despite nonnegative habits")


def spd_pair(market: MarketSpec, habits: Union[float, np.ndarray]) -> SpdPair:
    M = market.spd
    return SpdPair(M, perturbed_spd(M, habits))


# -- pricing utilities ---------------------------------------------------------


def present_value(tree: EventTree, M: AdaptedProcess, payments: AdaptedProcess, k: int) -> np.ndarray:
    """sum_{n>k} E[(M_n/M_k) payments_n | G_k] over depth-k nodes (payments
    at depths k+1..T; the depth-k slice itself is not included)."""
    T = payments.depth
    ratios = spd_edge_ratios(tree, M)
    v = np.zeros(len(tree.depth_nodes[T]))
    for n in range(T, k, -1):
        pay = payments.at_depth(n)
        pos = {int(c): j for j, c in enumerate(tree.depth_nodes[n])}
        nxt = np.empty(len(tree.depth_nodes[n - 1]))
        for j, u in enumerate(tree.depth_nodes[n - 1]):
            kids = tree.children[int(u)]
            sel = [pos[int(c)] for c in kids]
            nxt[j] = np.sum(tree.trans_prob[kids] * ratios[kids] * (pay[sel] + v[sel]))
        v = nxt
    return v


def expectation(tree: EventTree, values: np.ndarray, k: int) -> float:
    """Unconditional expectation of a depth-k variable."""
    p = tree.probabilities()
    return float(np.sum(p[tree.depth_nodes[k]] * values))


# -- market classification -----------------------------------------------------


@dataclass
class MarketClassification:
    """Constructively verified labels plus the intermediate partitions that
    witness the class-C property (explicit or derived)."""

    labels: frozenset
    classC_partitions: Optional[tuple] = None

    def __contains__(self, label: str) -> bool:
        return label in self.labels


def _condexp_matrix(blocks, w: np.ndarray, index_of) -> np.ndarray:
    n = len(w)
    E = np.zeros((n, n))
    for b in blocks:
        sel = [index_of[i] for i in b]
        wb = w[sel]
        E[np.ix_(sel, sel)] = np.tile(wb / wb.sum(), (len(sel), 1))
    return E


def _derive_intermediate(market: MarketSpec, k: int) -> Optional[Partition]:
    """Find H_k with projection = conditional expectation onto H_k, if the
    per-atom payoff projectors have exact block structure."""
    tree = market.tree
    blocks_all = []
    for basis in market.atom_bases(k):
        w = basis.cond_probs
        proj = basis.projector()
        n = len(basis.children)
        # candidate blocks from the projector's support pattern
        labels = list(range(n))
        for i in range(n):
            for j in range(i + 1, n):
                if abs(proj[i, j]) > 1e-8 or abs(proj[j, i]) > 1e-8:
                    li, lj = labels[i], labels[j]
                    labels = [li if l == lj else l for l in labels]
        groups = {}
        for i, l in enumerate(labels):
            groups.setdefault(l, []).append(i)
        blocks = [tuple(int(basis.children[i]) for i in g) for g in groups.values()]
        index_of = {int(basis.children[i]): i for i in range(n)}
        if np.max(np.abs(proj - _condexp_matrix(blocks, w, index_of))) > 1e-10:
            return None
        blocks_all.extend(blocks)
    return Partition(tree, k, tuple(blocks_all))


def _verify_classC(market: MarketSpec, partitions: Sequence[Partition]) -> bool:
    tree = market.tree
    for k in range(1, tree.horizon + 1):
        part = partitions[k - 1]
        if not part.is_intermediate():
            return False
        pos = {int(n): j for j, n in enumerate(tree.depth_nodes[k])}
        bidx = {}
        for b in part.blocks:
            for i in b:
                bidx[i] = b
        for basis in market.atom_bases(k):
            w = basis.cond_probs
            proj = basis.projector()
            index_of = {int(c): i for i, c in enumerate(basis.children)}
            blocks = {tuple(bidx[int(c)]) for c in basis.children}
            E = _condexp_matrix(list(blocks), w, index_of)
            if np.max(np.abs(proj - E)) > 1e-10:
                return False
    return True


def _verify_idiosyncratic(market: MarketSpec) -> bool:
    """Definition check: securities adapted to F, F-claims replicable, and
    E[X|G_k] = E[X|F_k] on a basis of the depth-(k+1) factor claims."""
    if market.idio is None:
        return False
    tree = market.tree
    T = tree.horizon
    p = tree.probabilities()
    for k in range(1, T + 1):
        part = market.idio[k - 1]
        bidx = part.block_index()
        pos = {int(n): j for j, n in enumerate(tree.depth_nodes[k])}
        payoffs = [1.0 + market.interest.at_depth(k)]
        for a in market.assets:
            payoffs.append(a.prices.at_depth(k) + a.dividends.at_depth(k))
        for row in payoffs:
            for b in part.blocks:
                sel = [pos[i] for i in b]
                if np.max(row[sel]) - np.min(row[sel]) > 1e-10:
                    return False
        # replicability of factor claims: project block indicators onto L_k
        for bi, b in enumerate(part.blocks):
            ind = (bidx == bi).astype(float)
            if np.max(np.abs(project(market, ind, k) - ind)) > 1e-10:
                return False
    # conditional independence on indicators of F_{k+1}
    for k in range(0, T):
        part_next = market.idio[k]
        nodes_k = tree.depth_nodes[k]
        for b in part_next.blocks:
            pb = sum(node_prob for node_prob in p[list(b)])
            for u in nodes_k:
                desc = tree.descendants_at(int(u), k + 1)
                inb = [d for d in desc if int(d) in set(b)]
                cond_g = sum(p[d] for d in inb) / p[int(u)]
                if k == 0:
                    cond_f = pb
                else:
                    part_k = market.idio[k - 1]
                    fblock = next(blk for blk in part_k.blocks if int(u) in blk)
                    num = 0.0
                    for fu in fblock:
                        dd = tree.descendants_at(int(fu), k + 1)
                        num += sum(p[d] for d in dd if int(d) in set(b))
                    cond_f = num / sum(p[i] for i in fblock)
                if abs(cond_g - cond_f) > 1e-12:
                    return False
    return True


def validate_market_class(market: MarketSpec) -> MarketClassification:
    """Classify the market, verifying each label constructively.

    Labels: 'complete', 'classC' (projection equals conditional expectation
    onto an intermediate partition, explicit or derived), 'idiosyncratic'
    (explicit factor filtration satisfying the definition), and
    'deterministic-rate'.  When nothing holds the label is {'general'}.
    """
    tree = market.tree
    labels = set()
    partitions = None
    if market.is_complete():
        labels.add("complete")
        labels.add("classC")
        partitions = tuple(Partition.singletons(tree, k) for k in range(1, tree.horizon + 1))
    if market.classC is not None and _verify_classC(market, market.classC):
        labels.add("classC")
        partitions = tuple(market.classC)
    if "classC" not in labels:
        derived = [_derive_intermediate(market, k) for k in range(1, tree.horizon + 1)]
        if all(d is not None for d in derived) and _verify_classC(market, derived):
            labels.add("classC")
            partitions = tuple(derived)
    if _verify_idiosyncratic(market):
        labels.add("idiosyncratic")
    if market.deterministic_rate():
        labels.add("deterministic-rate")
    if not labels:
        labels.add("general")
    return MarketClassification(frozenset(labels), partitions)


def intermediate_partitions(market: MarketSpec) -> tuple:
    """The H_k partitions used by hedging and the bound recursions: explicit
    class-C blocks, else derived ones, else sigma(G_{k-1}, F_k) from an
    idiosyncratic factor structure."""
    cls = validate_market_class(market)
    if cls.classC_partitions is not None:
        return cls.classC_partitions
    if market.idio is not None:
        tree = market.tree
        parts = []
        for k in range(1, tree.horizon + 1):
            fidx = {}
            for bi, b in enumerate(market.idio[k - 1].blocks):
                for i in b:
                    fidx[i] = bi
            blocks = {}
            for v in tree.depth_nodes[k]:
                key = (int(tree.parent[int(v)]), fidx[int(v)])
                blocks.setdefault(key, []).append(int(v))
            parts.append(Partition(tree, k, tuple(tuple(b) for b in blocks.values())))
        return tuple(parts)
    raise MarketError("market has no class-C structure (explicit, derived or factor-based)")


# -- complete-market synthesis ---------------------------------------------------


def complete_market_from_spd(tree: EventTree, M: AdaptedProcess) -> MarketSpec:
    """Build a complete market whose aggregate SPD is exactly M.

    Bond rate from one-period bond pricing; risky assets pay 1 plus a
    child-slot indicator dividend each period, with prices backed out of the
    SPD.  Requires the implied rates to be nonnegative.
    """
    T = tree.horizon
    max_branch = max(len(tree.children[int(u)]) for u in range(tree.n_nodes)
                     if len(tree.children[int(u)]) > 0) if T > 0 else 1
    # child-slot index per node (position among siblings)
    slot = np.zeros(tree.n_nodes, dtype=int)
    for u in range(tree.n_nodes):
        for j, c in enumerate(tree.children[u]):
            slot[int(c)] = j
    r_slices = [np.zeros(1)]
    for k in range(1, T + 1):
        mk = M.at_depth(k)
        mprev = M.at_depth(k - 1)
        pos = {int(n): j for j, n in enumerate(tree.depth_nodes[k])}
        rk = np.empty(len(tree.depth_nodes[k]))
        for j, u in enumerate(tree.depth_nodes[k - 1]):
            kids = tree.children[int(u)]
            disc = np.sum(tree.trans_prob[kids] * mk[[pos[int(c)] for c in kids]]) / mprev[j]
            if disc > 1.0 + 1e-12:
                raise MarketError("SPD implies a negative interest rate; cannot synthesize market")
            rk[[pos[int(c)] for c in kids]] = 1.0 / disc - 1.0
        r_slices.append(rk)
    interest = AdaptedProcess.from_depth_arrays(tree, r_slices)

    ratios = spd_edge_ratios(tree, M)
    assets = []
    for j in range(max(1, max_branch - 1)):
        div_slices = [np.zeros(1)]
        for k in range(1, T + 1):
            nodes = tree.depth_nodes[k]
            div_slices.append(1.0 + (slot[nodes] == j + 1).astype(float))
        price_slices = [None] * (T + 1)
        price_slices[T] = np.ones(len(tree.depth_nodes[T]))
        for k in range(T - 1, -1, -1):
            nxt = price_slices[k + 1] + div_slices[k + 1]
            pos = {int(n): jj for jj, n in enumerate(tree.depth_nodes[k + 1])}
            cur = np.empty(len(tree.depth_nodes[k]))
            for jj, u in enumerate(tree.depth_nodes[k]):
                kids = tree.children[int(u)]
                cur[jj] = np.sum(tree.trans_prob[kids] * ratios[kids] * nxt[[pos[int(c)] for c in kids]])
            price_slices[k] = cur
        assets.append(Asset(f"slot{j + 1}",
                            AdaptedProcess.from_depth_arrays(tree, price_slices),
                            AdaptedProcess.from_depth_arrays(tree, div_slices)))
    return MarketSpec(tree, tuple(assets), interest)
