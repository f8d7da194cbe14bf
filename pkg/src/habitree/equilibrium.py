"""Arrow-Debreu equilibria under last-period habits in complete markets.

Every agent in the economy carries the same static habit coefficient beta;
the market is complete, so the equilibrium is an SPD plus consumption
processes that clear the market period by period.

* Homogeneous (one type): the SPD has a closed form driven by the
  habit-adjusted aggregate surpluses; existence is equivalent to two
  nodewise inequalities on the endowment.
* Geometric-random-walk endowments: zero-coupon bonds and the Lucas tree
  (equity paying the aggregate endowment) reduce to moment formulas in the
  growth distribution; both are increasing convex in beta, with an analytic
  bond derivative.
* Heterogeneous: inverting the aggregated first-order conditions node by
  node yields candidate SPDs g(lambda) for any positive agent weights; a
  damped multiplicative tatonnement on the excess demand h drives the budget
  gaps to zero on the unit simplex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .errors import ConditionError, ConvergenceError, SchemaError
from .market import perturbed_spd
from .tree import AdaptedProcess, EventTree, cond_expectation_arrays

WEIGHT_TOL = 1e-10          # target sup-norm of the excess demand
MARGIN_TOL = 1e-10          # strictness margin for existence conditions
MAX_TATONNEMENT = 500


@dataclass
class EconomyAgent:
    gamma: float
    rho: float
    endowment: AdaptedProcess

    def __post_init__(self):
        if self.gamma <= 0.0 or self.gamma == 1.0:
            raise SchemaError("gamma", "power utility needs gamma > 0 and gamma != 1")
        if np.any(self.endowment.values < 0.0):
            raise SchemaError("endowment", "endowments must be nonnegative")


@dataclass
class EconomySpec:
    """Complete-market economy: one tree, one common static habit beta, and
    agents differing in risk aversion, impatience and endowments."""

    tree: EventTree
    beta: float
    agents: tuple

    def __post_init__(self):
        self.agents = tuple(self.agents)
        if self.beta < 0.0:
            raise SchemaError("beta", "habit coefficient must be nonnegative")
        if not self.agents:
            raise SchemaError("agents", "need at least one agent")
        T = self.tree.horizon
        for a in self.agents:
            if a.endowment.depth != T or a.endowment.tree is not self.tree:
                raise SchemaError("agents.endowment", "endowments must live on the economy tree")
        agg = np.sum([a.endowment.values for a in self.agents], axis=0)
        if np.any(agg <= 0.0):
            raise SchemaError("agents.endowment", "aggregate endowment must be strictly positive")
        self.aggregate = AdaptedProcess(self.tree, T, agg)

    @property
    def n_agents(self) -> int:
        return len(self.agents)


@dataclass
class EquilibriumResult:
    M: AdaptedProcess
    Mtilde: AdaptedProcess
    lambdas: tuple
    consumptions: tuple
    residuals: dict
    walras_history: tuple = ()
    iterations: int = 0
    method: str = "closed-form"


def surplus_slices(tree: EventTree, eps: AdaptedProcess, beta: float) -> list:
    """Habit-adjusted endowment surpluses eps_k - beta*eps_{k-1} per depth
    (period 0: the endowment itself)."""
    out = [eps.at_depth(0).copy()]
    for k in range(1, tree.horizon + 1):
        nodes = tree.depth_nodes[k]
        out.append(eps.at_depth(k) - beta * eps.values[tree.parent[nodes]])
    return out


def _cond_exp_to_parent(tree: EventTree, arr: np.ndarray, k: int) -> np.ndarray:
    return cond_expectation_arrays(tree, arr, k, k - 1)


@dataclass
class ConditionsReport:
    holds: bool
    surplus_margin: float        # min of eps_k - beta*eps_{k-1}
    foc_margin: float            # min of the conditional-moment inequality
    sufficient_margin: float     # min margin of the one-step sufficient condition
    near_boundary: bool


def homogeneous_conditions(economy: EconomySpec) -> ConditionsReport:
    """Existence conditions for the one-type equilibrium: positive aggregate
    surpluses and the conditional-moment inequality
    (eps_{k-1}-beta*eps_{k-2})^-g > beta e^-rho E[(eps_k-beta*eps_{k-1})^-g|G_{k-1}],
    plus the simpler sufficient condition
    eps_k > beta*eps_{k-1} + beta^{1/g} e^{-rho/g} (eps_{k-1}-beta*eps_{k-2})."""
    if economy.n_agents != 1:
        raise ConditionError("homogeneous analysis needs exactly one agent type")
    tree = economy.tree
    agent = economy.agents[0]
    beta, g, rho = economy.beta, agent.gamma, agent.rho
    eps = economy.aggregate
    T = tree.horizon
    s = surplus_slices(tree, eps, beta)
    surplus_margin = min(float(np.min(s[k])) for k in range(T + 1))
    foc_margin = math.inf
    suff_margin = math.inf
    if surplus_margin > 0.0:
        for k in range(1, T + 1):
            lhs = s[k - 1] ** (-g)
            rhs = beta * math.exp(-rho) * _cond_exp_to_parent(tree, s[k] ** (-g), k)
            foc_margin = min(foc_margin, float(np.min(lhs - rhs)))
            prev = eps.values[tree.parent[tree.depth_nodes[k]]]
            suff = eps.at_depth(k) - beta * prev \
                - beta ** (1.0 / g) * math.exp(-rho / g) * s[k - 1][_parent_pos(tree, k)]
            suff_margin = min(suff_margin, float(np.min(suff)))
    else:
        foc_margin = -math.inf
        suff_margin = -math.inf
    holds = surplus_margin > MARGIN_TOL and foc_margin > MARGIN_TOL
    near = holds and min(surplus_margin, foc_margin) <= 100 * MARGIN_TOL
    return ConditionsReport(holds, surplus_margin, foc_margin, suff_margin, near)


def _parent_pos(tree: EventTree, k: int) -> np.ndarray:
    """Positions of the parents of depth-k nodes inside the depth-(k-1) slice."""
    parents = tree.parent[tree.depth_nodes[k]]
    pos = {int(n): j for j, n in enumerate(tree.depth_nodes[k - 1])}
    return np.array([pos[int(p)] for p in parents])


def homogeneous_spd(economy: EconomySpec) -> EquilibriumResult:
    """Closed-form equilibrium SPD of the one-type economy.

    M_k = e^{-rho k} ((s_k)^-g - beta e^-rho E[(s_{k+1})^-g | G_k]) / denom
    with s_k the aggregate surplus, the k = T term dropping the continuation,
    and denom normalizing M_0 = 1.  Market clearing consumption is the
    endowment itself; its first-order conditions under the perturbed SPD hold
    exactly and are reported as a residual.
    """
    report = homogeneous_conditions(economy)
    if not report.holds:
        raise ConditionError(
            f"equilibrium existence conditions fail: surplus margin "
            f"{report.surplus_margin:.3e}, moment margin {report.foc_margin:.3e}")
    tree = economy.tree
    agent = economy.agents[0]
    beta, g, rho = economy.beta, agent.gamma, agent.rho
    eps = economy.aggregate
    T = tree.horizon
    s = surplus_slices(tree, eps, beta)
    spow = [sk ** (-g) for sk in s]
    denom = float(spow[0][0]) - beta * math.exp(-rho) * float(
        np.sum(tree.trans_prob[tree.depth_nodes[1]] * spow[1])) if T >= 1 else float(spow[0][0])
    slices = [np.array([1.0])]
    for k in range(1, T + 1):
        if k < T:
            cont = beta * math.exp(-rho) * cond_expectation_arrays(tree, spow[k + 1], k + 1, k)
            num = spow[k] - cont
        else:
            num = spow[T]
        slices.append(math.exp(-rho * k) * num / denom)
    M = AdaptedProcess.from_depth_arrays(tree, slices)
    if np.any(M.values <= 0.0):
        raise ConditionError("closed-form SPD not strictly positive; conditions violated numerically")
    Mt = perturbed_spd(M, beta)
    res = _static_foc_residual(tree, Mt, eps, beta, g, rho)
    return EquilibriumResult(
        M=M, Mtilde=Mt, lambdas=(1.0,), consumptions=(eps,),
        residuals={"clearing": 0.0, "budget": 0.0, "foc": res, "h_inf": 0.0})


def _static_foc_residual(tree: EventTree, Mt: AdaptedProcess, c: AdaptedProcess,
                         beta: float, g: float, rho: float) -> float:
    """Relative violation of (c_k - beta c_{k-1})^-g = e^rho (Mt_k/Mt_{k-1})
    (c_{k-1} - beta c_{k-2})^-g."""
    s = surplus_slices(tree, c, beta)
    worst = 0.0
    for k in range(1, tree.horizon + 1):
        nodes = tree.depth_nodes[k]
        lhs = s[k] ** (-g)
        ratio = Mt.at_depth(k) / Mt.values[tree.parent[nodes]]
        rhs = math.exp(rho) * ratio * s[k - 1][_parent_pos(tree, k)] ** (-g)
        worst = max(worst, float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(lhs), np.abs(rhs)))))
    return worst


# -- geometric-random-walk economies ---------------------------------------------


@dataclass
class IIDEconomy:
    """One-type economy whose aggregate endowment multiplies by i.i.d.
    positive growth factors each period (eps_0 = 1)."""

    support: tuple               # ((x_j, p_j), ...)
    gamma: float
    rho: float
    beta: float
    horizon: int

    def __post_init__(self):
        self.support = tuple((float(x), float(p)) for x, p in self.support)
        if not self.support:
            raise SchemaError("support", "empty growth distribution")
        if abs(sum(p for _, p in self.support) - 1.0) > 1e-12:
            raise SchemaError("support", "probabilities must sum to 1")
        if any(p <= 0.0 for _, p in self.support):
            raise SchemaError("support", "probabilities must be positive")
        if self.gamma <= 0.0 or self.gamma == 1.0:
            raise SchemaError("gamma", "power utility needs gamma > 0 and gamma != 1")
        if self.horizon < 1:
            raise SchemaError("horizon", "need at least one period")
        floor = self.beta + self.beta ** (1.0 / self.gamma) * math.exp(-self.rho / self.gamma)
        if self.beta < 0.0 or any(x <= floor for x, _ in self.support):
            raise SchemaError("beta", f"growth support must exceed beta + beta^(1/gamma)"
                                      f" e^(-rho/gamma) = {floor:.6g}")

    def with_beta(self, beta: float) -> "IIDEconomy":
        return IIDEconomy(self.support, self.gamma, self.rho, beta, self.horizon)

    def moment(self, f: Callable[[float], float]) -> float:
        return float(sum(p * f(x) for x, p in self.support))

    def tree_economy(self) -> EconomySpec:
        """Materialize the non-recombining growth tree with its aggregate
        endowment (support size ** horizon leaves)."""
        m = len(self.support)
        tree = EventTree.uniform(self.horizon, m, [p for _, p in self.support])
        slot = np.zeros(tree.n_nodes, dtype=int)
        for u in range(tree.n_nodes):
            for j, c in enumerate(tree.children[u]):
                slot[int(c)] = j
        vals = np.ones(tree.n_nodes)
        xs = [x for x, _ in self.support]
        for i in range(1, tree.n_nodes):
            vals[i] = vals[tree.parent[i]] * xs[slot[i]]
        eps = AdaptedProcess(tree, self.horizon, vals)
        return EconomySpec(tree, self.beta, (EconomyAgent(self.gamma, self.rho, eps),))

    def growth_at(self, tree: EventTree, k: int) -> np.ndarray:
        """X_k per depth-k node (the last growth factor on the node's path)."""
        nodes = tree.depth_nodes[k]
        xs = [x for x, _ in self.support]
        out = np.empty(len(nodes))
        for j, v in enumerate(nodes):
            parent = int(tree.parent[int(v)])
            slot = list(tree.children[parent]).index(int(v))
            out[j] = xs[slot]
        return out


def _bond_moments(econ: IIDEconomy):
    g, rho, b = econ.gamma, econ.rho, econ.beta
    G = econ.moment(lambda x: x ** (-g))
    A = econ.moment(lambda x: (x - b) ** (-g))
    D = 1.0 - b * math.exp(-rho) * A
    return G, A, D


def bond_price(econ: IIDEconomy, k: int, n: int, x_k: Optional[float] = None) -> float:
    """Zero-coupon bond price E[M_n/M_k | G_k] in closed form.

    For k >= 1 the price depends on the period-k growth factor, passed as
    x_k.  Derived from the homogeneous SPD; verified against tree sums.
    """
    T = econ.horizon
    if not 0 <= k <= n <= T:
        raise ValueError("need 0 <= k <= n <= horizon")
    if k == n:
        return 1.0
    g, rho, b = econ.gamma, econ.rho, econ.beta
    G, A, D = _bond_moments(econ)
    if k == 0:
        num = math.exp(-rho * n) * G ** (n - 1) * A
        if n < T:
            num *= 1.0 - b * math.exp(-rho) * G
        return num / D
    if x_k is None:
        raise ValueError("bond prices at k >= 1 need the period-k growth factor x_k")
    denom_k = (1.0 - b / x_k) ** (-g) - b * math.exp(-rho) * A
    num = math.exp(-rho * (n - k)) * G ** (n - k - 1) * A
    if n < T:
        num *= 1.0 - b * math.exp(-rho) * G
    return num / denom_k


def bond_curve(econ: IIDEconomy, T: int, beta_grid: Sequence[float]) -> list:
    """Rows (beta, B(0, T)) for each beta on the grid; each beta is validated
    against the growth-support condition."""
    rows = []
    for b in beta_grid:
        e = IIDEconomy(econ.support, econ.gamma, econ.rho, float(b), T)
        rows.append((float(b), bond_price(e, 0, T)))
    return rows


def bond_derivative_beta(econ: IIDEconomy, T: int, beta: float, order: int = 1) -> float:
    """Analytic d/dbeta (or d^2/dbeta^2) of the maturity-T zero-coupon price.

    With A = E[(X-beta)^-g], A' = g E[(X-beta)^-g-1], A'' = g(g+1)E[(X-beta)^-g-2]
    and D = 1 - beta e^-rho A:
    first derivative  e^{-rho T} G^{T-1} (A' + e^-rho A^2) / D^2,
    second derivative e^{-rho T} G^{T-1} ((A''+2e^-rho A A')D
                       + 2(A'+e^-rho A^2)(e^-rho A + beta e^-rho A')) / D^3.
    Both are positive: the bond price is increasing and convex in beta.
    """
    e = econ.with_beta(beta) if beta != econ.beta else econ
    g, rho, b = e.gamma, e.rho, beta
    G = e.moment(lambda x: x ** (-g))
    A = e.moment(lambda x: (x - b) ** (-g))
    A1 = g * e.moment(lambda x: (x - b) ** (-g - 1.0))
    D = 1.0 - b * math.exp(-rho) * A
    lead = math.exp(-rho * T) * G ** (T - 1)
    if order == 1:
        return lead * (A1 + math.exp(-rho) * A * A) / D ** 2
    if order == 2:
        A2 = g * (g + 1.0) * e.moment(lambda x: (x - b) ** (-g - 2.0))
        num = (A2 + 2.0 * math.exp(-rho) * A * A1) * D \
            + 2.0 * (A1 + math.exp(-rho) * A * A) * (math.exp(-rho) * A + b * math.exp(-rho) * A1)
        return lead * num / D ** 3
    raise ValueError("order must be 1 or 2")


def long_run_yield(econ: IIDEconomy) -> float:
    """T -> infinity yield of the zero-coupon bond: rho - log E[X^-gamma];
    independent of the habit coefficient."""
    return econ.rho - math.log(econ.moment(lambda x: x ** (-econ.gamma)))


def _lucas_pieces(econ: IIDEconomy):
    g, rho, b = econ.gamma, econ.rho, econ.beta
    H = econ.moment(lambda x: x ** (1.0 - g))
    A = econ.moment(lambda x: (x - b) ** (-g))
    B1 = econ.moment(lambda x: x * (x - b) ** (-g))
    D = 1.0 - b * math.exp(-rho) * A
    return H, A, B1, D


def _geom_sum(q: float, terms: int) -> float:
    """sum_{j=0}^{terms-1} q^j."""
    if terms <= 0:
        return 0.0
    if abs(q - 1.0) < 1e-15:
        return float(terms)
    return (1.0 - q ** terms) / (1.0 - q)


def lucas_price(econ: IIDEconomy, k: int, T: Optional[int] = None,
                eps_k: float = 1.0, x_k: Optional[float] = None) -> float:
    """Lucas tree price sum_{n>k} E[(M_n/M_k) eps_n | G_k] in closed form.

    For k = 0 the price is deterministic; for k >= 1 it scales with eps_k and
    depends on the period-k growth factor x_k.  Derived by splitting the
    defining sum at the final period (whose SPD slice has no continuation
    term); matches defining tree sums for every rho.
    """
    T = econ.horizon if T is None else T
    if not 0 <= k <= T:
        raise ValueError("need 0 <= k <= horizon")
    if k == T:
        return 0.0
    e = econ if T == econ.horizon else IIDEconomy(econ.support, econ.gamma, econ.rho, econ.beta, T)
    g, rho, b = e.gamma, e.rho, e.beta
    H, A, B1, D = _lucas_pieces(e)
    q = math.exp(-rho) * H
    inner = (B1 - b * math.exp(-rho) * H * A) * math.exp(-rho) * _geom_sum(q, T - k - 1) \
        + math.exp(-rho * (T - k)) * H ** (T - k - 1) * B1
    if k == 0:
        return inner / D
    if x_k is None:
        raise ValueError("Lucas prices at k >= 1 need the period-k growth factor x_k")
    denom_k = (1.0 - b / x_k) ** (-g) - b * math.exp(-rho) * A
    return eps_k * inner / denom_k


def lucas_longrun(econ: IIDEconomy) -> float:
    """T -> infinity Lucas tree price at period 0; finite when
    e^-rho E[X^{1-gamma}] < 1."""
    g, rho, b = econ.gamma, econ.rho, econ.beta
    H, A, B1, D = _lucas_pieces(econ)
    q = math.exp(-rho) * H
    if q >= 1.0:
        raise ConditionError(f"long-run Lucas price diverges: e^-rho E[X^(1-gamma)] = {q:.6g} >= 1")
    return (B1 - b * math.exp(-rho) * H * A) * math.exp(-rho) / ((1.0 - q) * D)


def lucas_curve(econ: IIDEconomy, beta_grid: Sequence[float]) -> list:
    """Rows (beta, long-run Lucas price)."""
    rows = []
    for b in beta_grid:
        rows.append((float(b), lucas_longrun(econ.with_beta(float(b)))))
    return rows


@dataclass
class SensitivityReport:
    increasing: bool
    convex: bool
    derivative_positive: Optional[bool]
    second_derivative_positive: Optional[bool]
    max_derivative_rel_gap: Optional[float]


def beta_sensitivity(curve: Callable[[float], float], beta_grid: Sequence[float],
                     analytic_derivative: Optional[Callable[[float], float]] = None,
                     analytic_second: Optional[Callable[[float], float]] = None,
                     fd_step: float = 1e-5) -> SensitivityReport:
    """Monotonicity/convexity of a beta-curve on a grid, with an optional
    analytic-vs-centered-finite-difference derivative check (relative gap;
    interior points only)."""
    grid = [float(b) for b in beta_grid]
    if len(grid) < 10:
        raise ValueError("grid too coarse for sensitivity checks (need >= 10 points)")
    vals = [curve(b) for b in grid]
    increasing = all(b > a for a, b in zip(vals, vals[1:]))
    convex = all(vals[i + 1] <= 0.5 * (vals[i] + vals[i + 2]) + 1e-12
                 for i in range(len(vals) - 2))
    dpos = spos = gap = None
    if analytic_derivative is not None:
        dvals = [analytic_derivative(b) for b in grid]
        dpos = all(d > 0.0 for d in dvals)
        gap = 0.0
        for b, d in zip(grid[1:-1], dvals[1:-1]):
            fd = (curve(b + fd_step) - curve(b - fd_step)) / (2.0 * fd_step)
            gap = max(gap, abs(fd - d) / max(abs(d), 1e-300))
    if analytic_second is not None:
        spos = all(analytic_second(b) > 0.0 for b in grid)
    return SensitivityReport(increasing, convex, dpos, spos, gap)


# -- heterogeneous equilibrium -----------------------------------------------------


def heterogeneous_conditions(economy: EconomySpec) -> ConditionsReport:
    """Sufficient existence conditions for the many-type economy: beta below
    one, positive aggregate surpluses (required by the nodewise inversion),
    and beta E[max_j s_k^{-gamma_j} | G_{k-1}] < min_j e^{-rho_j} s_{k-1}^{-gamma_j}."""
    tree = economy.tree
    beta = economy.beta
    eps = economy.aggregate
    T = tree.horizon
    s = surplus_slices(tree, eps, beta)
    surplus_margin = min(float(np.min(s[k])) for k in range(T + 1))
    scale_margin = float(np.min((1.0 - beta) * eps.values))
    moment_margin = math.inf
    if surplus_margin > 0.0:
        for k in range(1, T + 1):
            worst = np.max([s[k] ** (-a.gamma) for a in economy.agents], axis=0)
            lhs = beta * _cond_exp_to_parent(tree, worst, k)
            rhs = np.min([math.exp(-a.rho) * s[k - 1] ** (-a.gamma) for a in economy.agents], axis=0)
            moment_margin = min(moment_margin, float(np.min(rhs - lhs)))
    else:
        moment_margin = -math.inf
    holds = (scale_margin > MARGIN_TOL and surplus_margin > MARGIN_TOL
             and moment_margin > MARGIN_TOL)
    near = holds and min(scale_margin, surplus_margin, moment_margin) <= 100 * MARGIN_TOL
    return ConditionsReport(holds, min(surplus_margin, scale_margin), moment_margin,
                            math.inf, near)


def _solve_weight_equation(economy: EconomySpec, lam: np.ndarray, k: int,
                           rhs: float) -> float:
    """Unique y > 0 with sum_i lam_i^{1/g_i} e^{-(rho_i/g_i)k} y^{-1/g_i} = rhs.

    The map is strictly decreasing; brackets come from the single-agent
    bounds, refined by safeguarded Newton to 1e-13 relative.
    """
    agents = economy.agents
    N = len(agents)
    coef = [lam[i] ** (1.0 / a.gamma) * math.exp(-(a.rho / a.gamma) * k)
            for i, a in enumerate(agents)]
    lo = max(lam[i] * math.exp(-a.rho * k) * rhs ** (-a.gamma) for i, a in enumerate(agents))
    hi = max(lam[i] * math.exp(-a.rho * k) * (N / rhs) ** a.gamma for i, a in enumerate(agents))
    lo, hi = min(lo, hi), max(lo, hi)

    def f(y):
        return sum(c * y ** (-1.0 / a.gamma) for c, a in zip(coef, agents)) - rhs

    def fprime(y):
        return sum(-c / a.gamma * y ** (-1.0 / a.gamma - 1.0) for c, a in zip(coef, agents))

    # solve to machine precision: small agent weights divide the budget gap,
    # so any slack here caps the attainable excess-demand accuracy
    y = math.sqrt(lo * hi)
    for _ in range(200):
        fy = f(y)
        if abs(fy) <= 4e-16 * rhs:
            break
        if fy > 0.0:
            lo = y
        else:
            hi = y
        step = fy / fprime(y)
        y_new = y - step
        if not (lo < y_new < hi):
            y_new = math.sqrt(lo * hi)
        if abs(y_new - y) <= 4e-16 * y:
            y = y_new
            break
        y = y_new
    else:
        raise ConvergenceError(f"weight-equation root solve stalled at period {k}")
    return y


@dataclass
class DemandSystem:
    """Candidate (non-normalized) SPD g, perturbed companion gtilde, agent
    consumptions, and the excess demand at given weights."""

    g: list
    gtilde: list
    consumptions: list
    h: np.ndarray


def excess_demand(economy: EconomySpec, lam: Sequence[float]) -> DemandSystem:
    """Excess demand h(lambda) of the heterogeneous economy.

    Backward pass: gtilde_k solves the aggregated first-order equation at
    each depth-k node, g_k = gtilde_k - beta E[gtilde_{k+1} | G_k] (g_T =
    gtilde_T).  Forward pass: c^i_k = beta c^i_{k-1} +
    e^{-(rho_i/g_i) k} gtilde_k^{-1/g_i} lam_i^{1/g_i}.  Then
    h_i = (sum_k E[g_k c^i_k] - sum_k E[g_k eps^i_k]) / lam_i: the scaled
    budget gap, zero for every agent exactly at equilibrium.  Walras' law
    sum_i lam_i h_i = 0 holds identically.
    """
    tree = economy.tree
    T = tree.horizon
    beta = economy.beta
    lam = np.asarray([float(l) for l in lam])
    if np.any(lam <= 0.0):
        raise ValueError("agent weights must be strictly positive")
    s = surplus_slices(tree, economy.aggregate, beta)
    if min(float(np.min(sk)) for sk in s) <= 0.0:
        raise ConditionError("aggregate habit surplus not positive; weight equation unsolvable")
    gtilde = [None] * (T + 1)
    g = [None] * (T + 1)
    for k in range(T, -1, -1):
        nodes = tree.depth_nodes[k]
        gt = np.array([_solve_weight_equation(economy, lam, k, float(s[k][j]))
                       for j in range(len(nodes))])
        gtilde[k] = gt
        if k == T:
            g[k] = gt
        else:
            g[k] = gt - beta * _cond_exp_to_parent(tree, gtilde[k + 1], k + 1)
        if np.any(g[k] <= 0.0):
            raise ConditionError(
                f"candidate SPD nonpositive at depth {k}; existence conditions violated")
    consumptions = []
    for i, a in enumerate(economy.agents):
        surp = [math.exp(-(a.rho / a.gamma) * k) * gtilde[k] ** (-1.0 / a.gamma)
                * lam[i] ** (1.0 / a.gamma) for k in range(T + 1)]
        slices = [surp[0]]
        for k in range(1, T + 1):
            prev = slices[k - 1][_parent_pos(tree, k)]
            slices.append(beta * prev + surp[k])
        consumptions.append(AdaptedProcess.from_depth_arrays(tree, slices))
    p = tree.probabilities()
    h = np.empty(len(economy.agents))
    for i, a in enumerate(economy.agents):
        gap = 0.0
        for k in range(T + 1):
            nodes = tree.depth_nodes[k]
            gap += float(np.sum(p[nodes] * g[k]
                                * (consumptions[i].at_depth(k) - a.endowment.at_depth(k))))
        h[i] = gap / lam[i]
    return DemandSystem(g, gtilde, consumptions, h)


def _result_from_weights(economy: EconomySpec, lam: np.ndarray, system: DemandSystem,
                         walras: tuple, iterations: int, method: str) -> EquilibriumResult:
    tree = economy.tree
    g0 = float(system.g[0][0])
    M = AdaptedProcess.from_depth_arrays(tree, [gk / g0 for gk in system.g])
    Mt = AdaptedProcess.from_depth_arrays(tree, [gk / g0 for gk in system.gtilde])
    p = tree.probabilities()
    clearing = float(np.max(np.abs(
        np.sum([c.values for c in system.consumptions], axis=0) - economy.aggregate.values)))
    budget = 0.0
    foc = 0.0
    for i, a in enumerate(economy.agents):
        gap = float(np.sum(p * M.values * (system.consumptions[i].values - a.endowment.values)))
        budget = max(budget, abs(gap))
        foc = max(foc, _static_foc_residual(tree, Mt, system.consumptions[i],
                                            economy.beta, a.gamma, a.rho))
    return EquilibriumResult(
        M=M, Mtilde=Mt, lambdas=tuple(float(l) for l in lam),
        consumptions=tuple(system.consumptions),
        residuals={"clearing": clearing, "budget": budget, "foc": foc,
                   "h_inf": float(np.max(np.abs(system.h)))},
        walras_history=walras, iterations=iterations, method=method)


def heterogeneous_equilibrium(economy: EconomySpec, tol: float = WEIGHT_TOL,
                              max_iter: int = MAX_TATONNEMENT) -> EquilibriumResult:
    """Find positive agent weights on the unit simplex with vanishing excess
    demand, then assemble the equilibrium.

    Damped multiplicative tatonnement lam_i <- lam_i exp(kappa h_i/(1+|h_i|)),
    renormalized to the simplex each step, kappa halved on oscillation; after
    `max_iter` steps a derivative-free root finder on the simplex interior
    takes over.  Scale is unidentified (h is homogeneous of degree zero), so
    the simplex normalization is exact, not a restriction.
    """
    cond = heterogeneous_conditions(economy)
    if not cond.holds:
        raise ConditionError(
            f"heterogeneous existence conditions fail: surplus margin "
            f"{cond.surplus_margin:.3e}, moment margin {cond.foc_margin:.3e}")
    N = economy.n_agents
    lam = np.full(N, 1.0 / N)
    kappa = 1.0
    walras = []
    prev_h = None
    for it in range(1, max_iter + 1):
        system = excess_demand(economy, lam)
        h = system.h
        walras.append(float(np.dot(lam, h)))
        if np.max(np.abs(h)) < tol:
            return _result_from_weights(economy, lam, system, tuple(walras), it, "tatonnement")
        if prev_h is not None and float(np.dot(h, prev_h)) < 0.0:
            kappa *= 0.5
        prev_h = h
        # h_i > 0 means agent i's demanded value exceeds its budget, so its
        # weight must shrink: move against the excess demand
        lam = lam * np.exp(-kappa * h / (1.0 + np.abs(h)))
        lam = lam / lam.sum()

    lam = _weights_by_root_finding(economy, lam, tol)
    system = excess_demand(economy, lam)
    walras.append(float(np.dot(lam, system.h)))
    if np.max(np.abs(system.h)) >= tol:
        raise ConvergenceError(
            f"excess demand {np.max(np.abs(system.h)):.3e} after tatonnement + root finding",
            residual=float(np.max(np.abs(system.h))))
    return _result_from_weights(economy, lam, system, tuple(walras),
                                max_iter, "tatonnement+root")


def _weights_by_root_finding(economy: EconomySpec, lam0: np.ndarray, tol: float) -> np.ndarray:
    N = economy.n_agents
    if N == 1:
        return np.array([1.0])
    if N == 2:
        def h1(x):
            return excess_demand(economy, np.array([x, 1.0 - x])).h[0]

        lo, hi = 1e-12, 1.0 - 1e-12
        x = float(optimize.brentq(h1, lo, hi, xtol=1e-15, rtol=8.9e-16, maxiter=600))
        return np.array([x, 1.0 - x])

    def resid(z):
        lam = np.exp(np.concatenate([z, [0.0]]))
        lam = lam / lam.sum()
        return excess_demand(economy, lam).h[:-1]

    sol = optimize.root(resid, np.log(lam0[:-1] / lam0[-1]), method="hybr",
                        options={"xtol": 1e-14})
    lam = np.exp(np.concatenate([sol.x, [0.0]]))
    return lam / lam.sum()
