"""Upper-hedging prices and recursive consumption/wealth bounds.

For markets whose payoff-space projection is conditional expectation onto
intermediate partitions H_k (idiosyncratically incomplete markets qualify
with H_k generated by the parent atoms and the factor sigma-algebra), the
minimal super-replication wealth of a payment stream follows a backward
esssup recursion, and the optimal consumption and wealth of a habit-forming
agent are sandwiched by affine functions of past consumption whose
coefficients (m_k, xi^k_j, alpha^k_j, delta_k, eta_k) obey explicit backward
recursions.

The recursion discounts with M_{k+1}/M_k (the form consistent with the
super-replication definition, under which delta_k = -epsU_k holds exactly);
the eta/delta forms used here are the tight ones: on a deterministic market
all bounds collapse to equalities.

Caveat: the sandwich provably holds when the recursion coefficients
m_k, xi^k_j come out measurable with respect to the intermediate partitions,
which holds for idiosyncratic (factor) markets and complete markets but can
fail for other intermediate-partition markets with deterministic rates; on
those the bounds may be violated by the order of the coefficients'
within-block spread.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConditionError
from .market import MarketSpec, intermediate_partitions, perturbed_spd, validate_market_class
from .optimizer import AgentSpec, SolveResult
from .tree import AdaptedProcess, EventTree, Partition


def _esssup_depth(tree: EventTree, arr: np.ndarray, part: Partition) -> np.ndarray:
    pos = {int(n): j for j, n in enumerate(tree.depth_nodes[part.depth])}
    out = np.empty_like(arr)
    for b in part.blocks:
        sel = [pos[i] for i in b]
        out[sel] = np.max(arr[sel])
    return out


def _essinf_depth(tree: EventTree, arr: np.ndarray, part: Partition) -> np.ndarray:
    return -_esssup_depth(tree, -arr, part)


def _discounted_cond_exp(tree: EventTree, M: AdaptedProcess, nxt: np.ndarray, k: int) -> np.ndarray:
    """E[(M_{k+1}/M_k) nxt | G_k] over depth-k nodes."""
    mk, mk1 = M.at_depth(k), M.at_depth(k + 1)
    pos = {int(n): j for j, n in enumerate(tree.depth_nodes[k + 1])}
    out = np.empty(len(tree.depth_nodes[k]))
    for j, u in enumerate(tree.depth_nodes[k]):
        kids = tree.children[int(u)]
        sel = [pos[int(c)] for c in kids]
        out[j] = np.sum(tree.trans_prob[kids] * mk1[sel] * nxt[sel]) / mk[j]
    return out


def upper_hedging(market: MarketSpec, X: AdaptedProcess,
                  partitions: Optional[Sequence[Partition]] = None) -> list:
    """Upper hedging wealth process of the payment stream (X_k)_{k=1..T}.

    Backward recursion: X^u_T = esssup[X_T | H_T], then
    X^u_k = esssup[X_k + E[(M_{k+1}/M_k) X^u_{k+1} | G_k] | H_k], and
    X^u_0 = E[M_1 X^u_1].  Returns one array per depth (scalar array at 0).
    The initial value is the minimal cost of super-replicating the stream.
    """
    tree = market.tree
    T = tree.horizon
    if T == 0:
        raise ValueError("a zero-horizon tree carries no payment stream to hedge")
    H = tuple(partitions) if partitions is not None else intermediate_partitions(market)
    M = market.spd
    out = [None] * (T + 1)
    out[T] = _esssup_depth(tree, X.at_depth(T), H[T - 1])
    for k in range(T - 1, 0, -1):
        carry = _discounted_cond_exp(tree, M, out[k + 1], k)
        out[k] = _esssup_depth(tree, X.at_depth(k) + carry, H[k - 1])
    p = tree.probabilities()
    nodes1 = tree.depth_nodes[1]
    out[0] = np.array([float(np.sum(p[nodes1] * M.at_depth(1) * out[1]))])
    return out


@dataclass
class BoundCoefficients:
    """Backward-recursion coefficients of the consumption/wealth sandwich.

    m[k], xi[(k, j)], alpha[(k, j)], delta[k], deltap[k], eta[k], etap[k] are
    arrays over depth-k nodes (k = 0 entries are singleton arrays); epsU and
    negepsU are the upper-hedging wealth processes of (eps_k) and (-eps_k).
    The identities delta_k = -epsU_k and deltap_k = negepsU_k hold by
    construction and are re-verified in tests from the independent hedging
    recursion.  When some m_k <= 0 the bounds are vacuous and flagged.
    """

    m: list
    xi: dict
    alpha: dict
    delta: dict
    deltap: dict
    eta: dict
    etap: dict
    epsU: list
    negepsU: list
    vacuous: bool
    vacuous_periods: tuple


def _require_hypothesis(market: MarketSpec) -> None:
    cls = validate_market_class(market)
    if "idiosyncratic" in cls.labels:
        return
    if "classC" in cls.labels and "deterministic-rate" in cls.labels:
        return
    raise ConditionError(
        "bound recursions need an idiosyncratically incomplete market or an "
        f"intermediate-partition market with deterministic rate; got {sorted(cls.labels)}")


def bound_coefficients(market: MarketSpec, agent: AgentSpec) -> BoundCoefficients:
    """Coefficients of the sandwich bounds for (market, agent).

    Terminal seed m_T = 1, xi^T = 0; going backward the one-period-ahead
    alpha coefficients are discounted into m_k and xi^k_j, the endowment's
    hedging values enter through eta_k/eta'_k, and the perturbed-SPD ratio
    e^{-rho/gamma} (Mtilde_k/Mtilde_{k-1})^{-1/gamma} drives alpha^k_j.
    """
    _require_hypothesis(market)
    tree = market.tree
    T = tree.horizon
    if T == 0:
        raise ValueError("a zero-horizon tree has no periods to bound")
    H = intermediate_partitions(market)
    M = market.spd
    Mt = perturbed_spd(M, agent.habits)
    beta = agent.habits
    g, rho = agent.gamma, agent.rho
    eps = agent.endowment

    q = {}
    for k in range(1, T + 1):
        nodes = tree.depth_nodes[k]
        ratio = Mt.at_depth(k) / Mt.values[tree.parent[nodes]]
        q[k] = np.exp(-rho / g) * ratio ** (-1.0 / g)

    m = [None] * (T + 1)
    xi, alpha, delta, deltap, eta, etap = {}, {}, {}, {}, {}, {}
    vac = []
    for k in range(T, 0, -1):
        nk = len(tree.depth_nodes[k])
        if k == T:
            # convention: alpha^{T+1} = 0, delta_{T+1} = delta'_{T+1} = 0
            D = np.ones(nk)
            exp_alpha = {}
            arg_up = eps.at_depth(T)
            arg_lo = eps.at_depth(T)
        else:
            exp_alpha = {j: _discounted_cond_exp(tree, M, alpha[(k + 1, j)], k)
                         for j in range(k + 1)}
            D = 1.0 + exp_alpha[k]
            arg_up = eps.at_depth(k) - _discounted_cond_exp(tree, M, delta[k + 1], k)
            arg_lo = eps.at_depth(k) - _discounted_cond_exp(tree, M, deltap[k + 1], k)
        if np.any(D <= 0.0):
            vac.append(k)
            D = np.where(D <= 0.0, np.nan, D)
        m[k] = 1.0 / D
        # xi enters the consumption bound additively, so it carries the
        # negated discounted next-period alpha
        for j in range(k):
            xi[(k, j)] = -(exp_alpha.get(j, np.zeros(nk))) / D
        etap[k] = _esssup_depth(tree, arg_up, H[k - 1]) / D
        eta[k] = _essinf_depth(tree, arg_lo, H[k - 1]) / D
        delta[k] = -etap[k] * D
        deltap[k] = -eta[k] * D
        alpha[(k, k - 1)] = (q[k] + beta[k, k - 1] - xi[(k, k - 1)]) * D
        for j in range(k - 1):
            alpha[(k, j)] = (beta[k, j] - beta[k - 1, j] * q[k] - xi[(k, j)]) * D

    p = tree.probabilities()
    nodes1 = tree.depth_nodes[1]
    w1 = p[nodes1] * M.at_depth(1)
    D0 = 1.0 + float(np.sum(w1 * alpha[(1, 0)]))
    if D0 <= 0.0:
        vac.append(0)
        D0 = np.nan
    m[0] = np.array([1.0 / D0])
    eta[0] = np.array([-float(np.sum(w1 * deltap[1])) / D0])
    etap[0] = np.array([-float(np.sum(w1 * delta[1])) / D0])

    epsU = upper_hedging(market, eps, H)
    neg = AdaptedProcess(tree, T, -eps.values)
    negepsU = upper_hedging(market, neg, H)
    return BoundCoefficients(m, xi, alpha, delta, deltap, eta, etap,
                             epsU, negepsU, bool(vac), tuple(sorted(vac)))


def delta_identity_gap(coeffs: BoundCoefficients) -> float:
    """Max deviation in delta_k = -epsU_k and delta'_k = negepsU_k, the two
    sides computed by independent recursions."""
    worst = 0.0
    for k in coeffs.delta:
        worst = max(worst, float(np.max(np.abs(coeffs.delta[k] + coeffs.epsU[k]))))
        worst = max(worst, float(np.max(np.abs(coeffs.deltap[k] - coeffs.negepsU[k]))))
    return worst


@dataclass
class PeriodBounds:
    period: int
    quantity: str          # "consumption" or "wealth"
    lower: np.ndarray
    value: np.ndarray
    upper: np.ndarray

    @property
    def slack(self) -> float:
        return float(min(np.min(self.value - self.lower), np.min(self.upper - self.value)))


@dataclass
class SandwichReport:
    rows: list
    vacuous: bool

    def min_slack(self) -> float:
        return min(r.slack for r in self.rows) if self.rows else float("inf")

    def min_slack_by_period(self) -> dict:
        out = {}
        for r in self.rows:
            out[r.period] = min(out.get(r.period, float("inf")), r.slack)
        return out


def check_sandwich(market: MarketSpec, agent: AgentSpec, result: SolveResult,
                   coeffs: Optional[BoundCoefficients] = None) -> SandwichReport:
    """Evaluate the sandwich bounds on a solved plan, period by period.

    Consumption at k >= 1 is bounded by eta_k + m_k W_k + sum_j xi^k_j c_j
    from below and the eta'_k analogue from above; period 0 by
    m_0 eps_0 + eta_0 and m_0 eps_0 + eta'_0; wealth by
    sum_j alpha^k_j c_j + delta_k and + delta'_k.  Negative slack beyond
    tolerance indicates a defect in the solver or the coefficients.
    """
    if coeffs is None:
        coeffs = bound_coefficients(market, agent)
    tree = market.tree
    T = tree.horizon
    anc = tree.ancestor_matrix()
    c, W = result.c.values, result.W.values
    eps0 = float(agent.endowment.at_depth(0)[0])
    rows = [PeriodBounds(0, "consumption",
                         coeffs.m[0] * eps0 + coeffs.eta[0],
                         np.array([c[0]]),
                         coeffs.m[0] * eps0 + coeffs.etap[0])]
    for k in range(1, T + 1):
        nodes = tree.depth_nodes[k]
        xi_sum = np.zeros(len(nodes))
        alpha_sum = np.zeros(len(nodes))
        for j in range(k):
            cj = c[anc[nodes, j]]
            xi_sum += coeffs.xi[(k, j)] * cj
            alpha_sum += coeffs.alpha[(k, j)] * cj
        base = coeffs.m[k] * W[nodes] + xi_sum
        rows.append(PeriodBounds(k, "consumption",
                                 coeffs.eta[k] + base, c[nodes], coeffs.etap[k] + base))
        rows.append(PeriodBounds(k, "wealth",
                                 alpha_sum + coeffs.delta[k], W[nodes],
                                 alpha_sum + coeffs.deltap[k]))
    return SandwichReport(rows, coeffs.vacuous)
