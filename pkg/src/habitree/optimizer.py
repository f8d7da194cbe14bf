"""Habit-forming power-utility consumption/investment optimization.

One agent maximizes  sum_k e^{-rho k} E[(c_k - sum_l beta^(k)_l c_l)^{1-gamma}/(1-gamma)]
over feasible consumption plans financed by trading in the market: c_k =
eps_k + W_k - E[(M_{k+1}/M_k) W_{k+1} | G_k] with each W_k inside the payoff
span L_k (W_0 = 0, W_{T+1} = 0).

Two independent routes to the optimum:

* ``solve_consumption`` -- damped Newton on the first-order system over the
  pruned payoff-space wealth coordinates (stationarity of the utility in
  those coordinates is exactly the positive-SPD condition
  P^L_k[R*_k / R*_{k-1}] = M_k / M_{k-1}), with a phase-1 LP supplying a
  strictly feasible interior start and a line search that keeps every habit
  surplus positive.
* ``brute_force_oracle`` -- direct concave maximization over the same wealth
  coordinates by log-barrier path following with a generic quasi-Newton
  minimizer; shares only the problem assembly with the primary solver and is
  used as the verification oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np
from scipy import optimize

from .errors import ConvergenceError, InfeasibleProblemError, SchemaError
from .market import MarketSpec, _check_habits, project, static_habit_matrix
from .tree import AdaptedProcess, cond_expectation_arrays

FOC_TOL = 1e-9
MAX_NEWTON_ITER = 200
BACKTRACK = 0.5
SURPLUS_FLOOR = 1e-12


@dataclass
class AgentSpec:
    """Risk aversion gamma (> 0, != 1), impatience rho, habit coefficient
    matrix beta^(k)_l (strictly lower triangular, >= 0) and a nonnegative
    endowment stream."""

    gamma: float
    rho: float
    habits: np.ndarray
    endowment: AdaptedProcess

    def __post_init__(self):
        if self.gamma <= 0.0 or self.gamma == 1.0:
            raise SchemaError("gamma", "power utility needs gamma > 0 and gamma != 1")
        T = self.endowment.tree.horizon
        if self.endowment.depth != T:
            raise SchemaError("endowment", f"must cover depths 0..{T}")
        if np.any(self.endowment.values < 0.0):
            raise SchemaError("endowment", "endowment must be nonnegative")
        if np.isscalar(self.habits):
            self.habits = static_habit_matrix(float(self.habits), T)
        self.habits = _check_habits(self.habits, T)

    @classmethod
    def with_static_habit(cls, gamma: float, rho: float, beta: float,
                          endowment: AdaptedProcess) -> "AgentSpec":
        return cls(gamma, rho, static_habit_matrix(beta, endowment.tree.horizon), endowment)


@dataclass
class SolveResult:
    """Optimal plan: consumption c, wealth W (W_0 = 0 stored at the root),
    the positive SPD R* supporting the optimum, and diagnostics."""

    c: AdaptedProcess
    W: AdaptedProcess
    R: AdaptedProcess
    utility: float
    foc_residual: float
    iterations: int
    method: str


# -- internal problem assembly -------------------------------------------------


class _Problem:
    """Dense linear maps for one (market, agent) instance.

    c = base + K theta,  s = L c,  U(theta) = sum_n pw_n s_n^{1-gamma}/(1-gamma).
    """

    def __init__(self, market: MarketSpec, agent: AgentSpec, endowment_values: np.ndarray):
        tree = market.tree
        if agent.endowment.tree is not tree and agent.endowment.tree.ids != tree.ids:
            raise SchemaError("endowment", "agent endowment lives on a different tree")
        self.market = market
        self.agent = agent
        self.tree = tree
        T = tree.horizon
        n = tree.n_nodes
        self.p = tree.probabilities()
        self.pw = self.p * np.exp(-agent.rho * tree.depth.astype(float))
        self.gamma = agent.gamma

        anc = tree.ancestor_matrix()
        L = np.eye(n)
        for i in range(n):
            k = int(tree.depth[i])
            for l in range(k):
                b = agent.habits[k, l]
                if b != 0.0:
                    L[i, anc[i, l]] -= b
        self.L = L

        M = market.spd.values
        layout = []
        K = []
        # wealth coordinates over the orthonormalized payoff bases (same
        # spans as the pruned raw payoffs, far better conditioned)
        for k in range(1, T + 1):
            for basis in market.atom_bases(k):
                for j in range(basis.rank):
                    col = np.zeros(n)
                    col[basis.children] = basis.onb[:, j]
                    u = basis.atom
                    col[u] -= np.sum(basis.cond_probs * M[basis.children] * basis.onb[:, j]) / M[u]
                    K.append(col)
                    layout.append((k, basis, j))
        self.K = np.column_stack(K) if K else np.zeros((n, 0))
        self.layout = layout
        self.n_theta = self.K.shape[1]
        self.base = endowment_values.copy()
        self.LK = self.L @ self.K
        self.Lbase = self.L @ self.base

    def consumption(self, theta: np.ndarray) -> np.ndarray:
        return self.base + self.K @ theta

    def surplus(self, theta: np.ndarray) -> np.ndarray:
        return self.Lbase + self.LK @ theta

    def wealth(self, theta: np.ndarray) -> np.ndarray:
        W = np.zeros(self.tree.n_nodes)
        for (k, basis, j), t in zip(self.layout, theta):
            W[basis.children] += basis.onb[:, j] * t
        return W

    def utility(self, s) -> float:
        return np.sum(self.pw * s ** (1.0 - self.gamma)) / (1.0 - self.gamma)

    def utility_theta(self, theta: np.ndarray) -> float:
        s = self.surplus(theta)
        if np.any(s <= 0.0):
            return -np.inf
        return float(self.utility(s))

    def grad(self, s: np.ndarray) -> np.ndarray:
        return self.LK.T @ (self.pw * s ** (-self.gamma))

    def hess(self, s: np.ndarray) -> np.ndarray:
        d = self.pw * (-self.gamma) * s ** (-self.gamma - 1.0)
        return self.LK.T @ (d[:, None] * self.LK)

    # positive SPD of the first-order conditions (per node)
    def supporting_spd(self, c: np.ndarray) -> np.ndarray:
        tree = self.tree
        T = tree.horizon
        s = self.L @ c
        phi = np.exp(-self.agent.rho * tree.depth.astype(float)) * s ** (-self.gamma)
        cexp = {}
        for m in range(T + 1):
            sl = phi[tree.depth_nodes[m]]
            chain = {m: sl}
            cur = sl
            for j in range(m - 1, -1, -1):
                cur = cond_expectation_arrays(tree, cur, j + 1, j)
                chain[j] = cur
            cexp[m] = chain
        R = np.empty(tree.n_nodes)
        for k in range(T + 1):
            acc = phi[tree.depth_nodes[k]].copy()
            for m in range(k + 1, T + 1):
                b = self.agent.habits[m, k]
                if b != 0.0:
                    acc -= b * cexp[m][k]
            R[tree.depth_nodes[k]] = acc
        return R


def _phase1_interior(problem: _Problem):
    """LP: maximize the worst surplus over wealth coordinates.  Returns a
    strictly feasible theta or raises InfeasibleProblemError."""
    n, m = problem.LK.shape
    if m == 0:
        s = problem.Lbase
        if np.min(s) <= SURPLUS_FLOOR:
            raise InfeasibleProblemError("no tradeable coordinates and endowment surplus not positive")
        return np.zeros(0)
    A_ub = np.hstack([-problem.LK, np.ones((n, 1))])
    c = np.zeros(m + 1)
    c[-1] = -1.0
    res = optimize.linprog(c, A_ub=A_ub, b_ub=problem.Lbase,
                           bounds=[(None, None)] * (m + 1), method="highs")
    if not res.success:
        raise ConvergenceError(f"phase-1 LP failed: {res.message}")
    t_star = -res.fun
    if t_star <= SURPLUS_FLOOR:
        raise InfeasibleProblemError(
            f"habit floor not coverable: best attainable worst surplus {t_star:.3e}")
    return res.x[:-1]


def _foc_residual_on(problem: _Problem, c: np.ndarray) -> float:
    """Normalized violation of P^L_k[R*_k/R*_{k-1}] = M_k/M_{k-1}."""
    market, tree = problem.market, problem.tree
    if tree.horizon == 0:
        return 0.0
    R = problem.supporting_spd(c)
    # R* appears as a denominator at depths 0..T-1; nonpositive values mean
    # the point is far from optimal
    if np.any(R[: tree.n_upto(tree.horizon - 1)] <= 0.0):
        return np.inf
    M = market.spd.values
    worst = 0.0
    for k in range(1, tree.horizon + 1):
        nodes = tree.depth_nodes[k]
        parents = tree.parent[nodes]
        ratio = R[nodes] / R[parents]
        mratio = M[nodes] / M[parents]
        proj = project(market, ratio, k)
        worst = max(worst, float(np.max(np.abs(proj - mratio) / (1.0 + np.abs(mratio)))))
    return worst


def _result_from_theta(problem: _Problem, theta: np.ndarray, scale: float,
                       iterations: int, method: str) -> SolveResult:
    tree = problem.tree
    c = problem.consumption(theta) * scale
    W = problem.wealth(theta) * scale
    R = problem.supporting_spd(c)
    util = evaluate_utility(problem.agent, AdaptedProcess(tree, tree.horizon, c))
    res = _foc_residual_on(problem, c)
    return SolveResult(
        c=AdaptedProcess(tree, tree.horizon, c),
        W=AdaptedProcess(tree, tree.horizon, W),
        R=AdaptedProcess(tree, tree.horizon, R),
        utility=util,
        foc_residual=res,
        iterations=iterations,
        method=method,
    )


def evaluate_utility(agent: AgentSpec, c: AdaptedProcess) -> float:
    """Discounted expected power utility of the habit surpluses of c.

    For gamma > 1 a nonpositive surplus is the infinite-marginal-utility pole
    and the value is -inf; for gamma < 1 a zero surplus contributes zero and
    negative surpluses are outside the utility domain.
    """
    tree = c.tree
    anc = tree.ancestor_matrix()
    vals = c.values
    s = vals.copy()
    for i in range(tree.n_nodes):
        k = int(tree.depth[i])
        for l in range(k):
            b = agent.habits[k, l]
            if b != 0.0:
                s[i] -= b * vals[anc[i, l]]
    if np.any(s < 0.0) and agent.gamma < 1.0:
        raise ValueError("negative habit surplus: consumption outside the utility domain")
    if agent.gamma > 1.0 and np.any(s <= 0.0):
        return -np.inf
    p = tree.probabilities()
    pw = p * np.exp(-agent.rho * tree.depth.astype(float))
    with np.errstate(divide="ignore"):
        terms = s ** (1.0 - agent.gamma)
    return float(np.sum(pw * terms) / (1.0 - agent.gamma))


def solve_consumption(market: MarketSpec, agent: AgentSpec,
                      tol: float = FOC_TOL, max_iter: int = MAX_NEWTON_ITER) -> SolveResult:
    """Solve the utility maximization by damped Newton on the first-order
    system over wealth coordinates.

    The endowment is internally normalized to unit present value under the
    aggregate SPD (results rescale exactly by the power-utility scaling
    property).  Falls back to the oracle's interior-point maximization if
    Newton stalls; raises ConvergenceError with the residual if both fail.
    """
    if np.all(agent.endowment.values == 0.0):
        raise SchemaError("endowment", "endowment must not be identically zero")
    M = market.spd.values
    p = market.tree.probabilities()
    pv = float(np.sum(p * M * agent.endowment.values))
    problem = _Problem(market, agent, agent.endowment.values / pv)

    theta = _phase1_interior(problem)
    iterations, converged = 0, False
    for it in range(1, max_iter + 1):
        iterations = it
        s = problem.surplus(theta)
        c = problem.consumption(theta)
        res = _foc_residual_on(problem, c)
        if res < tol:
            converged = True
            break
        g = problem.grad(s)
        H = problem.hess(s)
        try:
            d = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            break
        ds = problem.LK @ d
        neg = ds < 0.0
        alpha_max = 1.0
        if np.any(neg):
            alpha_max = min(1.0, 0.995 * float(np.min(-s[neg] / ds[neg])))
        u0 = problem.utility(s)
        if float(np.max(np.abs(g))) < 1e-6 * (1.0 + abs(u0)):
            # quadratic basin: Armijo cannot resolve the tiny improvement in
            # floating point; take the (feasibility-capped) Newton step as is
            theta = theta + alpha_max * d
            continue
        slope = float(g @ d)
        alpha = alpha_max
        accepted = False
        while alpha > 1e-14:
            u1 = problem.utility_theta(theta + alpha * d)
            if u1 > u0 + 1e-4 * alpha * slope:
                theta = theta + alpha * d
                accepted = True
                break
            alpha *= BACKTRACK
        if not accepted:
            break
    if converged:
        return _result_from_theta(problem, theta, pv, iterations, "newton")

    # Newton stalled: polish with the oracle-style barrier maximization,
    # keeping whichever point is better
    theta_fb = _maximize_interior(problem, theta)
    if problem.utility_theta(theta_fb) > problem.utility_theta(theta):
        theta = theta_fb
    c = problem.consumption(theta)
    res = _foc_residual_on(problem, c)
    if res >= tol:
        raise ConvergenceError(
            f"first-order residual {res:.3e} after {iterations} Newton iterations + fallback",
            residual=res)
    return _result_from_theta(problem, theta, pv, iterations, "newton+fallback")


# -- the independent oracle ------------------------------------------------------

BARRIER_SCHEDULE = (1e-2, 1e-4, 1e-6, 1e-8, 1e-10, 1e-12, 0.0)


def _maximize_interior(problem: _Problem, theta0: np.ndarray) -> np.ndarray:
    """Log-barrier path following: minimize -U(theta) - mu sum(log s(theta))
    with a generic quasi-Newton method along a decreasing mu schedule, then
    polish stationarity of the pure objective with a MINPACK root find.
    Infeasible trial points evaluate to +inf and are rejected by the line
    search; the barrier keeps the path interior."""
    if problem.n_theta == 0:
        return theta0
    theta = theta0.copy()

    def neg_value(t):
        s = problem.Lbase + problem.LK @ t
        if np.min(s) <= 0.0:
            return np.inf
        return -np.sum(problem.pw * s ** (1.0 - problem.gamma)) / (1.0 - problem.gamma)

    def neg_grad(t, mu=0.0):
        s = np.maximum(problem.Lbase + problem.LK @ t, SURPLUS_FLOOR)
        inner = problem.pw * s ** (-problem.gamma)
        if mu > 0.0:
            inner = inner + mu / s
        return -(problem.LK.T @ inner)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for mu in BARRIER_SCHEDULE:

            def fun(t, mu=mu):
                base = neg_value(t)
                if not np.isfinite(base) or mu == 0.0:
                    return base
                s = problem.Lbase + problem.LK @ t
                return base - mu * np.sum(np.log(s))

            res = optimize.minimize(fun, theta, jac=lambda t, mu=mu: neg_grad(t, mu),
                                    method="BFGS",
                                    options={"gtol": max(mu * 1e-2, 1e-12), "maxiter": 1000})
            if np.isfinite(res.fun):
                theta = res.x
    # low-curvature directions leave BFGS short of nodewise precision;
    # finish on the stationarity system itself
    with np.errstate(over="ignore", invalid="ignore"):
        sol = optimize.root(neg_grad, theta, method="hybr", options={"xtol": 1e-14})
        if np.isfinite(neg_value(sol.x)) and \
                neg_value(sol.x) <= neg_value(theta) + 1e-12 * (1.0 + abs(neg_value(theta))):
            theta = sol.x
    return theta


def brute_force_oracle(market: MarketSpec, agent: AgentSpec) -> SolveResult:
    """Direct concave maximization over the pruned wealth coordinates.

    An independent check on :func:`solve_consumption`: log-barrier path
    following with a generic quasi-Newton minimizer, sharing only the
    problem assembly.  Limited to small instances (<= ~200 coordinates).
    """
    if np.all(agent.endowment.values == 0.0):
        raise SchemaError("endowment", "endowment must not be identically zero")
    M = market.spd.values
    p = market.tree.probabilities()
    pv = float(np.sum(p * M * agent.endowment.values))
    problem = _Problem(market, agent, agent.endowment.values / pv)
    if problem.n_theta > 200:
        raise ValueError(f"{problem.n_theta} decision variables exceed the oracle limit of 200")
    theta = _phase1_interior(problem)
    theta = _maximize_interior(problem, theta)
    return _result_from_theta(problem, theta, pv, 0, "oracle")


def foc_residual(market: MarketSpec, agent: AgentSpec, result: SolveResult) -> float:
    """Max over periods and atoms of the normalized first-order violation
    |P^L_k[R*_k/R*_{k-1}] - M_k/M_{k-1}| / (1 + |M_k/M_{k-1}|); zero exactly
    at the optimum.  Scale-free in the endowment."""
    problem = _Problem(market, agent, agent.endowment.values)
    return _foc_residual_on(problem, result.c.values)


def budget_gap(market: MarketSpec, agent: AgentSpec, result: SolveResult) -> float:
    """sum_k E[M_k c_k] - sum_k E[M_k eps_k]; zero for any self-financed plan."""
    p = market.tree.probabilities()
    M = market.spd.values
    return float(np.sum(p * M * (result.c.values - agent.endowment.values)))
