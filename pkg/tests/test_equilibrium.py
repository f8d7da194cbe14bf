import math

import numpy as np
import pytest

import habitree.instances as gi
from habitree import (
    AdaptedProcess,
    AgentSpec,
    ConditionError,
    EconomyAgent,
    EconomySpec,
    EventTree,
    IIDEconomy,
    SchemaError,
    beta_sensitivity,
    bond_curve,
    bond_derivative_beta,
    bond_price,
    excess_demand,
    heterogeneous_equilibrium,
    homogeneous_conditions,
    homogeneous_spd,
    long_run_yield,
    lucas_longrun,
    lucas_price,
    perturbed_spd,
    solve_consumption,
)
from habitree.equilibrium import heterogeneous_conditions
from habitree.market import present_value


def example_r(beta):
    """Interest-rate curve of the two-point growth example, printed form."""
    a = (3.0 - beta) ** -2 + (4.0 - beta) ** -2
    return a / (2.0 - beta * a)


def example_lucas(beta):
    """Long-run equity of the two-point growth example, printed form."""
    num = (3.0 - 7.0 * beta / 24.0) * (3.0 - beta) ** -2 \
        + (4.0 - 7.0 * beta / 24.0) * (4.0 - beta) ** -2
    return (24.0 / 17.0) * num / (2.0 - beta * ((3.0 - beta) ** -2 + (4.0 - beta) ** -2))


# -- existence conditions -----------------------------------------------------


def test_conditions_hold_without_habits():
    econ = gi.example_iid_economy(beta=0.0, horizon=2).tree_economy()
    rep = homogeneous_conditions(econ)
    assert rep.holds and rep.surplus_margin > 0 and rep.foc_margin > 0


def test_conditions_sufficient_for_iid_economy():
    econ = gi.example_iid_economy(beta=0.8, horizon=2).tree_economy()
    rep = homogeneous_conditions(econ)
    assert rep.holds and rep.sufficient_margin > 0


def test_conditions_counterexample():
    tree = EventTree.single_path(1)
    econ = EconomySpec(tree, 0.9, (EconomyAgent(
        2.0, 0.0, AdaptedProcess(tree, 1, np.array([1.0, 0.5]))),))
    rep = homogeneous_conditions(econ)
    assert not rep.holds and rep.surplus_margin == pytest.approx(-0.4)
    with pytest.raises(ConditionError):
        homogeneous_spd(econ)


# -- homogeneous SPD -----------------------------------------------------------


def test_homogeneous_spd_no_habit_closed_form():
    rho = 0.07
    econ = gi.example_iid_economy(beta=0.0, horizon=2, rho=rho).tree_economy()
    eq = homogeneous_spd(econ)
    tree = econ.tree
    want = np.exp(-rho * tree.depth) * (econ.aggregate.values / econ.aggregate.values[0]) ** -2.0
    assert np.max(np.abs(eq.M.values - want)) < 1e-12


def test_homogeneous_expected_spd_example_value():
    econ = gi.example_iid_economy(beta=0.0, horizon=1).tree_economy()
    eq = homogeneous_spd(econ)
    p = econ.tree.probabilities()
    em1 = float(np.sum(p[econ.tree.depth_nodes[1]] * eq.M.at_depth(1)))
    assert em1 == pytest.approx(25.0 / 288.0, abs=1e-15)


def test_homogeneous_spd_deterministic_two_period_hand_formula():
    g, beta, rho, gamma = 1.7, 0.5, 0.03, 2.0
    tree = EventTree.single_path(1)
    econ = EconomySpec(tree, beta, (EconomyAgent(
        gamma, rho, AdaptedProcess(tree, 1, np.array([1.0, g]))),))
    eq = homogeneous_spd(econ)
    want = math.exp(-rho) * (g - beta) ** -gamma \
        / (1.0 - beta * math.exp(-rho) * (g - beta) ** -gamma)
    assert eq.M.values[1] == pytest.approx(want, abs=1e-15)


def test_homogeneous_foc_and_recursion():
    econ = gi.example_iid_economy(beta=0.5, horizon=3, rho=0.02).tree_economy()
    eq = homogeneous_spd(econ)
    assert eq.residuals["foc"] < 1e-10
    Mt = perturbed_spd(eq.M, econ.beta)
    assert np.max(np.abs(Mt.values - eq.Mtilde.values)) < 1e-12


def test_equilibrium_spd_feeds_back_to_market_clearing_consumption():
    econ = gi.example_iid_economy(beta=0.4, horizon=2, rho=0.02).tree_economy()
    market = gi.market_from_homogeneous(econ)
    agent = AgentSpec.with_static_habit(2.0, 0.02, 0.4, econ.aggregate)
    res = solve_consumption(market, agent, tol=1e-12)
    assert np.max(np.abs(res.c.values - econ.aggregate.values)) < 1e-8


def test_market_clearing_consumption_has_zero_foc_residual():
    # the aggregate endowment itself is optimal under the equilibrium SPD
    from habitree import foc_residual
    from habitree.optimizer import SolveResult

    econ = gi.example_iid_economy(beta=0.3, horizon=2, rho=0.01).tree_economy()
    market = gi.market_from_homogeneous(econ)
    agent = AgentSpec.with_static_habit(2.0, 0.01, 0.3, econ.aggregate)
    solved = solve_consumption(market, agent, tol=1e-12)
    exact = SolveResult(econ.aggregate, solved.W, solved.R, solved.utility,
                        solved.foc_residual, solved.iterations, solved.method)
    assert foc_residual(market, agent, exact) < 1e-10


# -- bond prices ----------------------------------------------------------------


def test_bond_price_matches_printed_interest_curve():
    for beta in (0.0, 0.25, 0.5, 0.75, 1.0):
        econ = gi.example_iid_economy(beta=beta, horizon=1)
        assert bond_price(econ, 0, 1) == pytest.approx(example_r(beta), abs=1e-15)


def test_bond_price_no_habit_power_form():
    econ = IIDEconomy(((1.5, 0.4), (2.5, 0.6)), 3.0, 0.06, 0.0, 5)
    G = econ.moment(lambda x: x ** -3.0)
    for n in range(1, 6):
        assert bond_price(econ, 0, n) == pytest.approx(
            math.exp(-0.06 * n) * G ** n, abs=1e-15)


def test_bond_price_matches_tree_sums():
    for beta in (0.0, 0.3):
        for T in (2, 3):
            econ = gi.example_iid_economy(beta=beta, horizon=T, rho=0.05)
            tree_econ = econ.tree_economy()
            eq = homogeneous_spd(tree_econ)
            tree = tree_econ.tree
            from habitree.tree import cond_expectation_arrays
            for k in range(0, T + 1):
                for n in range(k, T + 1):
                    ratios = cond_expectation_arrays(tree, eq.M.at_depth(n), n, k) / eq.M.at_depth(k)
                    xs = econ.growth_at(tree, k) if k >= 1 else None
                    for j in range(len(tree.depth_nodes[k])):
                        closed = bond_price(econ, k, n, x_k=None if k == 0 else float(xs[j]))
                        assert abs(ratios[j] - closed) < 1e-10, (beta, T, k, n)


def test_bond_requires_growth_factor_above_floor():
    with pytest.raises(SchemaError):
        IIDEconomy(((1.0, 0.5), (4.0, 0.5)), 2.0, 0.0, 0.9, 1)


def test_bond_curve_validates_beta_range():
    econ = gi.example_iid_economy(horizon=1)
    with pytest.raises(SchemaError):
        bond_curve(econ, 1, [0.0, 2.9])


def test_long_run_yield_limit():
    econ = gi.example_iid_economy(beta=1.0, horizon=1)
    target = long_run_yield(econ)
    gaps = []
    for T in (10, 20, 50):
        e = IIDEconomy(econ.support, econ.gamma, econ.rho, econ.beta, T)
        y = -math.log(bond_price(e, 0, T)) / T
        gaps.append(abs(y - target))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 2e-2


# -- Lucas tree -------------------------------------------------------------------


def test_lucas_longrun_matches_printed_formula():
    for beta in (0.0, 0.2, 0.5, 0.8, 1.0):
        econ = gi.example_iid_economy(beta=beta, horizon=1)
        assert lucas_longrun(econ) == pytest.approx(example_lucas(beta), abs=1e-13)


def test_lucas_longrun_no_habit_geometric_series():
    econ = gi.example_iid_economy(beta=0.0, horizon=1)
    H = econ.moment(lambda x: x ** -1.0)
    assert lucas_longrun(econ) == pytest.approx(H / (1.0 - H), abs=1e-15)


def test_lucas_finite_matches_tree_sum():
    for beta in (0.0, 0.35):
        for T in (2, 3):
            for rho in (0.0, 0.04):
                econ = gi.example_iid_economy(beta=beta, horizon=T, rho=rho)
                tree_econ = econ.tree_economy()
                eq = homogeneous_spd(tree_econ)
                tree = tree_econ.tree
                pv = present_value(tree, eq.M, tree_econ.aggregate, 0)
                assert abs(lucas_price(econ, 0, T) - float(pv[0])) < 1e-10
                # interior date with the growth factor conditioning
                pvk = present_value(tree, eq.M, tree_econ.aggregate, 1)
                xs = econ.growth_at(tree, 1)
                eps1 = tree_econ.aggregate.at_depth(1)
                for j in range(len(xs)):
                    closed = lucas_price(econ, 1, T, eps_k=float(eps1[j]), x_k=float(xs[j]))
                    assert abs(closed - float(pvk[j])) < 1e-10


def test_lucas_longrun_is_T50_limit():
    econ = gi.example_iid_economy(beta=0.6, horizon=1, rho=0.01)
    finite = lucas_price(IIDEconomy(econ.support, econ.gamma, econ.rho, 0.6, 50), 0, 50)
    assert abs(finite - lucas_longrun(econ)) < 1e-9 * abs(lucas_longrun(econ))


def test_lucas_divergence_guard():
    econ = IIDEconomy(((1.01, 1.0),), 0.5, 0.0, 0.0, 2)  # E[X^{1-gamma}] > 1
    with pytest.raises(ConditionError):
        lucas_longrun(econ)


# -- beta sensitivity ---------------------------------------------------------------


def test_bond_curve_increasing_convex_with_analytic_derivative():
    econ = gi.example_iid_economy(horizon=1)
    grid = [i / 100.0 for i in range(101)]
    rep = beta_sensitivity(
        lambda b: bond_price(econ.with_beta(b), 0, 1),
        grid,
        analytic_derivative=lambda b: bond_derivative_beta(econ, 1, b, order=1),
        analytic_second=lambda b: bond_derivative_beta(econ, 1, b, order=2))
    assert rep.increasing and rep.convex
    assert rep.derivative_positive and rep.second_derivative_positive
    assert rep.max_derivative_rel_gap < 1e-6


def test_lucas_curve_increasing_convex():
    econ = gi.example_iid_economy(horizon=1)
    grid = [i / 100.0 for i in range(101)]
    rep = beta_sensitivity(lambda b: lucas_longrun(econ.with_beta(b)), grid)
    assert rep.increasing and rep.convex


def test_sensitivity_negative_control():
    grid = [i / 100.0 for i in range(101)]
    rep = beta_sensitivity(lambda b: 1.0, grid)
    assert not rep.increasing


def test_sensitivity_needs_fine_grid():
    with pytest.raises(ValueError):
        beta_sensitivity(lambda b: b, [0.0, 1.0])


# -- heterogeneous equilibrium --------------------------------------------------------


def test_single_agent_equals_homogeneous():
    econ = gi.example_iid_economy(beta=0.2, horizon=2).tree_economy()
    het = heterogeneous_equilibrium(econ)
    hom = homogeneous_spd(econ)
    assert np.max(np.abs(het.M.values - hom.M.values)) < 1e-9
    assert het.residuals["h_inf"] < 1e-10


def test_identical_agents_split_equally():
    base = gi.example_iid_economy(beta=0.2, horizon=2).tree_economy()
    tree = base.tree
    half = AdaptedProcess(tree, tree.horizon, 0.5 * base.aggregate.values)
    econ = EconomySpec(tree, 0.2, (EconomyAgent(2.0, 0.0, half), EconomyAgent(2.0, 0.0, half)))
    het = heterogeneous_equilibrium(econ)
    hom = homogeneous_spd(base)
    assert np.max(np.abs(het.M.values - hom.M.values)) < 1e-9
    for c in het.consumptions:
        assert np.max(np.abs(c.values - half.values)) < 1e-9


def test_desk_instance_converges_with_walras_at_every_iterate():
    econ = gi.desk_heterogeneous_economy()
    res = heterogeneous_equilibrium(econ)
    assert res.method == "tatonnement"
    assert res.residuals["h_inf"] < 1e-10
    assert res.residuals["clearing"] < 1e-8
    assert res.residuals["budget"] < 1e-8
    assert res.residuals["foc"] < 1e-9
    assert all(abs(w) < 1e-10 for w in res.walras_history)


def test_excess_demand_walras_and_homogeneity():
    econ = gi.desk_heterogeneous_economy()
    rng = np.random.default_rng(81)
    for _ in range(50):
        lam = rng.uniform(0.1, 3.0, size=2)
        sys0 = excess_demand(econ, lam)
        assert abs(float(np.dot(lam, sys0.h))) < 1e-10
        for t in (0.5, 3.0):
            assert np.max(np.abs(excess_demand(econ, t * lam).h - sys0.h)) < 1e-10


def test_excess_demand_blows_down_at_vanishing_weight():
    econ = gi.desk_heterogeneous_economy()
    sys0 = excess_demand(econ, [1e-6, 1.0])
    assert sys0.h[0] < -1e3


def test_weight_equation_solved_to_tolerance():
    econ = gi.desk_heterogeneous_economy()
    system = excess_demand(econ, [0.7, 0.3])
    tree = econ.tree
    s = [econ.aggregate.at_depth(0)]
    for k in range(1, tree.horizon + 1):
        nodes = tree.depth_nodes[k]
        s.append(econ.aggregate.at_depth(k) - econ.beta * econ.aggregate.values[tree.parent[nodes]])
    lam = [0.7, 0.3]
    for k in range(tree.horizon + 1):
        lhs = np.zeros_like(system.gtilde[k])
        for i, a in enumerate(econ.agents):
            lhs += lam[i] ** (1 / a.gamma) * np.exp(-(a.rho / a.gamma) * k) \
                * system.gtilde[k] ** (-1 / a.gamma)
        assert np.max(np.abs(lhs - s[k]) / s[k]) < 1e-12


def test_heterogeneous_conditions_guard():
    tree = EventTree.single_path(1)
    econ = EconomySpec(tree, 0.9, (
        EconomyAgent(2.0, 0.0, AdaptedProcess(tree, 1, np.array([0.5, 0.25]))),
        EconomyAgent(3.0, 0.0, AdaptedProcess(tree, 1, np.array([0.5, 0.25]))),
    ))
    assert not heterogeneous_conditions(econ).holds
    with pytest.raises(ConditionError):
        heterogeneous_equilibrium(econ)


def test_closed_forms_match_tree_sums_T5_three_point_support():
    econ = IIDEconomy(((2.5, 0.3), (3.5, 0.5), (5.0, 0.2)), 2.5, 0.03, 0.4, 5)
    tree_econ = econ.tree_economy()
    eq = homogeneous_spd(tree_econ)
    tree = tree_econ.tree
    from habitree.tree import cond_expectation_arrays
    for n in range(6):
        closed = bond_price(econ, 0, n)
        tree_val = float(cond_expectation_arrays(tree, eq.M.at_depth(n), n, 0)[0])
        assert abs(closed - tree_val) < 1e-10
    pv = present_value(tree, eq.M, tree_econ.aggregate, 0)
    assert abs(lucas_price(econ, 0, 5) - float(pv[0])) < 1e-10


def test_heterogeneous_with_low_risk_aversion_agent():
    base = gi.example_iid_economy(beta=0.1, horizon=2).tree_economy()
    tree = base.tree
    agents = (
        EconomyAgent(0.5, 0.02, AdaptedProcess(tree, tree.horizon, 0.4 * base.aggregate.values)),
        EconomyAgent(2.5, 0.0, AdaptedProcess(tree, tree.horizon, 0.6 * base.aggregate.values)),
    )
    econ = EconomySpec(tree, 0.1, agents)
    res = heterogeneous_equilibrium(econ)
    assert res.residuals["h_inf"] < 1e-10
    assert res.residuals["foc"] < 1e-9
    assert np.all(res.M.values > 0.0)


def test_three_agent_equilibrium():
    base = gi.example_iid_economy(beta=0.15, horizon=2).tree_economy()
    tree = base.tree
    shares = (0.5, 0.3, 0.2)
    gammas = (2.0, 3.0, 1.5)
    rhos = (0.0, 0.05, 0.02)
    agents = tuple(EconomyAgent(g, r, AdaptedProcess(tree, tree.horizon, s * base.aggregate.values))
                   for g, r, s in zip(gammas, rhos, shares))
    econ = EconomySpec(tree, 0.15, agents)
    res = heterogeneous_equilibrium(econ)
    assert res.residuals["h_inf"] < 1e-10
    assert res.residuals["clearing"] < 1e-8
    total = np.sum([c.values for c in res.consumptions], axis=0)
    assert np.max(np.abs(total - base.aggregate.values)) < 1e-8
