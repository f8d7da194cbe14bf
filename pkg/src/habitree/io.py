"""JSON wire formats.

Tree:    {"horizon": T, "nodes": [{"id": str, "parent": str|null, "prob": f}]}
Market:  tree fields plus "assets": [{"name", "prices": {id: f},
         "dividends": {id: f}}], "interest": {id: f}, and optionally
         "classC_blocks" / "idio_factor": {depth(str): [[ids], ...]}.
Agent:   {"gamma": f, "rho": f, "beta": f | "beta_matrix": [[...], ...],
         "endowment": {id: f}}.
Economy: {"tree": {...}, "beta": f, "agents": [{"gamma", "rho", "endowment"}]}.
IID:     {"support": [{"x": f, "p": f}, ...], "gamma", "rho", "beta", "horizon"}.

All loaders raise SchemaError naming the offending field.  Dumps are
deterministic: sorted keys, floats through Python's shortest round-trip repr.
"""

from __future__ import annotations

import json
from typing import Optional

import numpy as np

from .equilibrium import EconomyAgent, EconomySpec, EquilibriumResult, IIDEconomy
from .errors import SchemaError
from .market import Asset, MarketSpec
from .optimizer import AgentSpec
from .tree import AdaptedProcess, EventTree, Partition


def _need(obj: dict, field: str, kind, where: str):
    if not isinstance(obj, dict) or field not in obj:
        raise SchemaError(f"{where}.{field}" if where else field, "missing")
    val = obj[field]
    if kind is float:
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise SchemaError(f"{where}.{field}" if where else field, "expected a number")
        return float(val)
    if not isinstance(val, kind):
        raise SchemaError(f"{where}.{field}" if where else field,
                          f"expected {kind.__name__}")
    return val


def load_tree(obj: dict) -> EventTree:
    horizon = _need(obj, "horizon", int, "")
    nodes = _need(obj, "nodes", list, "")
    triples = []
    for i, n in enumerate(nodes):
        nid = _need(n, "id", str, f"nodes[{i}]")
        parent = n.get("parent")
        if parent is not None and not isinstance(parent, str):
            raise SchemaError(f"nodes[{i}].parent", "expected node id or null")
        prob = _need(n, "prob", float, f"nodes[{i}]")
        triples.append((nid, parent, prob))
    return EventTree.from_edges(triples, horizon)


def dump_tree(tree: EventTree) -> dict:
    nodes = []
    for i, nid in enumerate(tree.ids):
        p = tree.parent[i]
        nodes.append({"id": nid,
                      "parent": None if p < 0 else tree.ids[int(p)],
                      "prob": float(tree.trans_prob[i])})
    return {"horizon": tree.horizon, "nodes": nodes}


def _node_map_to_process(tree: EventTree, mapping: dict, field: str,
                         depths, default: Optional[float] = None) -> AdaptedProcess:
    vals = np.full(tree.n_nodes, np.nan)
    for nid, v in mapping.items():
        if nid not in tree._index:
            raise SchemaError(field, f"unknown node id {nid!r}")
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise SchemaError(field, f"value at {nid!r} must be a number")
        vals[tree.index(nid)] = float(v)
    for k in range(tree.horizon + 1):
        nodes = tree.depth_nodes[k]
        missing = np.isnan(vals[nodes])
        if k in depths:
            if np.any(missing):
                if default is None:
                    bad = tree.ids[int(nodes[int(np.argmax(missing))])]
                    raise SchemaError(field, f"missing value at node {bad!r}")
                vals[nodes] = np.where(missing, default, vals[nodes])
        else:
            vals[nodes] = np.where(missing, 0.0, vals[nodes])
    return AdaptedProcess(tree, tree.horizon, vals)


def _load_partitions(obj, tree: EventTree, field: str):
    if field not in obj or obj[field] is None:
        return None
    spec = _need(obj, field, dict, "")
    parts = []
    for k in range(1, tree.horizon + 1):
        key = str(k)
        if key not in spec:
            raise SchemaError(f"{field}.{key}", "missing depth")
        parts.append(Partition.from_node_ids(tree, k, spec[key]))
    return tuple(parts)


def load_market(obj: dict) -> MarketSpec:
    tree = load_tree(obj)
    interest = _node_map_to_process(tree, _need(obj, "interest", dict, ""),
                                    "interest", set(range(1, tree.horizon + 1)))
    assets = []
    for i, a in enumerate(_need(obj, "assets", list, "")):
        name = _need(a, "name", str, f"assets[{i}]")
        prices = _node_map_to_process(tree, _need(a, "prices", dict, f"assets[{i}]"),
                                      f"assets[{i}].prices", set(range(tree.horizon + 1)))
        dividends = _node_map_to_process(tree, a.get("dividends", {}),
                                         f"assets[{i}].dividends",
                                         set(range(1, tree.horizon + 1)), default=0.0)
        assets.append(Asset(name, prices, dividends))
    return MarketSpec(tree, tuple(assets), interest,
                      classC=_load_partitions(obj, tree, "classC_blocks"),
                      idio=_load_partitions(obj, tree, "idio_factor"))


def dump_market(market: MarketSpec) -> dict:
    tree = market.tree
    out = dump_tree(market.tree)
    out["interest"] = {tree.ids[int(n)]: float(market.interest.values[int(n)])
                       for k in range(1, tree.horizon + 1) for n in tree.depth_nodes[k]}
    out["assets"] = [{
        "name": a.name,
        "prices": {nid: float(a.prices.values[i]) for i, nid in enumerate(tree.ids)},
        "dividends": {tree.ids[int(n)]: float(a.dividends.values[int(n)])
                      for k in range(1, tree.horizon + 1) for n in tree.depth_nodes[k]},
    } for a in market.assets]
    return out


def load_agent(obj: dict, tree: EventTree) -> AgentSpec:
    gamma = _need(obj, "gamma", float, "agent")
    rho = _need(obj, "rho", float, "agent")
    endowment = _node_map_to_process(tree, _need(obj, "endowment", dict, "agent"),
                                     "agent.endowment", set(range(tree.horizon + 1)),
                                     default=0.0)
    T = tree.horizon
    if "beta_matrix" in obj:
        rows = _need(obj, "beta_matrix", list, "agent")
        if len(rows) != T + 1:
            raise SchemaError("agent.beta_matrix", f"need {T + 1} rows")
        mat = np.zeros((T + 1, T + 1))
        for k, row in enumerate(rows):
            # ragged form: row k lists beta^(k)_0..beta^(k)_{k-1}; square form allowed
            if not isinstance(row, list) or len(row) not in (k, T + 1):
                raise SchemaError("agent.beta_matrix",
                                  f"row {k} must have {k} entries (or {T + 1} in square form)")
            for l, v in enumerate(row):
                mat[k, l] = float(v)
        habits = mat
    elif "beta" in obj:
        habits = float(_need(obj, "beta", float, "agent"))
    else:
        raise SchemaError("agent.beta", "need 'beta' or 'beta_matrix'")
    return AgentSpec(gamma, rho, habits, endowment)


def load_economy(obj: dict) -> EconomySpec:
    tree = load_tree(_need(obj, "tree", dict, "economy"))
    beta = _need(obj, "beta", float, "economy")
    agents = []
    for i, a in enumerate(_need(obj, "agents", list, "economy")):
        gamma = _need(a, "gamma", float, f"economy.agents[{i}]")
        rho = _need(a, "rho", float, f"economy.agents[{i}]")
        endow = _node_map_to_process(tree, _need(a, "endowment", dict, f"economy.agents[{i}]"),
                                     f"economy.agents[{i}].endowment",
                                     set(range(tree.horizon + 1)), default=0.0)
        agents.append(EconomyAgent(gamma, rho, endow))
    return EconomySpec(tree, beta, tuple(agents))


def load_iid(obj: dict) -> IIDEconomy:
    support = []
    for i, s in enumerate(_need(obj, "support", list, "iid")):
        support.append((_need(s, "x", float, f"iid.support[{i}]"),
                        _need(s, "p", float, f"iid.support[{i}]")))
    return IIDEconomy(tuple(support),
                      _need(obj, "gamma", float, "iid"),
                      _need(obj, "rho", float, "iid"),
                      float(obj.get("beta", 0.0)),
                      _need(obj, "horizon", int, "iid"))


def _process_map(tree: EventTree, values: np.ndarray) -> dict:
    return {nid: float(values[i]) for i, nid in enumerate(tree.ids)}


def dump_equilibrium(result: EquilibriumResult) -> dict:
    tree = result.M.tree
    return {
        "tree": dump_tree(tree),
        "spd": _process_map(tree, result.M.values),
        "perturbed_spd": _process_map(tree, result.Mtilde.values),
        "lambdas": [float(l) for l in result.lambdas],
        "consumptions": [_process_map(tree, c.values) for c in result.consumptions],
        "residuals": {k: float(v) for k, v in sorted(result.residuals.items())},
        "walras_history": [float(w) for w in result.walras_history],
        "iterations": result.iterations,
        "method": result.method,
    }


def load_equilibrium(obj: dict) -> EquilibriumResult:
    tree = load_tree(_need(obj, "tree", dict, "equilibrium"))
    full = set(range(tree.horizon + 1))

    def proc(field):
        return _node_map_to_process(tree, _need(obj, field, dict, "equilibrium"), field, full)

    return EquilibriumResult(
        M=proc("spd"),
        Mtilde=proc("perturbed_spd"),
        lambdas=tuple(float(l) for l in _need(obj, "lambdas", list, "equilibrium")),
        consumptions=tuple(
            _node_map_to_process(tree, c, f"consumptions[{i}]", full)
            for i, c in enumerate(_need(obj, "consumptions", list, "equilibrium"))),
        residuals={k: float(v) for k, v in _need(obj, "residuals", dict, "equilibrium").items()},
        walras_history=tuple(float(w) for w in obj.get("walras_history", [])),
        iterations=int(obj.get("iterations", 0)),
        method=str(obj.get("method", "")),
    )


def dump_solve_result(result, tree: EventTree) -> dict:
    return {
        "tree": dump_tree(tree),
        "consumption": _process_map(tree, result.c.values),
        "wealth": _process_map(tree, result.W.values),
        "supporting_spd": _process_map(tree, result.R.values),
        "utility": float(result.utility),
        "foc_residual": float(result.foc_residual),
        "iterations": result.iterations,
        "method": result.method,
    }


def to_json_bytes(obj: dict) -> bytes:
    """Canonical JSON encoding: sorted keys, newline-terminated."""
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def fmt17(x: float) -> str:
    """17-significant-digit decimal formatting for CSV output."""
    return format(float(x), ".17g")
