"""Comparison policies: random actions, whole-configuration graph search, and
shooting-based planning over a graph-backed one-step model.

The non-factorized (NF) ablation keys its graph on the entire multiset of
bound entity states, so a configuration must have been observed verbatim for
binding to succeed; the node count blows up combinatorially with object
count, which is the failure mode the factorized graph avoids. The MPC
baseline plans through a sparse-edit rollout model: an action matching a
stored edge at an entity's node moves that single entity to the edge's target
centroid, everything else stays put.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .controller import Diagnostics, align, random_action
from .env import Action
from .graph import DistanceMetric, SQUARED_EUCLIDEAN, TransitionGraph

_SQEUCLID = DistanceMetric(SQUARED_EUCLIDEAN)


def random_policy(rng: np.random.Generator, extent) -> Action:
    """Uniform action; the same distribution the controller falls back to."""
    return random_action(rng, extent)


# ---------------------------------------------------------------------------
# non-factorized graph search


CanonicalKey = tuple[int, ...]


@dataclass
class SetGraph:
    """Graph whose nodes are canonical multisets of per-entity cluster ids."""

    base_graph: TransitionGraph
    nodes: dict[CanonicalKey, int] = field(default_factory=dict)
    edges: dict[tuple[int, int], Action] = field(default_factory=dict)

    def canonical_key(self, entity_states) -> CanonicalKey:
        ids = self.base_graph.bind_many(list(entity_states))
        return tuple(sorted(int(i) for i in ids))

    def node_id(self, key: CanonicalKey, create: bool = False) -> int | None:
        if key in self.nodes:
            return self.nodes[key]
        if not create:
            return None
        node_id = len(self.nodes)
        self.nodes[key] = node_id
        return node_id

    def node_count(self) -> int:
        return len(self.nodes)


def nf_build(buffer, perception, base_graph: TransitionGraph) -> SetGraph:
    """One node per observed entity-set configuration, one edge per transition."""
    set_graph = SetGraph(base_graph=base_graph)
    for ep in buffer.episodes:
        sets = [perception(r) for r in ep.rasters]
        keys = [
            set_graph.canonical_key(s.states()) if len(s) else None for s in sets
        ]
        for t, action in enumerate(ep.actions):
            kb, ka = keys[t], keys[t + 1]
            if kb is None or ka is None:
                continue
            i = set_graph.node_id(kb, create=True)
            j = set_graph.node_id(ka, create=True)
            set_graph.edges[(i, j)] = action  # overwrite on repeat
    if not set_graph.nodes:
        raise ValueError("no usable transitions in buffer")
    return set_graph


class NFPlanner:
    """Shortest-path planner over a SetGraph with per-goal distance caching."""

    def __init__(self, set_graph: SetGraph):
        self.set_graph = set_graph
        self._adjacency: dict[int, list[int]] = {}
        self._reverse: dict[int, list[int]] = {}
        for (i, j) in set_graph.edges:
            if i != j:
                self._adjacency.setdefault(i, []).append(j)
                self._reverse.setdefault(j, []).append(i)
        for nbrs in self._adjacency.values():
            nbrs.sort()
        for nbrs in self._reverse.values():
            nbrs.sort()
        self._dist_cache: dict[int, dict[int, int]] = {}

    def distances_to(self, goal: int) -> dict[int, int]:
        """Unit-weight Dijkstra from the goal over reversed edges."""
        cached = self._dist_cache.get(goal)
        if cached is not None:
            return cached
        dist = {goal: 0}
        heap = [(0, goal)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist.get(u, np.inf):
                continue
            for v in self._reverse.get(u, ()):
                nd = d + 1
                if nd < dist.get(v, np.inf):
                    dist[v] = nd
                    heapq.heappush(heap, (nd, v))
        self._dist_cache[goal] = dist
        return dist

    def first_action(self, current: int, goal: int) -> Action | None:
        if current == goal:
            return None
        dist = self.distances_to(goal)
        d_cur = dist.get(current)
        if d_cur is None:
            return None
        for v in self._adjacency.get(current, ()):  # sorted: deterministic ties
            if dist.get(v) == d_cur - 1:
                return self.set_graph.edges[(current, v)]
        return None


def nf_select_action(
    set_graph: SetGraph,
    o_t,
    o_g,
    perception,
    rng: np.random.Generator,
    diagnostics: Diagnostics | None = None,
    planner: NFPlanner | None = None,
) -> Action:
    """Bind both observations to whole-configuration nodes and follow a
    shortest path; any binding or reachability failure degrades to a random
    action."""
    diag = diagnostics if diagnostics is not None else Diagnostics()
    diag.actions += 1
    if planner is None:
        planner = NFPlanner(set_graph)

    def fallback(counter: str | None) -> Action:
        diag.random_actions += 1
        if counter:
            setattr(diag, counter, getattr(diag, counter) + 1)
        return random_action(rng, perception.extent)

    h_t = perception(o_t)
    h_g = perception(o_g)
    if len(h_t) == 0 or len(h_g) == 0:
        return fallback("cardinality_mismatch")
    key_t = set_graph.canonical_key(h_t.states())
    key_g = set_graph.canonical_key(h_g.states())
    cur = set_graph.node_id(key_t)
    goal = set_graph.node_id(key_g)
    if cur is None or goal is None:
        return fallback("bind_far")
    if cur == goal:
        diag.satisfied_noops += 1
        return fallback(None)
    action = planner.first_action(cur, goal)
    if action is None:
        return fallback("missing_edge")
    return action


# ---------------------------------------------------------------------------
# graph-backed rollout model + CEM planning


@dataclass
class RolloutModel:
    """Sparse-edit one-step predictor backed by a transition graph."""

    graph: TransitionGraph
    action_match_tol: float

    def __post_init__(self):
        if self.action_match_tol <= 0:
            raise ValueError("action_match_tol must be positive")
        # Per-node stored actions, for edge matching during rollouts.
        self._edge_w: dict[int, np.ndarray] = {}
        self._edge_dw: dict[int, np.ndarray] = {}
        self._edge_to: dict[int, np.ndarray] = {}
        by_node: dict[int, list] = {}
        for (i, j), edge in sorted(self.graph.edges.items()):
            by_node.setdefault(i, []).append((edge.action.w, edge.action.dw, j))
        for i, rows in by_node.items():
            self._edge_w[i] = np.array([r[0] for r in rows])
            self._edge_dw[i] = np.array([r[1] for r in rows])
            self._edge_to[i] = np.array([r[2] for r in rows], dtype=int)

    def step_nodes(self, node_ids: list[int], action: Action) -> list[int]:
        """Advance per-entity node ids by one action (sparse edit)."""
        best = None  # (pick_dist, dw_dist, entity index, target node)
        for e, node in enumerate(node_ids):
            ws = self._edge_w.get(node)
            if ws is None:
                continue
            pick = np.linalg.norm(ws - action.w, axis=1)
            ok = np.nonzero(pick <= self.action_match_tol)[0]
            if ok.size == 0:
                continue
            dw_dist = np.linalg.norm(self._edge_dw[node][ok] - action.dw, axis=1)
            local = int(ok[np.argmin(dw_dist)])
            cand = (float(pick[local]), float(np.min(dw_dist)), e, int(self._edge_to[node][local]))
            if best is None or cand[:2] < best[:2]:
                best = cand
        if best is None:
            return list(node_ids)
        out = list(node_ids)
        out[best[2]] = best[3]
        return out

    def rollout(self, entity_states, action: Action):
        """One predicted step over raw states; at most one entity changes."""
        node_ids = [int(i) for i in self.graph.bind_many(list(entity_states))]
        new_ids = self.step_nodes(node_ids, action)
        out = []
        for state, old, new in zip(entity_states, node_ids, new_ids):
            if new == old:
                out.append(np.asarray(state))
            else:
                centroid = self.graph.nodes[new].centroid
                out.append(centroid.reshape(np.asarray(state).shape))
        return out


def rollout(model: RolloutModel, entity_states, action: Action):
    return model.rollout(entity_states, action)


@dataclass
class CEMParams:
    iterations: int = 10
    elite_ratio: float = 0.05
    population: int = 250
    horizon: int = 5
    init_std: float = 0.3
    std_floor: float = 1e-3

    def __post_init__(self):
        if self.population * self.elite_ratio < 2:
            raise ValueError("population * elite_ratio must be >= 2")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def n_elites(self) -> int:
        return max(2, int(self.population * self.elite_ratio))


def goal_cost(final_states, goal_states, goal_to_current: dict[int, int]) -> float:
    """Sum of squared state distances between aligned final and goal entities."""
    total = 0.0
    for g, c in goal_to_current.items():
        total += _SQEUCLID(final_states[c], goal_states[g])
    return float(total)


def cem_plan(
    model: RolloutModel,
    o_t,
    o_g,
    perception,
    params: CEMParams,
    rng: np.random.Generator,
    cost_trace: list | None = None,
) -> Action:
    """Cross-entropy planning over action sequences through the rollout model.

    A diagonal Gaussian over flattened (w, dw) sequences is refit to the
    elites each iteration (std floored); surviving elites are carried into the
    next population so the best cost never regresses. Returns the first action
    of the final elite mean.
    """
    h_t = perception(o_t)
    h_g = perception(o_g)
    if len(h_t) == 0 or len(h_g) == 0 or len(h_g) > len(h_t):
        return random_action(rng, perception.extent)
    alignment = align(current=h_t, goal=h_g)

    start_nodes = [int(i) for i in model.graph.bind_many(h_t.states())]
    goal_states = [np.asarray(s, dtype=float).ravel() for s in h_g.states()]
    # Cost of leaving entity e at node m, against each goal constraint.
    centroids = np.stack([n.centroid for n in model.graph.nodes])
    cost_lut = _SQEUCLID.pairwise(centroids, np.stack(goal_states))  # (M, G)

    def sequence_cost(actions: np.ndarray) -> float:
        nodes = list(start_nodes)
        for t in range(params.horizon):
            nodes = model.step_nodes(nodes, Action(actions[t, :2], actions[t, 2:]))
        return float(
            sum(cost_lut[nodes[c], g] for g, c in alignment.pi.items())
        )

    dim = (params.horizon, 4)
    center = np.asarray(perception.extent, dtype=float) / 2.0
    mean = np.tile(np.concatenate([center, np.zeros(2)]), (params.horizon, 1))
    std = np.full(dim, params.init_std)

    elites = None
    elite_costs = None
    n_e = params.n_elites()
    for _ in range(params.iterations):
        n_fresh = params.population - (0 if elites is None else len(elites))
        samples = mean[None] + std[None] * rng.standard_normal((n_fresh, *dim))
        if elites is not None:
            population = np.concatenate([elites, samples], axis=0)
            costs = np.concatenate(
                [elite_costs, [sequence_cost(s) for s in samples]]
            )
        else:
            population = samples
            costs = np.array([sequence_cost(s) for s in samples])
        order = np.argsort(costs, kind="stable")[:n_e]
        elites = population[order]
        elite_costs = costs[order]
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), params.std_floor)
        if cost_trace is not None:
            cost_trace.append(float(elite_costs[0]))

    return Action(mean[0, :2], mean[0, 2:])
