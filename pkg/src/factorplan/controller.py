"""Per-step action selection against a factorized transition graph.

Given current and goal observations the controller extracts entities from
both, matches goal constraints to current entities by type, picks the
constraint whose state is furthest from satisfied, binds both states to graph
nodes, and returns the action tagged on the connecting edge. Every failure
path (unmatched entities, missing edge, far binding) degrades to a uniform
random action and is counted in the diagnostics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.optimize import linear_sum_assignment

from .env import Action

if TYPE_CHECKING:  # imported for annotations only; runtime stays import-cycle-free
    from .graph import TransitionGraph
    from .perception import EntitySet, Perception

SELECT_ARGMAX = "argmax"
SELECT_STOCHASTIC = "stochastic"

ACTION_RETARGET = "retarget"
ACTION_STORED = "stored"

# Perturbation that makes Hungarian ties resolve lexicographically without
# disturbing any genuine cost difference.
_TIE_EPS = 1e-9


@dataclass(frozen=True)
class Alignment:
    pi: dict[int, int]  # goal index -> current index
    unmatched_current: tuple[int, ...]
    total_cost: float


@dataclass
class ControllerConfig:
    selection_mode: str = SELECT_STOCHASTIC
    satisfied_threshold: float = 0.05
    action_mode: str = ACTION_RETARGET
    bind_far_threshold: float = math.inf
    rng_seed: int = 0

    def __post_init__(self):
        if self.satisfied_threshold < 0:
            raise ValueError("satisfied_threshold must be >= 0")
        if self.selection_mode not in (SELECT_ARGMAX, SELECT_STOCHASTIC):
            raise ValueError(f"unknown selection mode {self.selection_mode!r}")
        if self.action_mode not in (ACTION_RETARGET, ACTION_STORED):
            raise ValueError(f"unknown action mode {self.action_mode!r}")


@dataclass
class Diagnostics:
    """Fallback counters, accumulated across an episode (or a whole run)."""

    actions: int = 0
    random_actions: int = 0
    missing_edge: int = 0
    bind_far: int = 0
    cardinality_mismatch: int = 0
    satisfied_noops: int = 0

    def add(self, other: "Diagnostics") -> None:
        self.actions += other.actions
        self.random_actions += other.random_actions
        self.missing_edge += other.missing_edge
        self.bind_far += other.bind_far
        self.cardinality_mismatch += other.cardinality_mismatch
        self.satisfied_noops += other.satisfied_noops


def _entity_sort_key(entity) -> bytes:
    # State only: the key must not depend on perceived order (permutation
    # invariance) nor on appearance (recoloring must not change selection).
    # Goal states are unique because objects never overlap.
    return np.asarray(entity.state, dtype=float).tobytes()


def random_action(rng: np.random.Generator, extent) -> Action:
    """Uniform pick over the workspace, displacement uniform in [-0.5, 0.5]^2."""
    extent = np.asarray(extent, dtype=float)
    w = rng.uniform(0.0, extent)
    dw = rng.uniform(-0.5, 0.5, size=2)
    return Action(w, dw)


def align(current: "EntitySet", goal: "EntitySet") -> Alignment:
    """Minimum-cost matching of goal constraints to current entities by type.

    Rectangular inputs are supported: with fewer goal entities than current
    ones every goal is matched and the leftovers are reported. Exact cost ties
    resolve to the lexicographically smallest pairing.
    """
    if len(goal) == 0:
        raise ValueError("goal entity set is empty")
    if len(current) == 0:
        raise ValueError("current entity set is empty")
    gz = goal.types()
    cz = current.types()
    cost = np.linalg.norm(gz[:, None, :] - cz[None, :, :], axis=2)
    tie = _TIE_EPS * (
        np.arange(cost.shape[0])[:, None] * cost.shape[1] + np.arange(cost.shape[1])[None, :]
    )
    rows, cols = linear_sum_assignment(cost + tie)
    pi = {int(g): int(c) for g, c in zip(rows, cols)}
    matched_current = set(pi.values())
    unmatched = tuple(i for i in range(len(current)) if i not in matched_current)
    total = float(cost[rows, cols].sum())
    return Alignment(pi=pi, unmatched_current=unmatched, total_cost=total)


def select_constraint(
    aligned_current: "EntitySet",
    goal: "EntitySet",
    metric,
    config: ControllerConfig,
    rng: np.random.Generator,
) -> int | None:
    """Index of the next goal constraint to work on, or None if all satisfied.

    Both sets must already share indexing (``aligned_current[k]`` corresponds
    to ``goal[k]``). Unsatisfied constraints are those whose state distance
    exceeds the satisfied threshold; argmax mode returns the farthest one
    (ties: lowest index) while stochastic mode samples proportionally to the
    distances.
    """
    if len(aligned_current) != len(goal):
        raise ValueError("aligned sets must have equal cardinality")
    dists = np.array(
        [float(metric(c.state, g.state)) for c, g in zip(aligned_current, goal)]
    )
    live = np.nonzero(dists > config.satisfied_threshold)[0]
    if live.size == 0:
        return None
    if config.selection_mode == SELECT_ARGMAX:
        return int(live[np.argmax(dists[live])])
    probs = dists[live] / dists[live].sum()
    return int(rng.choice(live, p=probs))


def select_action(
    graph: "TransitionGraph",
    o_t,
    o_g,
    perception: "Perception",
    config: ControllerConfig,
    rng: np.random.Generator,
    diagnostics: Diagnostics | None = None,
) -> Action:
    """One planning step: perceive, align, select, bind, and look up an edge.

    In ``retarget`` mode the stored edge action's pick point is replaced by
    the perceived position of the selected entity and the displacement aims at
    the target node's centroid position; ``stored`` mode returns the edge
    action untouched.
    """
    diag = diagnostics if diagnostics is not None else Diagnostics()
    diag.actions += 1

    def fallback(counter: str | None) -> Action:
        diag.random_actions += 1
        if counter is not None:
            setattr(diag, counter, getattr(diag, counter) + 1)
        return random_action(rng, perception.extent)

    h_t = perception(o_t)
    h_g = perception(o_g)
    if len(h_t) == 0 or len(h_g) == 0 or len(h_g) > len(h_t):
        return fallback("cardinality_mismatch")

    alignment = align(current=h_t, goal=h_g)
    # Canonical constraint order: perceived entity order is arbitrary, so tie
    # breaks must key on entity content, not index.
    goal_order = sorted(alignment.pi, key=lambda k: _entity_sort_key(h_g[k]))
    from .perception import EntitySet  # lightweight; avoids a module-level cycle

    matched_goal = EntitySet([h_g[k] for k in goal_order])
    matched_cur = EntitySet([h_t[alignment.pi[k]] for k in goal_order])

    k = select_constraint(matched_cur, matched_goal, graph.metrics.isolate, config, rng)
    if k is None:
        diag.satisfied_noops += 1
        return fallback(None)

    cur_state = matched_cur[k].state
    goal_state = matched_goal[k].state
    i, d_i = graph.bind(cur_state)
    j, d_j = graph.bind(goal_state)
    if max(d_i, d_j) > config.bind_far_threshold:
        return fallback("bind_far")
    edge = graph.edges.get((i, j))
    if edge is None:
        return fallback("missing_edge")

    if config.action_mode == ACTION_STORED:
        return edge.action
    w = perception.state_position(cur_state)
    centroid = graph.nodes[j].centroid.reshape(graph.state_shape)
    target = perception.state_position(centroid)
    return Action(w, target - w)
