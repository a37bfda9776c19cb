"""Buffer generation, evaluation protocol, sweeps, and correctness oracles.

Evaluation mirrors the offline protocol: graphs are built from a 4-object
buffer, policies are scored on unseen object counts with a horizon of
``horizon_multiplier`` times the initially unsatisfied constraint count, and
the metric is the fractional success rate (satisfied-constraint gain over the
initially unsatisfied count). Episodes are deterministic functions of the
spec seed; the task an episode poses never depends on the method being
scored, so methods compete on identical task sets.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import (
    CEMParams,
    NFPlanner,
    RolloutModel,
    SetGraph,
    cem_plan,
    nf_build,
    nf_select_action,
    random_policy,
)
from .controller import ControllerConfig, Diagnostics, select_action
from .env import Action, EnvConfig, Environment, GRID, SETTING_COMPLETE, SETTING_PARTIAL
from .graph import (
    Episode,
    ExperienceBuffer,
    GraphConfig,
    TransitionGraph,
    build_graph,
    build_graph_from_transitions,
    extract_entity_transitions,
)
from .perception import Perception

METHOD_NCS = "ncs"
METHOD_RAND = "rand"
METHOD_NF = "nf"
METHOD_MPC = "mpc"
METHODS = (METHOD_NCS, METHOD_RAND, METHOD_NF, METHOD_MPC)

_METHOD_CODE = {m: i for i, m in enumerate(METHODS)}
_SETTING_CODE = {SETTING_COMPLETE: 0, SETTING_PARTIAL: 1}

SWEEP_AXES = ("clusters", "buffer_fraction", "noise_std", "horizon_multiplier")

CSV_COLUMNS = (
    "method,setting,k,seed,episodes,mean_fsr,stderr,"
    "fallback_missing_edge,fallback_bind,wallclock_s"
)


# ---------------------------------------------------------------------------
# buffer generation


def generate_buffer(
    env_config: EnvConfig,
    episodes: int = 5000,
    episode_length: int = 5,
    seed: int = 0,
    coverage_retries: int = 5,
) -> ExperienceBuffer:
    """Scripted-random buffer: each step moves one uniformly chosen object to
    a uniformly chosen free location.

    Episodes hold ``episode_length`` observations (one fewer transition). For
    the grid variant the generated buffer is checked to mention every cell as
    both a source and a destination; on a miss (vanishingly rare at default
    scale) the whole buffer is regenerated from a successor seed. Buffers too
    small to plausibly cover the grid (under four transitions per cell) skip
    the check.
    """
    if episode_length < 2:
        raise ValueError("episode_length must be >= 2")
    env = Environment(env_config)
    n_transitions = episodes * (episode_length - 1)
    check_coverage = (
        env_config.variant == GRID and n_transitions >= 4 * env_config.grid_side**2
    )
    for attempt in range(coverage_retries):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        out: list[Episode] = []
        sources: set[int] = set()
        dests: set[int] = set()
        for _ep in range(episodes):
            state = env.random_state(rng)
            rasters = [env.render(state)]
            actions: list[Action] = []
            moved: list[int] = []
            for _t in range(episode_length - 1):
                idx = int(rng.integers(len(state.objects)))
                position = state.objects[idx].position
                if env_config.variant == GRID:
                    free = env.free_cells(state)
                    if not free:
                        raise ValueError("no free cell to move to")
                    target = env.cell_centers[free[int(rng.integers(len(free)))]]
                    sources.add(env.cell_index(position))
                    dests.add(env.cell_index(target))
                else:
                    others = [
                        o.position for i, o in enumerate(state.objects) if i != idx
                    ]
                    target = env._sample_table_positions(rng, 1, others)[0]
                action = Action(position.copy(), target - position)
                nxt = env.step(state, action)
                if env.moved_object(state, nxt) != idx:
                    raise AssertionError("scripted move failed to move its object")
                state = nxt
                rasters.append(env.render(state))
                actions.append(action)
                moved.append(idx)
            out.append(Episode(rasters, actions, moved))
        if check_coverage:
            all_cells = set(range(env_config.grid_side**2))
            if sources != all_cells or dests != all_cells:
                continue
        return ExperienceBuffer(out, env_config, seed)
    raise RuntimeError("buffer generation failed grid coverage check repeatedly")


# ---------------------------------------------------------------------------
# metrics


def fractional_success(unsat_initial: int, unsat_final: int) -> float:
    """Satisfied-constraint gain over the initially unsatisfied count, in [0, 1].

    Negative progress clamps to zero (a policy can unsatisfy constraints it
    never satisfied in partial tasks).
    """
    if unsat_initial < 1:
        raise ValueError("episode must start with at least one unsatisfied constraint")
    return max(0, unsat_initial - unsat_final) / unsat_initial


def combinatorial_size(locations: int, k: int, t: int) -> int:
    """Exact count of length-``t`` trajectories over object configurations:
    C(locations, k) * (k * (locations - k)) ** t."""
    if k < 0 or k > locations:
        raise ValueError("k must satisfy 0 <= k <= locations")
    if t < 0:
        raise ValueError("t must be >= 0")
    return math.comb(locations, k) * (k * (locations - k)) ** t


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalSpec:
    method: str = METHOD_NCS
    setting: str = SETTING_COMPLETE
    object_counts: tuple[int, ...] = (4, 5, 6, 7)
    episodes: int = 100
    seeds: int = 10
    horizon_multiplier: float = 4.0
    action_noise_std: float = 0.0
    base_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.setting not in _SETTING_CODE:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.episodes < 1 or self.seeds < 1:
            raise ValueError("episodes and seeds must be >= 1")
        if self.horizon_multiplier < 1:
            raise ValueError("horizon_multiplier must be >= 1")


@dataclass
class EvalArtifacts:
    """Everything a policy needs, minus the environment itself."""

    env_config: EnvConfig
    graph: TransitionGraph | None = None
    set_graph: SetGraph | None = None
    controller_config: ControllerConfig | None = None
    cem: CEMParams | None = None
    state_form: str | None = None  # None: variant default
    action_match_tol: float | None = None  # None: pick threshold

    def perception_for(self, env_config: EnvConfig) -> Perception:
        return Perception.from_env_config(env_config, self.state_form)

    def resolved_controller_config(self, env_config: EnvConfig) -> ControllerConfig:
        if self.controller_config is not None:
            return self.controller_config
        return ControllerConfig(
            satisfied_threshold=default_satisfied_threshold(env_config, self.state_form)
        )


def default_satisfied_threshold(env_config: EnvConfig, state_form: str | None = None) -> float:
    """Controller-side 'done' aligned with the scorer's place threshold.

    Squared-Euclidean state distances live in squared workspace units, so the
    threshold is squared there; mask metrics are already in [0, 1] where the
    raw threshold separates identical from moved masks.
    """
    place = env_config.resolved_place_threshold()
    form = state_form or ("mask" if env_config.variant == GRID else "position")
    return place * place if form == "position" else place


@dataclass
class EvalRow:
    method: str
    setting: str
    k: int
    seed: str  # seed index, or "all" for the aggregate over seeds
    episodes: int
    mean_fsr: float
    stderr: float | None
    fallback_missing_edge: int
    fallback_bind: int
    wallclock_s: float

    def to_csv(self, mask_wallclock: bool = False) -> str:
        stderr = "" if self.stderr is None else repr(round(self.stderr, 10))
        wall = 0.0 if mask_wallclock else self.wallclock_s
        return (
            f"{self.method},{self.setting},{self.k},{self.seed},{self.episodes},"
            f"{round(self.mean_fsr, 10)!r},{stderr},"
            f"{self.fallback_missing_edge},{self.fallback_bind},{round(wall, 3)!r}"
        )


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    def aggregate(self, method: str, setting: str, k: int) -> EvalRow:
        for row in self.rows:
            if (row.method, row.setting, row.k, row.seed) == (method, setting, k, "all"):
                return row
        raise KeyError((method, setting, k))

    def mean_fsr(self, method: str, setting: str, k: int) -> float:
        return self.aggregate(method, setting, k).mean_fsr

    def to_csv(self, provenance: dict | None = None, mask_wallclock: bool = False) -> str:
        lines = []
        for key in sorted(provenance or {}):
            lines.append(f"# {key}={str((provenance or {})[key]).strip()}")
        lines.append(CSV_COLUMNS)
        lines.extend(row.to_csv(mask_wallclock) for row in self.rows)
        return "\n".join(lines) + "\n"

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)
        self.diagnostics.add(other.diagnostics)


def _env_seed(base_seed: int, setting: str, k: int, seed_idx: int, ep: int) -> int:
    # Task identity is method-independent: all methods face the same episodes.
    ss = np.random.SeedSequence([base_seed, 101, _SETTING_CODE[setting], k, seed_idx, ep])
    return int(ss.generate_state(1)[0])


def _policy_rng(spec: EvalSpec, k: int, seed_idx: int, ep: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(
        [
            spec.base_seed,
            stream,
            _METHOD_CODE[spec.method],
            _SETTING_CODE[spec.setting],
            k,
            seed_idx,
            ep,
        ]
    )
    return np.random.default_rng(ss)


class _Policy:
    needs_render = True

    def start_episode(self) -> None:
        pass

    def act(self, o_t, o_g, rng, steps_left: int) -> Action:
        raise NotImplementedError


class _RandomPolicy(_Policy):
    needs_render = False

    def __init__(self, extent, diagnostics: Diagnostics):
        self.extent = extent
        self.diagnostics = diagnostics

    def act(self, o_t, o_g, rng, steps_left: int) -> Action:
        self.diagnostics.actions += 1
        self.diagnostics.random_actions += 1
        return random_policy(rng, self.extent)


class _GraphPolicy(_Policy):
    def __init__(self, graph, perception, config, diagnostics):
        self.graph = graph
        self.perception = perception
        self.config = config
        self.diagnostics = diagnostics

    def act(self, o_t, o_g, rng, steps_left: int) -> Action:
        return select_action(
            self.graph, o_t, o_g, self.perception, self.config, rng, self.diagnostics
        )


class _NFPolicy(_Policy):
    def __init__(self, set_graph, perception, diagnostics):
        self.set_graph = set_graph
        self.perception = perception
        self.planner = NFPlanner(set_graph)
        self.diagnostics = diagnostics

    def act(self, o_t, o_g, rng, steps_left: int) -> Action:
        return nf_select_action(
            self.set_graph,
            o_t,
            o_g,
            self.perception,
            rng,
            self.diagnostics,
            planner=self.planner,
        )


class _MPCPolicy(_Policy):
    def __init__(self, model, perception, cem, diagnostics):
        self.model = model
        self.perception = perception
        self.cem = cem
        self.diagnostics = diagnostics

    def act(self, o_t, o_g, rng, steps_left: int) -> Action:
        self.diagnostics.actions += 1
        params = replace(self.cem, horizon=max(1, min(self.cem.horizon, steps_left)))
        return cem_plan(self.model, o_t, o_g, self.perception, params, rng)


def _make_policy(spec: EvalSpec, artifacts: EvalArtifacts, env_config: EnvConfig) -> _Policy:
    diagnostics = Diagnostics()
    if spec.method == METHOD_RAND:
        return _RandomPolicy(env_config.workspace_extent(), diagnostics)
    perception = artifacts.perception_for(env_config)
    if spec.method == METHOD_NCS:
        if artifacts.graph is None:
            raise ValueError("method 'ncs' requires a transition graph")
        config = artifacts.resolved_controller_config(env_config)
        return _GraphPolicy(artifacts.graph, perception, config, diagnostics)
    if spec.method == METHOD_NF:
        if artifacts.set_graph is None:
            raise ValueError("method 'nf' requires a set graph (build from a buffer)")
        return _NFPolicy(artifacts.set_graph, perception, diagnostics)
    if artifacts.graph is None:
        raise ValueError("method 'mpc' requires a transition graph")
    tol = (
        artifacts.action_match_tol
        if artifacts.action_match_tol is not None
        else env_config.resolved_pick_threshold()
    )
    model = RolloutModel(artifacts.graph, tol)
    cem = artifacts.cem or CEMParams()
    return _MPCPolicy(model, perception, cem, diagnostics)


def _check_metric_compat(spec: EvalSpec, artifacts: EvalArtifacts) -> None:
    if artifacts.graph is None:
        return
    form = artifacts.state_form or ("mask" if artifacts.env_config.variant == GRID else "position")
    img = artifacts.env_config.image_size
    expected = (img, img) if form == "mask" else (2,)
    if tuple(artifacts.graph.state_shape) != expected:
        raise ValueError(
            f"graph state shape {artifacts.graph.state_shape} does not match "
            f"configured state form {form!r}"
        )


def _run_cell(
    spec: EvalSpec, artifacts: EvalArtifacts, k: int, seed_idx: int
) -> tuple[EvalRow, Diagnostics]:
    start = time.perf_counter()
    env = Environment(replace(artifacts.env_config, object_count=k))
    policy = _make_policy(spec, artifacts, env.config)
    scores = []
    for ep in range(spec.episodes):
        state, task = env.reset(_env_seed(spec.base_seed, spec.setting, k, seed_idx, ep), spec.setting)
        u0 = env.unsatisfied_count(state, task)
        horizon = math.ceil(spec.horizon_multiplier * u0)
        act_rng = _policy_rng(spec, k, seed_idx, ep, stream=202)
        noise_rng = _policy_rng(spec, k, seed_idx, ep, stream=303)
        policy.start_episode()
        o_g = task.goal
        unsat = u0
        for t in range(horizon):
            o_t = env.render(state) if policy.needs_render else None
            action = policy.act(o_t, o_g, act_rng, horizon - t)
            if spec.action_noise_std > 0:
                action = Action(
                    action.w + noise_rng.normal(0.0, spec.action_noise_std, 2),
                    action.dw + noise_rng.normal(0.0, spec.action_noise_std, 2),
                )
            state = env.step(state, action)
            unsat = env.unsatisfied_count(state, task)
            if unsat == 0:
                break
        scores.append(fractional_success(u0, unsat))
    diag = policy.diagnostics
    return EvalRow(
        method=spec.method,
        setting=spec.setting,
        k=k,
        seed=str(seed_idx),
        episodes=spec.episodes,
        mean_fsr=float(np.mean(scores)),
        stderr=None,
        fallback_missing_edge=diag.missing_edge,
        fallback_bind=diag.bind_far,
        wallclock_s=time.perf_counter() - start,
    ), diag


def evaluate(spec: EvalSpec, artifacts: EvalArtifacts, jobs: int = 1) -> EvalReport:
    """Score one method on the spec's grid of (object count, seed) cells.

    Cells are independent work items; results are reduced in a fixed order so
    the report is identical for any ``jobs`` value.
    """
    _check_metric_compat(spec, artifacts)
    cells = [(k, s) for k in spec.object_counts for s in range(spec.seeds)]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(
                    _run_cell,
                    [spec] * len(cells),
                    [artifacts] * len(cells),
                    [k for k, _ in cells],
                    [s for _, s in cells],
                    chunksize=max(1, len(cells) // (4 * jobs)),
                )
            )
    else:
        results = [_run_cell(spec, artifacts, k, s) for k, s in cells]

    report = EvalReport()
    by_k: dict[int, list[EvalRow]] = {}
    for (row, diag) in results:
        report.rows.append(row)
        report.diagnostics.add(diag)
        by_k.setdefault(row.k, []).append(row)
    for k in spec.object_counts:
        rows = by_k[k]
        means = np.array([r.mean_fsr for r in rows])
        stderr = float(means.std(ddof=1) / math.sqrt(len(means))) if len(means) > 1 else 0.0
        report.rows.append(
            EvalRow(
                method=spec.method,
                setting=spec.setting,
                k=k,
                seed="all",
                episodes=sum(r.episodes for r in rows),
                mean_fsr=float(means.mean()),
                stderr=stderr,
                fallback_missing_edge=sum(r.fallback_missing_edge for r in rows),
                fallback_bind=sum(r.fallback_bind for r in rows),
                wallclock_s=sum(r.wallclock_s for r in rows),
            )
        )
    return report


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepPoint:
    axis: str
    value: float
    report: EvalReport


def sweep(
    spec: EvalSpec,
    axis: str,
    values,
    artifacts: EvalArtifacts,
    buffer: ExperienceBuffer | None = None,
    graph_config: GraphConfig | None = None,
    jobs: int = 1,
) -> list[SweepPoint]:
    """One evaluate run per axis value; graph-shaping axes rebuild the graph.

    ``clusters`` and ``buffer_fraction`` need the originating buffer and graph
    config; entity extraction is done once and shared across the sweep.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r} (expected one of {SWEEP_AXES})")
    points: list[SweepPoint] = []
    extraction = None
    for value in values:
        point_spec = spec
        point_artifacts = artifacts
        if axis == "noise_std":
            point_spec = replace(spec, action_noise_std=float(value))
        elif axis == "horizon_multiplier":
            point_spec = replace(spec, horizon_multiplier=float(value))
        else:
            if buffer is None or graph_config is None:
                raise ValueError(f"axis {axis!r} requires buffer and graph_config")
            if extraction is None:
                perception = artifacts.perception_for(buffer.env_config)
                extraction = extract_entity_transitions(
                    buffer, perception, graph_config.metrics.isolate
                )
            per_episode, skipped = extraction
            if axis == "clusters":
                cfg = replace(graph_config, n_clusters=int(value))
                graph, _ = build_graph_from_transitions(per_episode, cfg, skipped)
            else:  # buffer_fraction
                n_eps = max(1, math.ceil(float(value) * len(per_episode)))
                graph, _ = build_graph_from_transitions(per_episode[:n_eps], graph_config, skipped)
            point_artifacts = replace(artifacts, graph=graph)
        points.append(SweepPoint(axis, float(value), evaluate(point_spec, point_artifacts, jobs)))
    return points


def sweep_to_csv(points: list[SweepPoint], provenance: dict | None = None, mask_wallclock: bool = False) -> str:
    lines = []
    for key in sorted(provenance or {}):
        lines.append(f"# {key}={str((provenance or {})[key]).strip()}")
    lines.append("axis,value," + CSV_COLUMNS)
    for point in points:
        for row in point.report.rows:
            lines.append(f"{point.axis},{point.value!r},{row.to_csv(mask_wallclock)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# exhaustive oracle


def bfs_oracle(task, env: Environment) -> tuple[int, list[Action]]:
    """Optimal move count for a small grid task, by breadth-first search over
    ground-truth object configurations using the environment's own step
    semantics. Returns the count and one witness action sequence.
    """
    cfg = env.config
    if cfg.variant != GRID or cfg.grid_side > 3 or cfg.object_count > 3:
        raise ValueError("oracle supports grid tasks with grid_side <= 3 and k <= 3")

    goal_cells = {i: env.cell_index(p) for i, p in task.goal_positions.items()}

    def satisfied(state) -> bool:
        return all(
            env.cell_index(state.objects[i].position) == c for i, c in goal_cells.items()
        )

    def key_of(state) -> tuple[int, ...]:
        return tuple(env.cell_index(o.position) for o in state.objects)

    start = env.state_from_positions(task.initial_positions)
    if satisfied(start):
        return 0, []

    frontier = [start]
    parents: dict[tuple[int, ...], tuple[tuple[int, ...] | None, Action | None]] = {
        key_of(start): (None, None)
    }
    while frontier:
        next_frontier = []
        for state in frontier:
            for idx in range(len(state.objects)):
                position = state.objects[idx].position
                for cell in env.free_cells(state):
                    target = env.cell_centers[cell]
                    action = Action(position.copy(), target - position)
                    nxt = env.step(state, action)
                    k = key_of(nxt)
                    if k in parents:
                        continue
                    parents[k] = (key_of(state), action)
                    if satisfied(nxt):
                        actions = [action]
                        back = key_of(state)
                        while parents[back][0] is not None:
                            actions.append(parents[back][1])
                            back = parents[back][0]
                        actions.reverse()
                        return len(actions), actions
                    next_frontier.append(nxt)
        frontier = next_frontier
    raise RuntimeError("goal configuration unreachable")


# ---------------------------------------------------------------------------
# artifact assembly helpers


def build_artifacts(
    env_config: EnvConfig,
    buffer: ExperienceBuffer | None = None,
    graph: TransitionGraph | None = None,
    graph_config: GraphConfig | None = None,
    need_set_graph: bool = False,
    state_form: str | None = None,
    controller_config: ControllerConfig | None = None,
    cem: CEMParams | None = None,
) -> EvalArtifacts:
    """Convenience: build whatever graphs are missing from the buffer."""
    perception = Perception.from_env_config(env_config, state_form)
    if graph is None and buffer is not None:
        if graph_config is None:
            graph_config = default_graph_config(env_config, state_form)
        graph, _ = build_graph(buffer, perception, graph_config)
    set_graph = None
    if need_set_graph:
        if buffer is None or graph is None:
            raise ValueError("set graph requires both a buffer and a base graph")
        set_graph = nf_build(buffer, perception, graph)
    return EvalArtifacts(
        env_config=env_config,
        graph=graph,
        set_graph=set_graph,
        controller_config=controller_config,
        cem=cem,
        state_form=state_form,
    )


def default_graph_config(env_config: EnvConfig, state_form: str | None = None, seed: int = 0) -> GraphConfig:
    from .graph import GraphMetrics

    form = state_form or ("mask" if env_config.variant == GRID else "position")
    n_clusters = 16 if env_config.variant == GRID else 45
    return GraphConfig(
        n_clusters=n_clusters, metrics=GraphMetrics.for_state_form(form), seed=seed
    )
