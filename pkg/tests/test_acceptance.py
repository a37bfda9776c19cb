"""Acceptance suite: every exit criterion at its stated scale and tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS/FAIL line
per criterion. Full-scale artifacts (5000-episode buffers, 10-seed
evaluations) are built once per session; expect several minutes of runtime.
"""
from __future__ import annotations

import os
from dataclasses import replace

import numpy as np
import pytest

from factorplan.baselines import nf_build
from factorplan.controller import ControllerConfig, SELECT_ARGMAX
from factorplan.env import Action, EnvConfig, Environment, SETTING_COMPLETE, SETTING_PARTIAL
from factorplan.graph import DistanceMetric
from factorplan.harness import (
    EvalSpec,
    bfs_oracle,
    build_artifacts,
    combinatorial_size,
    default_graph_config,
    default_satisfied_threshold,
    evaluate,
    generate_buffer,
    sweep,
    sweep_to_csv,
)
from factorplan.perception import Perception, check_filter_criteria

JOBS = min(2, os.cpu_count() or 1)

# Reference values the original study reports for the grid-complete table.
PAPER_RAND_GRID = {4: 0.06, 5: 0.07, 6: 0.07, 7: 0.08}


def _announce(criterion: str, ok: bool, detail: str) -> None:
    print(f"[{criterion}] {'PASS' if ok else 'FAIL'} - {detail}")


# ---------------------------------------------------------------------------
# full-scale artifacts, built once


@pytest.fixture(scope="session")
def accept_grid_cfg():
    return EnvConfig(variant="grid", object_count=4)


@pytest.fixture(scope="session")
def accept_table_cfg():
    return EnvConfig(variant="table", object_count=4)


@pytest.fixture(scope="session")
def accept_grid_buffer(accept_grid_cfg):
    return generate_buffer(accept_grid_cfg, episodes=5000, episode_length=5, seed=0)


@pytest.fixture(scope="session")
def accept_grid_artifacts(accept_grid_cfg, accept_grid_buffer):
    artifacts = build_artifacts(accept_grid_cfg, buffer=accept_grid_buffer)
    assert artifacts.graph.node_count() == 16
    assert len(artifacts.graph.edges) == 240  # full coverage precondition
    return artifacts


@pytest.fixture(scope="session")
def accept_grid_nf(accept_grid_cfg, accept_grid_buffer, accept_grid_artifacts):
    perception = Perception.from_env_config(accept_grid_cfg)
    set_graph = nf_build(accept_grid_buffer, perception, accept_grid_artifacts.graph)
    return replace(accept_grid_artifacts, set_graph=set_graph)


@pytest.fixture(scope="session")
def accept_table_buffer(accept_table_cfg):
    return generate_buffer(accept_table_cfg, episodes=5000, episode_length=5, seed=0)


@pytest.fixture(scope="session")
def accept_table_artifacts(accept_table_cfg, accept_table_buffer):
    artifacts = build_artifacts(accept_table_cfg, buffer=accept_table_buffer)
    assert artifacts.graph.node_count() == 45
    return artifacts


@pytest.fixture(scope="session")
def report_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("acceptance_reports")
    print(f"\nacceptance artifacts under {path}")
    return path


def _spec(method, setting=SETTING_COMPLETE, **kw):
    defaults = dict(
        method=method,
        setting=setting,
        object_counts=(4, 5, 6, 7),
        episodes=100,
        seeds=10,
        horizon_multiplier=4.0,
        base_seed=0,
    )
    defaults.update(kw)
    return EvalSpec(**defaults)


@pytest.fixture(scope="session")
def grid_complete_reports(accept_grid_artifacts, accept_grid_nf, report_dir):
    reports = {}
    for method, artifacts in (
        ("ncs", accept_grid_artifacts),
        ("rand", accept_grid_artifacts),
        ("nf", accept_grid_nf),
    ):
        reports[method] = evaluate(_spec(method), artifacts, jobs=JOBS)
    from factorplan.figures import report_figure

    combined = "".join(
        reports[m].to_csv() if i == 0 else "\n".join(reports[m].to_csv().splitlines()[1:]) + "\n"
        for i, m in enumerate(reports)
    )
    (report_dir / "grid_complete.csv").write_text(combined)
    report_figure(list(reports.values()), report_dir / "grid_complete.png")
    return reports


# ---------------------------------------------------------------------------
# criterion 1: grid-complete table reproduction


def test_criterion_1_grid_complete_table(grid_complete_reports):
    ncs = grid_complete_reports["ncs"]
    rand = grid_complete_reports["rand"]
    nf = grid_complete_reports["nf"]

    ncs_vals = {k: ncs.mean_fsr("ncs", SETTING_COMPLETE, k) for k in (4, 5, 6, 7)}
    rand_vals = {k: rand.mean_fsr("rand", SETTING_COMPLETE, k) for k in (4, 5, 6, 7)}
    nf_vals = {k: nf.mean_fsr("nf", SETTING_COMPLETE, k) for k in (4, 5, 6, 7)}

    ncs_ok = all(v >= 0.85 for v in ncs_vals.values())
    rand_ok = all(abs(rand_vals[k] - PAPER_RAND_GRID[k]) <= 0.05 for k in rand_vals)
    nf_ok = all(nf_vals[k] <= rand_vals[k] + 0.05 for k in (5, 6, 7))

    detail = (
        f"ncs={[round(ncs_vals[k], 3) for k in (4, 5, 6, 7)]} (>=0.85), "
        f"rand={[round(rand_vals[k], 3) for k in (4, 5, 6, 7)]} (band +-0.05), "
        f"nf={[round(nf_vals[k], 3) for k in (4, 5, 6, 7)]} (<=rand+0.05 for k>=5)"
    )
    _announce("criterion 1", ncs_ok and rand_ok and nf_ok, detail)
    assert ncs_ok, f"ncs below 0.85: {ncs_vals}"
    assert rand_ok, f"rand outside paper band: {rand_vals}"
    assert nf_ok, f"nf exceeds rand+0.05 at k>=5: {nf_vals} vs {rand_vals}"


# ---------------------------------------------------------------------------
# criterion 2: partial-setting ordering


def test_criterion_2_partial_ordering(accept_grid_artifacts, accept_table_artifacts, report_dir):
    details = []
    ok = True
    for label, artifacts in (
        ("grid", accept_grid_artifacts),
        ("table", accept_table_artifacts),
    ):
        ncs = evaluate(_spec("ncs", SETTING_PARTIAL), artifacts, jobs=JOBS)
        rand = evaluate(_spec("rand", SETTING_PARTIAL), artifacts, jobs=JOBS)
        (report_dir / f"{label}_partial.csv").write_text(ncs.to_csv() + rand.to_csv())
        for k in (4, 5, 6, 7):
            n = ncs.mean_fsr("ncs", SETTING_PARTIAL, k)
            r = rand.mean_fsr("rand", SETTING_PARTIAL, k)
            if n < 5 * r:
                ok = False
            details.append(f"{label} k={k}: ncs={n:.3f} rand={r:.3f}")
    _announce("criterion 2", ok, "; ".join(details))
    assert ok, details


# ---------------------------------------------------------------------------
# criterion 3: combinatorial calculator


def test_criterion_3_combinatorial_size():
    def comb_oracle(n, k):
        num, den = 1, 1
        for i in range(k):
            num *= n - i
            den *= i + 1
        return num // den

    def pow_oracle(base, exp):
        out = 1
        for _ in range(exp):
            out *= base
        return out

    got = combinatorial_size(16, 7, 7)
    expected = comb_oracle(16, 7) * pow_oracle(7 * (16 - 7), 7)
    ok = got == expected and got >= 45 * 10**15
    _announce("criterion 3", ok, f"combinatorial_size(16,7,7) = {got} >= 4.5e16, oracle match")
    assert got == expected
    assert got >= 45 * 10**15


# ---------------------------------------------------------------------------
# criterion 4: graph soundness, exhaustive over edges


def test_criterion_4_graph_soundness(accept_grid_cfg, accept_grid_artifacts):
    env = Environment(accept_grid_cfg)
    graph = accept_grid_artifacts.graph
    perception = Perception.from_env_config(accept_grid_cfg)
    sound = 0
    for (i, j), edge in graph.edges.items():
        src = perception.state_position(graph.nodes[i].centroid.reshape(graph.state_shape))
        dst = perception.state_position(graph.nodes[j].centroid.reshape(graph.state_shape))
        state = env.state_from_positions(np.array([env.snap(src)]))
        nxt = env.step(state, edge.action)
        if np.allclose(nxt.objects[0].position, env.snap(dst), atol=1e-9):
            sound += 1
    ok = sound == len(graph.edges) == 240
    _announce("criterion 4", ok, f"{sound}/{len(graph.edges)} edges land in their target cell")
    assert ok


# ---------------------------------------------------------------------------
# criterion 5: oracle equivalence on the enumerable grid


@pytest.fixture(scope="session")
def small_grid_setup():
    cfg = EnvConfig(variant="grid", grid_side=3, object_count=2, image_size=48)
    env = Environment(cfg)
    buffer = generate_buffer(cfg, episodes=700, episode_length=5, seed=1)
    artifacts = build_artifacts(cfg, buffer=buffer, graph_config=default_graph_config(cfg, seed=1))
    assert artifacts.graph.node_count() == 9
    assert len(artifacts.graph.edges) == 72  # all ordered cell pairs
    return cfg, env, artifacts


def _run_ncs_to_completion(env, artifacts, state, task, max_steps):
    from factorplan.controller import select_action

    config = ControllerConfig(
        selection_mode=SELECT_ARGMAX,
        satisfied_threshold=default_satisfied_threshold(env.config),
    )
    perception = Perception.from_env_config(env.config)
    rng = np.random.default_rng(0)
    steps = 0
    while env.unsatisfied_count(state, task) > 0 and steps < max_steps:
        action = select_action(
            artifacts.graph, env.render(state), task.goal, perception, config, rng
        )
        state = env.step(state, action)
        steps += 1
    return steps, env.unsatisfied_count(state, task)


def test_criterion_5_oracle_equivalence(small_grid_setup):
    cfg, env, artifacts = small_grid_setup
    template_state, _ = env.reset(0)

    checked = matched = 0
    dependency_instances = 0
    cells = list(range(9))
    # k = 1: every (initial, goal) cell pair
    one_cfg = replace(cfg, object_count=1)
    one_env = Environment(one_cfg)
    one_template = one_env.random_state(np.random.default_rng(3))
    for c0 in cells:
        for g0 in cells:
            if g0 == c0:
                continue
            state = one_env.state_from_positions(
                np.array([one_env.cell_centers[c0]]), one_template
            )
            task = one_env.make_task(state, {0: one_env.cell_centers[g0].copy()}, SETTING_COMPLETE)
            optimal, _ = bfs_oracle(task, one_env)
            u0 = one_env.unsatisfied_count(state, task)
            if optimal != u0:
                dependency_instances += 1
                continue
            steps, left = _run_ncs_to_completion(one_env, artifacts, state, task, max_steps=4 * u0)
            checked += 1
            matched += int(left == 0 and steps == optimal)

    # k = 2: ordered initial pairs x ordered goal pairs over the other cells
    for c0 in cells:
        for c1 in cells:
            if c1 == c0:
                continue
            remaining = [c for c in cells if c not in (c0, c1)]
            for g0 in remaining:
                for g1 in remaining:
                    if g1 == g0:
                        continue
                    state = env.state_from_positions(
                        np.array([env.cell_centers[c0], env.cell_centers[c1]]),
                        template_state,
                    )
                    task = env.make_task(
                        state,
                        {0: env.cell_centers[g0].copy(), 1: env.cell_centers[g1].copy()},
                        SETTING_COMPLETE,
                    )
                    optimal, _ = bfs_oracle(task, env)
                    u0 = env.unsatisfied_count(state, task)
                    if optimal != u0:
                        dependency_instances += 1
                        continue
                    steps, left = _run_ncs_to_completion(env, artifacts, state, task, max_steps=4 * u0)
                    checked += 1
                    matched += int(left == 0 and steps == optimal)

    ok = matched == checked and checked > 3000
    _announce(
        "criterion 5",
        ok,
        f"{matched}/{checked} dependency-free instances solved in exactly the "
        f"optimal move count ({dependency_instances} with dependencies skipped)",
    )
    assert ok


# ---------------------------------------------------------------------------
# criterion 6: filter criteria at scale


def test_criterion_6_filter_criteria(accept_grid_cfg):
    env = Environment(accept_grid_cfg)
    perception = Perception.from_env_config(accept_grid_cfg)
    metric = DistanceMetric("cosine")
    rng = np.random.default_rng(100)
    pitch = 1.0 / accept_grid_cfg.image_size

    transitions = 0
    identified = 0
    max_type_drift = 0.0
    max_state_drift = 0.0
    for _ep in range(250):
        state = env.random_state(rng)
        for _t in range(4):
            idx = int(rng.integers(len(state.objects)))
            free = env.free_cells(state)
            target = env.cell_centers[free[int(rng.integers(len(free)))]]
            action = Action(state.objects[idx].position.copy(), target - state.objects[idx].position)
            nxt = env.step(state, action)
            before = perception(env.render(state))
            after = perception(env.render(nxt))
            report = check_filter_criteria(before, after, metric)
            moved_color = np.array(state.objects[idx].color)
            if (
                report.moved_index is not None
                and np.linalg.norm(before[report.moved_index].z[:3] - moved_color) <= 0.05
            ):
                identified += 1
            max_type_drift = max(max_type_drift, report.max_type_drift)
            max_state_drift = max(max_state_drift, report.max_nonmoved_state_drift)
            transitions += 1
            state = nxt

    rate = identified / transitions
    ok = transitions == 1000 and rate >= 0.995 and max_type_drift <= 0.05 and max_state_drift <= 1.0
    _announce(
        "criterion 6",
        ok,
        f"moved-object identification {rate:.4f} (>=0.995), type drift "
        f"{max_type_drift:.4f} (<=0.05), non-moved state drift {max_state_drift:.4f} px (<=1 pitch)",
    )
    assert ok
    assert max_state_drift * pitch <= pitch  # drift is zero pixels in practice


# ---------------------------------------------------------------------------
# criterion 7: sweep trends


def test_criterion_7_sweep_trends(
    accept_grid_cfg,
    accept_grid_buffer,
    accept_grid_artifacts,
    accept_table_cfg,
    accept_table_buffer,
    accept_table_artifacts,
    report_dir,
):
    pick = accept_grid_cfg.resolved_pick_threshold()
    spec = _spec("ncs", object_counts=(4,), episodes=100, seeds=3)

    noise_points = sweep(
        spec, "noise_std", [0.0, pick / 3, 2 * pick / 3, pick], accept_grid_artifacts, jobs=JOBS
    )
    noise_vals = [p.report.mean_fsr("ncs", SETTING_COMPLETE, 4) for p in noise_points]
    noise_ok = all(b <= a + 0.03 for a, b in zip(noise_vals, noise_vals[1:]))

    cluster_points = sweep(
        spec,
        "clusters",
        [4, 16],
        accept_grid_artifacts,
        buffer=accept_grid_buffer,
        graph_config=default_graph_config(accept_grid_cfg),
        jobs=JOBS,
    )
    coarse, fine = (p.report.mean_fsr("ncs", SETTING_COMPLETE, 4) for p in cluster_points)
    cluster_ok = coarse < fine

    table_spec = _spec("ncs", object_counts=(4,), episodes=100, seeds=3)
    fraction_points = sweep(
        table_spec,
        "buffer_fraction",
        [0.1, 1.0],
        accept_table_artifacts,
        buffer=accept_table_buffer,
        graph_config=default_graph_config(accept_table_cfg),
        jobs=JOBS,
    )
    small, full = (p.report.mean_fsr("ncs", SETTING_COMPLETE, 4) for p in fraction_points)
    fraction_ok = small < full

    (report_dir / "sweep_noise.csv").write_text(sweep_to_csv(noise_points))
    (report_dir / "sweep_clusters.csv").write_text(sweep_to_csv(cluster_points))
    (report_dir / "sweep_fraction.csv").write_text(sweep_to_csv(fraction_points))
    from factorplan.figures import sweep_figure

    sweep_figure(noise_points, report_dir / "sweep_noise.png")

    ok = noise_ok and cluster_ok and fraction_ok
    _announce(
        "criterion 7",
        ok,
        f"noise curve {[round(v, 3) for v in noise_vals]} non-increasing (+-0.03); "
        f"clusters 4 vs 16: {coarse:.3f} < {fine:.3f}; "
        f"table buffer fraction 0.1 vs 1.0: {small:.3f} < {full:.3f}",
    )
    assert noise_ok, noise_vals
    assert cluster_ok, (coarse, fine)
    assert fraction_ok, (small, full)


# ---------------------------------------------------------------------------
# property: method ordering at k=4 (grid-complete)


def test_property_method_ordering_at_k4(accept_grid_artifacts, accept_grid_nf):
    """NCS > MPC >= Rand on the grid-complete task at the buffer's object
    count. MPC is ~3 s/episode, so this invariant runs on a 20x2 slice; NF is
    compared against Rand at k >= 5 in criterion 1 (with exact perception its
    whole-configuration binding succeeds at k=4, unlike with learned states).
    """
    slice_kw = dict(object_counts=(4,), episodes=20, seeds=2)
    ncs = evaluate(_spec("ncs", **slice_kw), accept_grid_artifacts, jobs=JOBS)
    mpc = evaluate(_spec("mpc", **slice_kw), accept_grid_artifacts, jobs=JOBS)
    rand = evaluate(_spec("rand", **slice_kw), accept_grid_artifacts, jobs=JOBS)
    n = ncs.mean_fsr("ncs", SETTING_COMPLETE, 4)
    m = mpc.mean_fsr("mpc", SETTING_COMPLETE, 4)
    r = rand.mean_fsr("rand", SETTING_COMPLETE, 4)
    ok = n > m >= r
    _announce("ordering property", ok, f"ncs={n:.3f} > mpc={m:.3f} >= rand={r:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 8: determinism of the whole pipeline


def test_criterion_8_determinism(
    accept_grid_cfg, accept_grid_buffer, accept_grid_artifacts, grid_complete_reports
):
    # buffer regeneration is byte-identical
    regen = generate_buffer(accept_grid_cfg, episodes=5000, episode_length=5, seed=0)
    buffers_ok = regen.digest() == accept_grid_buffer.digest()

    # graph rebuild is byte-identical
    rebuilt = build_artifacts(accept_grid_cfg, buffer=regen)
    graphs_ok = rebuilt.graph.to_json_bytes() == accept_grid_artifacts.graph.to_json_bytes()

    # re-evaluating one cell reproduces the value inside the full report,
    # regardless of process fan-out
    single = evaluate(
        _spec("ncs", object_counts=(4,), seeds=1), accept_grid_artifacts, jobs=1
    )
    cell_new = [r for r in single.rows if r.seed == "0"][0].mean_fsr
    cell_old = [
        r
        for r in grid_complete_reports["ncs"].rows
        if r.seed == "0" and r.k == 4
    ][0].mean_fsr
    cell_ok = cell_new == cell_old

    # serialized reports are byte-stable modulo wall-clock
    csv_ok = (
        grid_complete_reports["ncs"].to_csv(mask_wallclock=True)
        == grid_complete_reports["ncs"].to_csv(mask_wallclock=True)
    )

    ok = buffers_ok and graphs_ok and cell_ok and csv_ok
    _announce(
        "criterion 8",
        ok,
        f"buffer digest match={buffers_ok}, graph bytes match={graphs_ok}, "
        f"re-evaluated cell match={cell_ok}, csv stable={csv_ok}",
    )
    assert ok
