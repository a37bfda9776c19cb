"""Command-line pipeline: gen-buffer -> build-graph -> evaluate / inspect.

Every knob lives in one flat config (file via ``-c``, any key overridable by
flag) and all randomness flows from ``--seed``. Exit codes: 0 success,
1 usage, 2 I/O, 3 format.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .baselines import nf_build
from .config import ConfigError, RunConfig
from .graph import BuildError, ExperienceBuffer, FormatError, TransitionGraph, build_graph
from .harness import (
    EvalArtifacts,
    METHOD_MPC,
    METHOD_NF,
    evaluate,
    generate_buffer,
    sweep,
    sweep_to_csv,
)
from .perception import Perception

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_FORMAT = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; spec wants 1
        raise UsageError(message)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", metavar="FILE", help="flat key=value config file")
    for name in RunConfig.field_names():
        parser.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar="V")


def _resolve_config(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for name in RunConfig.field_names():
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            overrides[name] = RunConfig.parse_value(name, raw)
    return config.with_overrides(overrides)


def _jobs(config: RunConfig) -> int:
    return config.jobs if config.jobs > 0 else (os.cpu_count() or 1)


def build_parser() -> _Parser:
    parser = _Parser(prog="factorplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-buffer", help="generate a scripted-random experience buffer")
    p.add_argument("out", help="output buffer file")
    _add_config_flags(p)

    p = sub.add_parser("build-graph", help="abstract a buffer into a transition graph")
    p.add_argument("buffer", help="input buffer file")
    p.add_argument("out", help="output graph JSON file")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score a method; writes a CSV and a figure")
    p.add_argument("graph", help="input graph JSON file")
    p.add_argument("out", help="output report CSV path")
    p.add_argument("--buffer", help="buffer file (needed for nf and graph-rebuilding sweeps)")
    p.add_argument("--sweep", metavar="AXIS=V1,V2,...", help="sweep one axis instead of a single run")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG next to the CSV")
    _add_config_flags(p)

    p = sub.add_parser("inspect", help="dump a graph's nodes and edges")
    p.add_argument("graph", help="input graph JSON file")
    p.add_argument("--csv", action="store_true", help="machine-readable dump")
    _add_config_flags(p)
    return parser


def _cmd_gen_buffer(args) -> int:
    config = _resolve_config(args)
    env_config = config.env_config()
    buffer = generate_buffer(
        env_config,
        episodes=config.buffer_episodes,
        episode_length=config.episode_length,
        seed=config.seed,
    )
    buffer.save(args.out)
    print(f"wrote {args.out}: {len(buffer.episodes)} episodes, {buffer.n_transitions()} transitions")
    return EXIT_OK


def _cmd_build_graph(args) -> int:
    config = _resolve_config(args)
    buffer = ExperienceBuffer.load(args.buffer)
    if config.variant != buffer.env_config.variant:
        # State form and cluster defaults must follow the data being abstracted.
        print(
            f"note: buffer was recorded in the {buffer.env_config.variant!r} variant; "
            "using its defaults for the graph",
            file=sys.stderr,
        )
        config = config.with_overrides({"variant": buffer.env_config.variant})
    perception = Perception.from_env_config(buffer.env_config, config.resolved_state_form())
    graph, report = build_graph(buffer, perception, config.graph_config())
    graph.provenance["run_config"] = config.to_text()
    graph.save(args.out)
    print(
        f"wrote {args.out}: {report.n_nodes} nodes, {report.n_edges} edges, "
        f"{report.dropped_self_loops} self-loop transitions dropped, "
        f"{report.skipped_perception} transitions skipped"
    )
    return EXIT_OK


def _provenance(config: RunConfig, graph: TransitionGraph) -> dict:
    # Content digests only: embedding paths would break byte-reproducibility
    # of reports generated from identical artifacts at different locations.
    prov = {"graph_digest": graph.digest()}
    for line in config.to_text().strip().splitlines():
        key, _, value = line.partition("=")
        prov[f"config.{key.strip()}"] = value.strip()
    if "buffer_digest" in graph.provenance:
        prov["buffer_digest"] = graph.provenance["buffer_digest"]
    return prov


def _check_provenance(config: RunConfig, graph: TransitionGraph) -> None:
    stored = graph.provenance.get("run_config")
    if not stored:
        return
    try:
        stored_cfg = RunConfig.from_text(stored)
    except ConfigError:
        return
    mismatches = [
        name
        for name in ("variant", "clusters", "state_form", "image_size")
        if getattr(stored_cfg, name) != getattr(config, name)
    ]
    if mismatches:
        print(
            f"warning: graph was built under different config keys: {mismatches}",
            file=sys.stderr,
        )


def _cmd_evaluate(args) -> int:
    config = _resolve_config(args)
    graph = TransitionGraph.load(args.graph)
    _check_provenance(config, graph)

    expected_bind = config.graph_config().metrics.bind
    if graph.metrics.bind != expected_bind:
        raise UsageError(
            f"graph bind metric {graph.metrics.bind.kind!r} does not match "
            f"configured metric {expected_bind.kind!r}"
        )

    buffer = None
    if args.buffer:
        buffer = ExperienceBuffer.load(args.buffer)
    set_graph = None
    if config.method == METHOD_NF:
        if buffer is None:
            raise UsageError("--buffer is required for method 'nf'")
        perception = Perception.from_env_config(buffer.env_config, config.resolved_state_form())
        set_graph = nf_build(buffer, perception, graph)

    artifacts = EvalArtifacts(
        env_config=config.env_config(),
        graph=graph,
        set_graph=set_graph,
        controller_config=config.controller_config(),
        cem=config.cem_params() if config.method == METHOD_MPC else None,
        state_form=config.resolved_state_form(),
        action_match_tol=config.resolved_action_match_tol(),
    )
    spec = config.eval_spec()
    provenance = _provenance(config, graph)
    out = Path(args.out)

    if args.sweep:
        axis, _, raw_values = args.sweep.partition("=")
        if not raw_values:
            raise UsageError("--sweep expects AXIS=V1,V2,...")
        values = [float(v) for v in raw_values.split(",") if v.strip()]
        points = sweep(
            spec,
            axis.strip(),
            values,
            artifacts,
            buffer=buffer,
            graph_config=config.graph_config(),
            jobs=_jobs(config),
        )
        out.write_text(sweep_to_csv(points, provenance))
        if not args.no_figures:
            from .figures import sweep_figure

            sweep_figure(points, out.with_suffix(".png"))
        print(f"wrote {out}: {len(points)}-point sweep over {axis.strip()}")
        return EXIT_OK

    report = evaluate(spec, artifacts, jobs=_jobs(config))
    out.write_text(report.to_csv(provenance))
    if not args.no_figures:
        from .figures import report_figure

        report_figure([report], out.with_suffix(".png"))
    for k in spec.object_counts:
        agg = report.aggregate(spec.method, spec.setting, k)
        print(f"{spec.method} {spec.setting} k={k}: {agg.mean_fsr:.3f} +- {agg.stderr:.3f}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    config = _resolve_config(args)
    graph = TransitionGraph.load(args.graph)
    form = "mask" if len(graph.state_shape) == 2 else "position"
    perception = Perception(
        image_size=graph.state_shape[0] if form == "mask" else config.image_size,
        extent=config.env_config().workspace_extent(),
        state_form=form,
    )
    adjacency: dict[int, list[int]] = {}
    for (i, j) in sorted(graph.edges):
        adjacency.setdefault(i, []).append(j)

    if args.csv:
        print("node,center_x,center_y,member_count,out_degree")
        for idx, node in enumerate(graph.nodes):
            pos = perception.state_position(node.centroid.reshape(graph.state_shape))
            print(
                f"{idx},{float(pos[0])!r},{float(pos[1])!r},"
                f"{node.member_count},{len(adjacency.get(idx, []))}"
            )
        return EXIT_OK

    print(f"graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges, bind metric {graph.metric.kind}")
    for idx, node in enumerate(graph.nodes):
        pos = perception.state_position(node.centroid.reshape(graph.state_shape))
        print(f"node {idx}: center=({pos[0]:.4f}, {pos[1]:.4f}) members={node.member_count}")
    print("adjacency:")
    for i in sorted(adjacency):
        print(f"  {i} -> {', '.join(str(j) for j in adjacency[i])}")
    return EXIT_OK


_COMMANDS = {
    "gen-buffer": _cmd_gen_buffer,
    "build-graph": _cmd_build_graph,
    "evaluate": _cmd_evaluate,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, BuildError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:  # bad geometry, invalid sweep values, ...
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
