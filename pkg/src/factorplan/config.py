"""Flat key-value run configuration shared by the CLI and the harness.

One namespace merges the environment, graph, controller, planner, and
evaluation knobs. Files hold ``key = value`` lines (``#`` comments allowed);
every key is also a command-line flag. Unknown keys are rejected, and the
fully resolved config is echoed into each output artifact's provenance.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .baselines import CEMParams
from .controller import ControllerConfig
from .env import EnvConfig, GRID
from .graph import DistanceMetric, GraphConfig, GraphMetrics
from .harness import EvalSpec, default_satisfied_threshold


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


@dataclass
class RunConfig:
    # environment
    variant: str = GRID
    grid_side: int = 4
    table_width: float = 0.6
    table_height: float = 0.8
    objects: int = 4
    image_size: int = 64
    pick_threshold: float = math.nan  # nan: variant default
    place_threshold: float = math.nan
    color_palette_size: int = 13
    # buffer
    buffer_episodes: int = 5000
    episode_length: int = 5
    # graph
    clusters: int = 0  # 0: variant default (16 grid / 45 table)
    state_form: str = "auto"  # auto | mask | position
    isolate_metric: str = "auto"
    cluster_metric: str = "auto"
    bind_metric: str = "auto"
    # controller
    selection_mode: str = "stochastic"
    satisfied_threshold: float = math.nan
    action_mode: str = "retarget"
    bind_far_threshold: float = math.inf
    # planner (mpc)
    cem_iterations: int = 10
    cem_population: int = 250
    cem_elite_ratio: float = 0.05
    cem_horizon: int = 5
    cem_init_std: float = 0.3
    action_match_tol: float = math.nan
    # evaluation
    method: str = "ncs"
    setting: str = "complete"
    object_counts: tuple[int, ...] = (4, 5, 6, 7)
    episodes: int = 100
    seeds: int = 10
    horizon_multiplier: float = 4.0
    action_noise_std: float = 0.0
    # orchestration
    seed: int = 0
    jobs: int = 0  # 0: available parallelism

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def parse_value(cls, key: str, text: str):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cls(), key)
        if isinstance(current, bool):
            return _parse_bool(text)
        if isinstance(current, tuple):
            return _parse_int_list(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        return text.strip()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        overrides = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            overrides[key] = cls.parse_value(key, value)
        return cls(**overrides)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        for key in overrides:
            if key not in self.field_names():
                raise ConfigError(f"unknown config key {key!r}")
        return dataclasses.replace(self, **overrides)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    # -- derived component configs ----------------------------------------

    def env_config(self, object_count: int | None = None) -> EnvConfig:
        return EnvConfig(
            variant=self.variant,
            grid_side=self.grid_side,
            table_extent=(self.table_width, self.table_height),
            object_count=object_count if object_count is not None else self.objects,
            image_size=self.image_size,
            pick_threshold=None if math.isnan(self.pick_threshold) else self.pick_threshold,
            place_threshold=None if math.isnan(self.place_threshold) else self.place_threshold,
            color_palette_size=self.color_palette_size,
            seed=self.seed,
        )

    def resolved_state_form(self) -> str:
        if self.state_form != "auto":
            return self.state_form
        return "mask" if self.variant == GRID else "position"

    def graph_config(self) -> GraphConfig:
        form = self.resolved_state_form()
        defaults = GraphMetrics.for_state_form(form)
        metrics = GraphMetrics(
            isolate=defaults.isolate if self.isolate_metric == "auto" else DistanceMetric(self.isolate_metric),
            cluster=defaults.cluster if self.cluster_metric == "auto" else DistanceMetric(self.cluster_metric),
            bind=defaults.bind if self.bind_metric == "auto" else DistanceMetric(self.bind_metric),
        )
        n_clusters = self.clusters or (16 if self.variant == GRID else 45)
        return GraphConfig(n_clusters=n_clusters, metrics=metrics, seed=self.seed)

    def controller_config(self) -> ControllerConfig:
        threshold = self.satisfied_threshold
        if math.isnan(threshold):
            threshold = default_satisfied_threshold(self.env_config(), self.resolved_state_form())
        return ControllerConfig(
            selection_mode=self.selection_mode,
            satisfied_threshold=threshold,
            action_mode=self.action_mode,
            bind_far_threshold=self.bind_far_threshold,
            rng_seed=self.seed,
        )

    def cem_params(self) -> CEMParams:
        return CEMParams(
            iterations=self.cem_iterations,
            elite_ratio=self.cem_elite_ratio,
            population=self.cem_population,
            horizon=self.cem_horizon,
            init_std=self.cem_init_std,
        )

    def eval_spec(self) -> EvalSpec:
        return EvalSpec(
            method=self.method,
            setting=self.setting,
            object_counts=self.object_counts,
            episodes=self.episodes,
            seeds=self.seeds,
            horizon_multiplier=self.horizon_multiplier,
            action_noise_std=self.action_noise_std,
            base_seed=self.seed,
        )

    def resolved_action_match_tol(self) -> float:
        if math.isnan(self.action_match_tol):
            return self.env_config().resolved_pick_threshold()
        return self.action_match_tol
