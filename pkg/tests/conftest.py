"""Shared fixtures: small buffers and graphs reused across unit tests.

Sizes here are deliberately small; the acceptance suite builds its own
full-scale artifacts.
"""
from __future__ import annotations

import pytest

from factorplan.env import EnvConfig
from factorplan.harness import build_artifacts, generate_buffer
from factorplan.perception import Perception


@pytest.fixture(scope="session")
def grid_cfg():
    return EnvConfig(variant="grid", object_count=4)


@pytest.fixture(scope="session")
def table_cfg():
    return EnvConfig(variant="table", object_count=4)


@pytest.fixture(scope="session")
def grid_buffer(grid_cfg):
    # 400 episodes = 1600 transitions; seed chosen so every ordered cell pair
    # occurs (full 240-edge coverage, asserted in grid_artifacts).
    return generate_buffer(grid_cfg, episodes=400, seed=13)


@pytest.fixture(scope="session")
def grid_artifacts(grid_cfg, grid_buffer):
    artifacts = build_artifacts(grid_cfg, buffer=grid_buffer)
    assert len(artifacts.graph.edges) == 240
    return artifacts


@pytest.fixture(scope="session")
def grid_graph(grid_artifacts):
    return grid_artifacts.graph


@pytest.fixture(scope="session")
def grid_perception(grid_cfg):
    return Perception.from_env_config(grid_cfg)


@pytest.fixture(scope="session")
def table_buffer(table_cfg):
    return generate_buffer(table_cfg, episodes=400, seed=11)


@pytest.fixture(scope="session")
def table_artifacts(table_cfg, table_buffer):
    return build_artifacts(table_cfg, buffer=table_buffer)


@pytest.fixture(scope="session")
def table_perception(table_cfg):
    return Perception.from_env_config(table_cfg)
