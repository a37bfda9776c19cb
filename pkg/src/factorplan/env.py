"""Deterministic rearrangement simulators with raster observations.

Two variants share one pick-and-move action interface:

* ``grid``  -- objects live on the centers of a ``grid_side x grid_side``
  lattice over the unit square; destinations snap to the nearest cell.
* ``table`` -- objects live at continuous positions on a rectangular
  workspace; destinations are clamped to the reachable region.

Both are pure-function simulators: ``step`` maps ``(state, action)`` to a new
state and never mutates its input, so independent episodes can run in
parallel without shared state.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

GRID = "grid"
TABLE = "table"

SHAPE_SQUARE = "square"
SHAPE_DISC = "disc"
SHAPE_TRIANGLE = "triangle"
TABLE_SHAPES = (SHAPE_SQUARE, SHAPE_DISC, SHAPE_TRIANGLE)

SETTING_COMPLETE = "complete"
SETTING_PARTIAL = "partial"

RASTER_MAGIC = b"NCSR"

# 13 well-separated RGB fills for the table variant.
TABLE_PALETTE = np.array(
    [
        (0.90, 0.10, 0.10),
        (0.10, 0.75, 0.10),
        (0.15, 0.25, 0.95),
        (0.95, 0.85, 0.10),
        (0.85, 0.15, 0.85),
        (0.10, 0.85, 0.85),
        (0.95, 0.55, 0.10),
        (0.55, 0.15, 0.75),
        (0.55, 0.35, 0.10),
        (0.95, 0.95, 0.95),
        (0.55, 0.55, 0.55),
        (0.35, 0.55, 0.20),
        (0.60, 0.10, 0.30),
    ]
)

# Side (pixels) of the box a table object is drawn into. Odd, so the stencil
# has an unambiguous center pixel.
TABLE_STENCIL_PX = 9

_MIN_GRID_COLOR_DIST = 0.25


class ResetError(ValueError):
    """Raised when a task cannot be sampled under the configured geometry."""


@dataclass(frozen=True)
class EnvConfig:
    variant: str = GRID
    grid_side: int = 4
    table_extent: tuple[float, float] = (0.6, 0.8)
    object_count: int = 4
    image_size: int = 64
    pick_threshold: float | None = None
    place_threshold: float | None = None
    color_palette_size: int = 13
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in (GRID, TABLE):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.object_count < 1:
            raise ValueError("object_count must be >= 1")
        if self.variant == GRID:
            if self.grid_side < 2:
                raise ValueError("grid_side must be >= 2")
            if self.grid_side * self.grid_side < self.object_count:
                raise ValueError("more objects than grid locations")
            if self.image_size < 4 * self.grid_side:
                raise ValueError("image_size must be >= 4 * grid_side")
            if self.image_size % self.grid_side != 0:
                raise ValueError("image_size must be divisible by grid_side")
        else:
            if min(self.table_extent) <= 0:
                raise ValueError("table_extent must be positive")
            if self.image_size < 16:
                raise ValueError("image_size must be >= 16 for the table variant")
            if not 1 <= self.color_palette_size <= len(TABLE_PALETTE):
                raise ValueError("color_palette_size out of range")
        if self.resolved_pick_threshold() <= 0 or self.resolved_place_threshold() <= 0:
            raise ValueError("thresholds must be positive")

    def resolved_pick_threshold(self) -> float:
        if self.pick_threshold is not None:
            return self.pick_threshold
        if self.variant == GRID:
            return 0.5 / self.grid_side  # half a cell
        return 0.05

    def resolved_place_threshold(self) -> float:
        if self.place_threshold is not None:
            return self.place_threshold
        if self.variant == GRID:
            return 0.5 / self.grid_side
        return 0.05

    def workspace_extent(self) -> np.ndarray:
        if self.variant == GRID:
            return np.array([1.0, 1.0])
        return np.array(self.table_extent, dtype=float)

    def to_text(self) -> str:
        lines = [
            f"variant = {self.variant}",
            f"grid_side = {self.grid_side}",
            f"table_extent = {self.table_extent[0]},{self.table_extent[1]}",
            f"object_count = {self.object_count}",
            f"image_size = {self.image_size}",
            f"pick_threshold = {self.resolved_pick_threshold()!r}",
            f"place_threshold = {self.resolved_place_threshold()!r}",
            f"color_palette_size = {self.color_palette_size}",
            f"seed = {self.seed}",
        ]
        return "\n".join(lines) + "\n"

    _TEXT_KEYS = frozenset(
        {
            "variant",
            "grid_side",
            "table_extent",
            "object_count",
            "image_size",
            "pick_threshold",
            "place_threshold",
            "color_palette_size",
            "seed",
        }
    )

    @classmethod
    def from_text(cls, text: str) -> "EnvConfig":
        values: dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        unknown = set(values) - cls._TEXT_KEYS
        if unknown:
            raise ValueError(f"unknown EnvConfig keys: {sorted(unknown)}")
        missing = cls._TEXT_KEYS - set(values)
        if missing:
            raise ValueError(f"missing EnvConfig keys: {sorted(missing)}")
        ex, ey = (float(v) for v in values["table_extent"].split(","))
        return cls(
            variant=values["variant"],
            grid_side=int(values["grid_side"]),
            table_extent=(ex, ey),
            object_count=int(values["object_count"]),
            image_size=int(values["image_size"]),
            pick_threshold=float(values["pick_threshold"]),
            place_threshold=float(values["place_threshold"]),
            color_palette_size=int(values["color_palette_size"]),
            seed=int(values["seed"]),
        )


@dataclass(frozen=True)
class ObjectSpec:
    color: tuple[float, float, float]
    shape: str
    position: np.ndarray  # (2,) workspace coordinates, height is implicit

    def moved_to(self, position: np.ndarray) -> "ObjectSpec":
        return ObjectSpec(self.color, self.shape, np.asarray(position, dtype=float))


@dataclass(frozen=True)
class EnvState:
    objects: tuple[ObjectSpec, ...]
    step_count: int = 0

    def positions(self) -> np.ndarray:
        return np.array([o.position for o in self.objects], dtype=float)


@dataclass(frozen=True)
class Action:
    w: np.ndarray  # (2,) pick point
    dw: np.ndarray  # (2,) displacement

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))
        object.__setattr__(self, "dw", np.asarray(self.dw, dtype=float))

    def to_bytes(self) -> bytes:
        return struct.pack("<4d", self.w[0], self.w[1], self.dw[0], self.dw[1])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Action":
        wx, wy, dx, dy = struct.unpack("<4d", data)
        return cls(np.array([wx, wy]), np.array([dx, dy]))


@dataclass(frozen=True)
class Raster:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8, row-major

    def to_bytes(self) -> bytes:
        header = RASTER_MAGIC + struct.pack("<II", self.width, self.height)
        return header + self.pixels.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Raster":
        if data[:4] != RASTER_MAGIC:
            raise ValueError("bad raster magic")
        width, height = struct.unpack("<II", data[4:12])
        body = np.frombuffer(data[12:], dtype=np.uint8)
        if body.size != width * height * 3:
            raise ValueError("raster payload size mismatch")
        return cls(width, height, body.reshape(height, width, 3).copy())

    def equals(self, other: "Raster") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class Task:
    initial: Raster
    goal: Raster
    setting: str
    # Ground truth below is harness-only; planners must not read it.
    constrained_ids: frozenset[int]
    goal_positions: dict[int, np.ndarray]
    initial_positions: np.ndarray


def _quantize(color) -> np.ndarray:
    return np.round(np.asarray(color, dtype=float) * 255.0).astype(np.uint8)


def _make_stencil(shape: str, side: int) -> np.ndarray:
    """Binary footprint of a table object, recentered on its pixel centroid."""
    box = np.zeros((side, side), dtype=bool)
    c = (side - 1) / 2.0
    if shape == SHAPE_SQUARE:
        box[:, :] = True
    elif shape == SHAPE_DISC:
        rr, cc = np.mgrid[0:side, 0:side]
        box[(rr - c) ** 2 + (cc - c) ** 2 <= (side / 2.0) ** 2] = True
    elif shape == SHAPE_TRIANGLE:
        for r in range(side):
            half = r / 2.0
            lo = int(math.ceil(c - half))
            hi = int(math.floor(c + half))
            box[r, max(lo, 0) : min(hi, side - 1) + 1] = True
    else:
        raise ValueError(f"unknown shape {shape!r}")
    # Shift so the pixel centroid sits on the center pixel (within rounding);
    # keeps perceived positions unbiased across shapes.
    rows, cols = np.nonzero(box)
    dr = int(round(c - rows.mean()))
    dc = int(round(c - cols.mean()))
    if dr or dc:
        shifted = np.zeros_like(box)
        shifted[
            np.clip(rows + dr, 0, side - 1), np.clip(cols + dc, 0, side - 1)
        ] = True
        box = shifted
    return box


class Environment:
    """Simulator bound to one :class:`EnvConfig`.

    All methods are deterministic; randomness enters only through explicit
    seeds.
    """

    def __init__(self, config: EnvConfig):
        config.validate()
        self.config = config
        self.pick_threshold = config.resolved_pick_threshold()
        self.place_threshold = config.resolved_place_threshold()
        self.extent = config.workspace_extent()
        if config.variant == GRID:
            self.cell_px = config.image_size // config.grid_side
            n = config.grid_side
            centers = (np.arange(n) + 0.5) / n
            self.cell_centers = np.array(
                [(cx, cy) for cy in centers for cx in centers]
            )  # row-major over (y, x)
        else:
            self._stencils = {s: _make_stencil(s, TABLE_STENCIL_PX) for s in TABLE_SHAPES}
            w, h = config.image_size, config.image_size
            # Inflate footprints by one pixel on each side so that distinct
            # objects never produce touching pixel supports.
            self._sep = np.array(
                [
                    (TABLE_STENCIL_PX + 2) / w * self.extent[0],
                    (TABLE_STENCIL_PX + 2) / h * self.extent[1],
                ]
            )
            margin_px = TABLE_STENCIL_PX // 2 + 1
            self._lo = np.array(
                [margin_px / w * self.extent[0], margin_px / h * self.extent[1]]
            )
            self._hi = self.extent - self._lo

    # ------------------------------------------------------------------
    # geometry helpers

    def snap(self, point: np.ndarray) -> np.ndarray:
        """Nearest cell center (grid). Points outside map to edge cells."""
        n = self.config.grid_side
        idx = np.clip(np.floor(np.asarray(point) * n).astype(int), 0, n - 1)
        return (idx + 0.5) / n

    def cell_index(self, position: np.ndarray) -> int:
        n = self.config.grid_side
        idx = np.clip(np.floor(np.asarray(position) * n).astype(int), 0, n - 1)
        return int(idx[1]) * n + int(idx[0])

    def _table_overlaps(self, a: np.ndarray, b: np.ndarray) -> bool:
        d = np.abs(np.asarray(a) - np.asarray(b))
        return bool(d[0] < self._sep[0] and d[1] < self._sep[1])

    def position_free(self, state: EnvState, position: np.ndarray, ignore: int | None = None) -> bool:
        """Whether placing an object at ``position`` collides with the scene."""
        for i, obj in enumerate(state.objects):
            if i == ignore:
                continue
            if self.config.variant == GRID:
                if self.cell_index(obj.position) == self.cell_index(position):
                    return False
            elif self._table_overlaps(obj.position, position):
                return False
        return True

    def free_cells(self, state: EnvState) -> list[int]:
        occupied = {self.cell_index(o.position) for o in state.objects}
        total = self.config.grid_side**2
        return [c for c in range(total) if c not in occupied]

    # ------------------------------------------------------------------
    # sampling

    def _sample_grid_colors(self, rng: np.random.Generator) -> list[tuple[float, float, float]]:
        colors: list[np.ndarray] = []
        for _ in range(self.config.object_count):
            for _attempt in range(1000):
                c = rng.random(3)
                if all(np.linalg.norm(c - prev) >= _MIN_GRID_COLOR_DIST for prev in colors):
                    colors.append(c)
                    break
            else:
                raise ResetError("could not sample separated colors")
        return [tuple(c) for c in colors]

    def _sample_table_positions(
        self, rng: np.random.Generator, count: int, avoid: list[np.ndarray]
    ) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for _ in range(count):
            for _attempt in range(500):
                p = rng.uniform(self._lo, self._hi)
                if all(not self._table_overlaps(p, q) for q in avoid + out):
                    out.append(p)
                    break
            else:
                raise ResetError("table too crowded to place objects")
        return out

    def random_state(self, rng: np.random.Generator) -> EnvState:
        """Objects at random non-overlapping locations (no task attached)."""
        k = self.config.object_count
        if self.config.variant == GRID:
            cells = rng.choice(self.config.grid_side**2, size=k, replace=False)
            colors = self._sample_grid_colors(rng)
            objects = tuple(
                ObjectSpec(colors[i], SHAPE_SQUARE, self.cell_centers[cells[i]].copy())
                for i in range(k)
            )
        else:
            positions = self._sample_table_positions(rng, k, [])
            color_ids = rng.choice(self.config.color_palette_size, size=k, replace=False)
            shapes = rng.integers(0, len(TABLE_SHAPES), size=k)
            objects = tuple(
                ObjectSpec(
                    tuple(TABLE_PALETTE[color_ids[i]]),
                    TABLE_SHAPES[shapes[i]],
                    positions[i],
                )
                for i in range(k)
            )
        return EnvState(objects=objects, step_count=0)

    def state_from_positions(self, positions: np.ndarray, template: EnvState | None = None) -> EnvState:
        """State with the given positions, reusing appearances from ``template``."""
        positions = np.asarray(positions, dtype=float)
        if template is not None:
            objects = tuple(
                o.moved_to(positions[i]) for i, o in enumerate(template.objects)
            )
        else:
            colors = [tuple(TABLE_PALETTE[i % len(TABLE_PALETTE)]) for i in range(len(positions))]
            objects = tuple(
                ObjectSpec(colors[i], SHAPE_SQUARE, positions[i]) for i in range(len(positions))
            )
        return EnvState(objects=objects, step_count=0)

    def reset(self, seed: int, setting: str = SETTING_COMPLETE) -> tuple[EnvState, Task]:
        """Sample a start state plus a rearrangement task.

        Goal placements are distinct from each other and from every initial
        placement, so every sampled constraint starts unsatisfied. Identical
        ``(config, seed, setting)`` always yields an identical pair.
        """
        if setting not in (SETTING_COMPLETE, SETTING_PARTIAL):
            raise ValueError(f"unknown setting {setting!r}")
        rng = np.random.default_rng(seed)
        k = self.config.object_count

        if self.config.variant == GRID:
            n_cells = self.config.grid_side**2
            if setting == SETTING_COMPLETE:
                constrained = list(range(k))
            else:
                while True:
                    mask = rng.random(k) < 0.5
                    if mask.any():
                        break
                constrained = [i for i in range(k) if mask[i]]
            if k + len(constrained) > n_cells:
                raise ResetError(
                    "initial and goal cells cannot be disjoint: "
                    f"{k} objects + {len(constrained)} goals > {n_cells} cells"
                )
            state = self.random_state(rng)
            occupied = [self.cell_index(o.position) for o in state.objects]
            free = [c for c in range(n_cells) if c not in occupied]
            goal_cells = rng.choice(len(free), size=len(constrained), replace=False)
            goal_positions = {
                idx: self.cell_centers[free[goal_cells[j]]].copy()
                for j, idx in enumerate(constrained)
            }
        else:
            if setting == SETTING_COMPLETE:
                constrained = list(range(k))
            else:
                constrained = sorted(rng.choice(k, size=min(4, k), replace=False).tolist())
            for _restart in range(50):
                try:
                    state = self.random_state(rng)
                    initial = [o.position for o in state.objects]
                    goals = self._sample_table_positions(rng, len(constrained), initial)
                    break
                except ResetError:
                    continue
            else:
                raise ResetError("could not sample a non-overlapping table layout")
            goal_positions = {idx: goals[j] for j, idx in enumerate(constrained)}

        task = self.make_task(state, goal_positions, setting)
        return state, task

    def make_task(
        self, state: EnvState, goal_positions: dict[int, np.ndarray], setting: str
    ) -> Task:
        """Render a task for ``state``; only constrained objects appear in the goal."""
        goal_objects = tuple(
            state.objects[i].moved_to(goal_positions[i]) for i in sorted(goal_positions)
        )
        goal_state = EnvState(objects=goal_objects)
        return Task(
            initial=self.render(state),
            goal=self.render(goal_state),
            setting=setting,
            constrained_ids=frozenset(goal_positions),
            goal_positions={i: np.asarray(p, dtype=float) for i, p in goal_positions.items()},
            initial_positions=state.positions(),
        )

    # ------------------------------------------------------------------
    # dynamics

    def step(self, state: EnvState, action: Action) -> EnvState:
        """Apply one pick-and-move action.

        The nearest object within the pick threshold (ties: lowest index) is
        moved to the snapped/clamped destination unless that destination
        collides with another object; every failure mode is a no-op that still
        increments ``step_count``. At most one object ever moves.
        """
        positions = state.positions()
        dists = np.linalg.norm(positions - action.w, axis=1)
        candidates = np.nonzero(dists <= self.pick_threshold)[0]
        picked: int | None = None
        if candidates.size:
            picked = int(candidates[np.argmin(dists[candidates])])

        new_objects = state.objects
        if picked is not None:
            target = action.w + action.dw
            if self.config.variant == GRID:
                dest = self.snap(target)
            else:
                dest = np.clip(target, self._lo, self._hi)
            if self.position_free(state, dest, ignore=picked):
                objs = list(state.objects)
                objs[picked] = objs[picked].moved_to(dest)
                new_objects = tuple(objs)
        return EnvState(objects=new_objects, step_count=state.step_count + 1)

    def moved_object(self, before: EnvState, after: EnvState) -> int | None:
        """Index of the object that moved across a transition, if any."""
        pb, pa = before.positions(), after.positions()
        changed = np.nonzero(np.linalg.norm(pb - pa, axis=1) > 1e-12)[0]
        if changed.size == 0:
            return None
        if changed.size > 1:
            raise AssertionError("more than one object moved in a single step")
        return int(changed[0])

    # ------------------------------------------------------------------
    # observation & scoring

    def render(self, state: EnvState) -> Raster:
        size = self.config.image_size
        img = np.zeros((size, size, 3), dtype=np.uint8)
        if self.config.variant == GRID:
            c = self.cell_px
            inset = 1 if c >= 6 else 0
            for obj in state.objects:
                n = self.config.grid_side
                ix = int(np.clip(math.floor(obj.position[0] * n), 0, n - 1))
                iy = int(np.clip(math.floor(obj.position[1] * n), 0, n - 1))
                img[
                    iy * c + inset : (iy + 1) * c - inset,
                    ix * c + inset : (ix + 1) * c - inset,
                ] = _quantize(obj.color)
        else:
            side = TABLE_STENCIL_PX
            half = side // 2
            for obj in state.objects:
                col = int(np.clip(math.floor(obj.position[0] / self.extent[0] * size), 0, size - 1))
                row = int(np.clip(math.floor(obj.position[1] / self.extent[1] * size), 0, size - 1))
                r0, c0 = row - half, col - half
                stencil = self._stencils[obj.shape]
                rr, cc = np.nonzero(stencil)
                rr = np.clip(rr + r0, 0, size - 1)
                cc = np.clip(cc + c0, 0, size - 1)
                img[rr, cc] = _quantize(obj.color)
        return Raster(size, size, img)

    def unsatisfied_count(self, state: EnvState, task: Task) -> int:
        """Constrained objects farther than the place threshold from their goal."""
        count = 0
        for i in task.constrained_ids:
            d = np.linalg.norm(state.objects[i].position - task.goal_positions[i])
            if d > self.place_threshold:
                count += 1
        return count


def reset(config: EnvConfig, seed: int, setting: str = SETTING_COMPLETE) -> tuple[EnvState, Task]:
    return Environment(config).reset(seed, setting)


def step(config: EnvConfig, state: EnvState, action: Action) -> EnvState:
    return Environment(config).step(state, action)


def render(config: EnvConfig, state: EnvState) -> Raster:
    return Environment(config).render(state)


def unsatisfied_count(config: EnvConfig, state: EnvState, task: Task) -> int:
    return Environment(config).unsatisfied_count(state, task)
