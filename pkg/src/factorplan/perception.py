"""Entity extraction from raster observations.

A deterministic connected-component segmenter plays the role a learned
object-centric encoder would fill behind the same interface: each visible
object becomes one entity carrying an action-invariant type vector (mean RGB
plus a small shape signature) and an action-dependent state (either a binary
occupancy mask or a workspace-coordinate centroid).

The contract a replacement encoder must satisfy across a single-object move:
the moved entity is identifiable, its type is unchanged, and every other
entity is untouched. ``check_filter_criteria`` measures exactly that.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .controller import align
from .env import EnvConfig, Raster, GRID

STATE_MASK = "mask"
STATE_POSITION = "position"

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class Entity:
    z: np.ndarray  # (7,) type vector: mean RGB + 4 normalized central moments
    state: np.ndarray  # (H, W) bool mask or (2,) workspace position


class EntitySet:
    """Unordered collection of entities; indices carry no meaning."""

    def __init__(self, entities):
        self.entities = tuple(entities)

    def __len__(self):
        return len(self.entities)

    def __iter__(self):
        return iter(self.entities)

    def __getitem__(self, i) -> Entity:
        return self.entities[i]

    def types(self) -> np.ndarray:
        return np.array([e.z for e in self.entities], dtype=float)

    def states(self) -> list[np.ndarray]:
        return [e.state for e in self.entities]

    def shuffled(self, rng: np.random.Generator) -> "EntitySet":
        order = rng.permutation(len(self.entities))
        return EntitySet([self.entities[i] for i in order])


def _shape_signature(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Four scale-normalized central moments of a pixel component."""
    n = rows.size
    r = rows - rows.mean()
    c = cols - cols.mean()
    mu20 = np.sum(c * c)
    mu02 = np.sum(r * r)
    mu11 = np.sum(r * c)
    mu22 = np.sum(r * r * c * c)
    return np.array([mu20 / n**2, mu11 / n**2, mu02 / n**2, mu22 / n**3])


class Perception:
    """Raster -> EntitySet extractor bound to one observation geometry."""

    def __init__(self, image_size: int, extent, state_form: str):
        if state_form not in (STATE_MASK, STATE_POSITION):
            raise ValueError(f"unknown state form {state_form!r}")
        self.image_size = image_size
        self.extent = np.asarray(extent, dtype=float)
        self.state_form = state_form

    @classmethod
    def from_env_config(cls, config: EnvConfig, state_form: str | None = None) -> "Perception":
        if state_form is None:
            state_form = STATE_MASK if config.variant == GRID else STATE_POSITION
        return cls(config.image_size, config.workspace_extent(), state_form)

    def __call__(self, raster: Raster) -> EntitySet:
        return self.perceive(raster)

    def perceive(self, raster: Raster) -> EntitySet:
        """One entity per 4-connected same-color component.

        Touching same-color objects merge into a single entity; callers must
        tolerate the resulting cardinality mismatch. Output order is
        implementation-defined.
        """
        img = raster.pixels
        keys = (
            img[:, :, 0].astype(np.int32) << 16
            | img[:, :, 1].astype(np.int32) << 8
            | img[:, :, 2].astype(np.int32)
        )
        entities: list[Entity] = []
        for key in np.unique(keys):
            if key == 0:  # background
                continue
            mask = keys == key
            labels, count = ndimage.label(mask, structure=_FOUR_CONN)
            color = np.array([(key >> 16) & 255, (key >> 8) & 255, key & 255]) / 255.0
            for lab in range(1, count + 1):
                component = labels == lab
                rows, cols = np.nonzero(component)
                z = np.concatenate([color, _shape_signature(rows.astype(float), cols.astype(float))])
                if self.state_form == STATE_MASK:
                    state = component
                else:
                    state = self._pixel_to_workspace(rows.mean(), cols.mean())
                entities.append(Entity(z=z, state=state))
        return EntitySet(entities)

    def _pixel_to_workspace(self, row: float, col: float) -> np.ndarray:
        return np.array(
            [
                (col + 0.5) / self.image_size * self.extent[0],
                (row + 0.5) / self.image_size * self.extent[1],
            ]
        )

    def state_position(self, state: np.ndarray) -> np.ndarray:
        """Workspace position summary of a state (occupancy center for masks)."""
        state = np.asarray(state)
        if state.shape == (2,):
            return state.astype(float)
        total = float(state.sum())
        if total <= 0:
            raise ValueError("cannot locate an empty mask")
        rows, cols = np.nonzero(state > 0 if state.dtype != bool else state)
        if state.dtype == bool:
            weights = np.ones(rows.size)
        else:
            weights = state[rows, cols].astype(float)
        row = float(np.average(rows, weights=weights))
        col = float(np.average(cols, weights=weights))
        return self._pixel_to_workspace(row, col)


@dataclass
class CriteriaReport:
    """Per-transition health check of the extractor contract."""

    moved_index: int | None
    isolate_margin: float
    max_type_drift: float
    max_nonmoved_state_drift: float
    cardinality_mismatch: bool
    matched_count: int

    CSV_HEADER = (
        "moved_index,isolate_margin,max_type_drift,"
        "max_nonmoved_state_drift,cardinality_mismatch,matched_count"
    )

    def to_csv_row(self) -> str:
        moved = "" if self.moved_index is None else str(self.moved_index)
        return (
            f"{moved},{self.isolate_margin!r},{self.max_type_drift!r},"
            f"{self.max_nonmoved_state_drift!r},{int(self.cardinality_mismatch)},"
            f"{self.matched_count}"
        )


def check_filter_criteria(before: EntitySet, after: EntitySet, metric, position_fn=None) -> CriteriaReport:
    """Evaluate the three extractor criteria over one transition.

    Entities are matched across the transition by type; the moved entity is
    the matched pair whose states differ most under ``metric``. State drift is
    measured on position summaries (``position_fn``, defaulting to raw
    positions / pixel mask centers) so the result is threshold-comparable.
    """
    from .graph import isolate  # local import: graph depends on controller only

    if position_fn is None:
        position_fn = _default_position
    mismatch = len(before) != len(after)
    if len(before) == 0 or len(after) == 0:
        return CriteriaReport(None, 0.0, 0.0, 0.0, mismatch, 0)

    alignment = align(current=after, goal=before)
    pairs = sorted(alignment.pi.items())  # (before index, after index)
    matched_before = EntitySet([before[i] for i, _ in pairs])
    matched_after = EntitySet([after[j] for _, j in pairs])
    moved_local, margin = isolate(matched_before, matched_after, metric)

    type_drift = max(
        float(np.linalg.norm(b.z - a.z))
        for b, a in zip(matched_before, matched_after)
    )
    state_drift = 0.0
    for idx, (b, a) in enumerate(zip(matched_before, matched_after)):
        if idx == moved_local:
            continue
        drift = float(np.linalg.norm(position_fn(b.state) - position_fn(a.state)))
        state_drift = max(state_drift, drift)

    return CriteriaReport(
        moved_index=pairs[moved_local][0],
        isolate_margin=margin,
        max_type_drift=type_drift,
        max_nonmoved_state_drift=state_drift,
        cardinality_mismatch=mismatch,
        matched_count=len(pairs),
    )


def _default_position(state: np.ndarray) -> np.ndarray:
    state = np.asarray(state)
    if state.shape == (2,):
        return state.astype(float)
    rows, cols = np.nonzero(state)
    return np.array([rows.mean(), cols.mean()])
