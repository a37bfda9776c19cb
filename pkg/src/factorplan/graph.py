"""Factorized transition graph over per-entity state clusters.

The graph is built from an offline experience buffer in three passes: find
the moved entity in every transition, cluster the pooled before/after states
of moved entities into nodes, then bind each transition's endpoints to nodes
and tag the connecting edge with the transition's action (later transitions
overwrite earlier edges for the same node pair). Edges carry no type
information, which is what lets a transition recorded for one object be
reused for any other.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .controller import align
from .env import Action, EnvConfig, Raster

COSINE = "cosine"
SQUARED_EUCLIDEAN = "squared_euclidean"
IOU = "iou"

_KMEANS_TOL = 1e-6
_KMEANS_MAX_ITER = 300

GRAPH_FORMAT_VERSION = 1
BUFFER_MAGIC = b"NCSB"


class FormatError(ValueError):
    """Raised when a serialized artifact cannot be parsed."""


class BuildError(RuntimeError):
    """Raised when a buffer yields no usable transitions."""


# ---------------------------------------------------------------------------
# distance metrics


class DistanceMetric:
    """Pluggable nonnegative distance over states (vectors or masks)."""

    KINDS = (COSINE, SQUARED_EUCLIDEAN, IOU)

    def __init__(self, kind: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown metric kind {kind!r}")
        self.kind = kind

    def __repr__(self):
        return f"DistanceMetric({self.kind!r})"

    def __eq__(self, other):
        return isinstance(other, DistanceMetric) and self.kind == other.kind

    def __call__(self, a, b) -> float:
        a = np.asarray(a, dtype=float).ravel()
        b = np.asarray(b, dtype=float).ravel()
        if a.shape != b.shape:
            raise ValueError("state representations do not match")
        if self.kind == SQUARED_EUCLIDEAN:
            d = a - b
            return float(d @ d)
        if self.kind == COSINE:
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            if na == 0.0 and nb == 0.0:
                return 0.0
            if na == 0.0 or nb == 0.0:
                return 1.0
            return float(1.0 - (a @ b) / (na * nb))
        # IoU is defined on occupancy masks; float centroids threshold at 0.5.
        am = a >= 0.5
        bm = b >= 0.5
        union = np.logical_or(am, bm).sum()
        if union == 0:
            return 0.0
        inter = np.logical_and(am, bm).sum()
        return float(1.0 - inter / union)

    def pairwise(self, states: np.ndarray, centroids: np.ndarray) -> np.ndarray:
        """(N, M) distances between row-stacked flattened states and centroids."""
        X = np.asarray(states, dtype=float)
        C = np.asarray(centroids, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if C.ndim == 1:
            C = C[None, :]
        if X.shape[1] != C.shape[1]:
            raise ValueError("state representations do not match")
        if self.kind == SQUARED_EUCLIDEAN:
            xx = np.einsum("ij,ij->i", X, X)[:, None]
            cc = np.einsum("ij,ij->i", C, C)[None, :]
            return np.maximum(xx + cc - 2.0 * (X @ C.T), 0.0)
        if self.kind == COSINE:
            xn = np.linalg.norm(X, axis=1, keepdims=True)
            cn = np.linalg.norm(C, axis=1, keepdims=True)
            num = X @ C.T
            out = np.ones((X.shape[0], C.shape[0]))
            both = (xn > 0) & (cn.T > 0)
            out[both] = 1.0 - (num / np.where(xn == 0, 1, xn) / np.where(cn.T == 0, 1, cn.T))[both]
            zz = (xn == 0) & (cn.T == 0)
            out[zz] = 0.0
            return out
        Xm = (X >= 0.5).astype(float)
        Cm = (C >= 0.5).astype(float)
        inter = Xm @ Cm.T
        union = Xm.sum(axis=1)[:, None] + Cm.sum(axis=1)[None, :] - inter
        out = np.ones_like(inter)
        nz = union > 0
        out[nz] = 1.0 - inter[nz] / union[nz]
        out[~nz] = 0.0
        return out


def distance(metric: DistanceMetric, a, b) -> float:
    return metric(a, b)


def _flatten_states(states) -> np.ndarray:
    # Preserves dtype: boolean masks stay compact until after deduplication.
    return np.stack([np.asarray(s).ravel() for s in states])


def _dedupe_rows(flat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(uniques, inverse, counts) via row hashing; first occurrence order."""
    seen: dict[bytes, int] = {}
    inverse = np.empty(flat.shape[0], dtype=int)
    rows = []
    for i in range(flat.shape[0]):
        key = flat[i].tobytes()
        j = seen.get(key)
        if j is None:
            j = len(rows)
            seen[key] = j
            rows.append(flat[i])
        inverse[i] = j
    uniques = np.stack(rows).astype(float)
    counts = np.bincount(inverse, minlength=len(rows))
    return uniques, inverse, counts


# ---------------------------------------------------------------------------
# graph types


@dataclass(frozen=True)
class GraphMetrics:
    isolate: DistanceMetric
    cluster: DistanceMetric
    bind: DistanceMetric

    @classmethod
    def for_state_form(cls, state_form: str) -> "GraphMetrics":
        # Mask states: angular isolate/bind, overlap-based clustering.
        # Position states: squared Euclidean throughout (angles between
        # absolute positions carry no displacement information).
        if state_form == "mask":
            return cls(DistanceMetric(COSINE), DistanceMetric(IOU), DistanceMetric(COSINE))
        return cls(
            DistanceMetric(SQUARED_EUCLIDEAN),
            DistanceMetric(SQUARED_EUCLIDEAN),
            DistanceMetric(SQUARED_EUCLIDEAN),
        )


@dataclass
class GraphNode:
    centroid: np.ndarray  # flattened mean state (mean mask or mean position)
    member_count: int


@dataclass(frozen=True)
class GraphEdge:
    from_node: int
    to_node: int
    action: Action


@dataclass
class GraphConfig:
    n_clusters: int = 16
    metrics: GraphMetrics = field(
        default_factory=lambda: GraphMetrics.for_state_form("mask")
    )
    seed: int = 0


class TransitionGraph:
    """Immutable after construction; safe to share across workers."""

    def __init__(self, nodes, edges, metrics: GraphMetrics, state_shape, provenance=None):
        self.nodes: list[GraphNode] = list(nodes)
        self.edges: dict[tuple[int, int], GraphEdge] = dict(edges)
        self.metrics = metrics
        self.state_shape = tuple(state_shape)
        self.provenance = provenance or {}
        self._centroid_matrix = (
            np.stack([n.centroid for n in self.nodes]) if self.nodes else None
        )

    @property
    def metric(self) -> DistanceMetric:
        """The bind metric, recorded so binding is reproducible."""
        return self.metrics.bind

    def bind(self, state) -> tuple[int, float]:
        """Nearest node index under the bind metric, plus the distance."""
        if not self.nodes:
            raise ValueError("graph has no nodes")
        flat = np.asarray(state, dtype=float).ravel()[None, :]
        dists = self.metrics.bind.pairwise(flat, self._centroid_matrix)[0]
        idx = int(np.argmin(dists))
        return idx, float(dists[idx])

    def bind_many(self, states) -> np.ndarray:
        flat = _flatten_states(states)
        uniq, inverse, _counts = _dedupe_rows(flat)
        per_unique = np.argmin(self.metrics.bind.pairwise(uniq, self._centroid_matrix), axis=1)
        return per_unique[inverse]

    def node_count(self) -> int:
        return len(self.nodes)

    # -- serialization ----------------------------------------------------

    def to_json_bytes(self) -> bytes:
        payload = {
            "format_version": GRAPH_FORMAT_VERSION,
            "metric": {
                "isolate": self.metrics.isolate.kind,
                "cluster": self.metrics.cluster.kind,
                "bind": self.metrics.bind.kind,
            },
            "state_shape": list(self.state_shape),
            "nodes": [
                {"centroid": n.centroid.tolist(), "member_count": n.member_count}
                for n in self.nodes
            ],
            "edges": [
                {
                    "from": e.from_node,
                    "to": e.to_node,
                    "action": {"w": e.action.w.tolist(), "dw": e.action.dw.tolist()},
                }
                for (_, _), e in sorted(self.edges.items())
            ],
            "provenance": self.provenance,
        }
        return json.dumps(payload, sort_keys=True, indent=1).encode()

    @classmethod
    def from_json_bytes(cls, data: bytes) -> "TransitionGraph":
        try:
            payload = json.loads(data.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"not a graph file: {exc}") from exc
        if payload.get("format_version") != GRAPH_FORMAT_VERSION:
            raise FormatError("unsupported graph format version")
        metrics = GraphMetrics(
            DistanceMetric(payload["metric"]["isolate"]),
            DistanceMetric(payload["metric"]["cluster"]),
            DistanceMetric(payload["metric"]["bind"]),
        )
        nodes = [
            GraphNode(np.asarray(n["centroid"], dtype=float), int(n["member_count"]))
            for n in payload["nodes"]
        ]
        edges = {}
        for e in payload["edges"]:
            action = Action(np.asarray(e["action"]["w"]), np.asarray(e["action"]["dw"]))
            edges[(int(e["from"]), int(e["to"]))] = GraphEdge(int(e["from"]), int(e["to"]), action)
        return cls(nodes, edges, metrics, payload["state_shape"], payload.get("provenance", {}))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_json_bytes())

    @classmethod
    def load(cls, path) -> "TransitionGraph":
        with open(path, "rb") as fh:
            return cls.from_json_bytes(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# experience buffer


@dataclass
class Episode:
    rasters: list[Raster]  # length T + 1
    actions: list[Action]  # length T
    moved_indices: list[int] | None = None  # ground truth, never serialized

    def __post_init__(self):
        if len(self.rasters) != len(self.actions) + 1:
            raise ValueError("episode needs exactly one more raster than actions")
        if not self.actions:
            raise ValueError("episode must contain at least one transition")


@dataclass
class ExperienceBuffer:
    episodes: list[Episode]
    env_config: EnvConfig
    seed: int

    def n_transitions(self) -> int:
        return sum(len(ep.actions) for ep in self.episodes)

    def _byte_chunks(self):
        config_text = self.env_config.to_text().encode()
        yield BUFFER_MAGIC
        yield struct.pack("<I", len(config_text))
        yield config_text
        yield struct.pack("<q", self.seed)
        yield struct.pack("<I", len(self.episodes))
        for ep in self.episodes:
            yield struct.pack("<I", len(ep.actions))
            for raster, action in zip(ep.rasters, ep.actions):
                yield raster.to_bytes()
                yield action.to_bytes()
            yield ep.rasters[-1].to_bytes()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            for chunk in self._byte_chunks():
                fh.write(chunk)

    def digest(self) -> str:
        h = hashlib.sha256()
        for chunk in self._byte_chunks():
            h.update(chunk)
        return h.hexdigest()

    @classmethod
    def load(cls, path) -> "ExperienceBuffer":
        with open(path, "rb") as fh:
            data = fh.read()
        return cls.from_bytes(data)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ExperienceBuffer":
        try:
            if data[:4] != BUFFER_MAGIC:
                raise FormatError("bad buffer magic")
            off = 4
            (config_len,) = struct.unpack_from("<I", data, off)
            off += 4
            config = EnvConfig.from_text(data[off : off + config_len].decode())
            off += config_len
            (seed,) = struct.unpack_from("<q", data, off)
            off += 8
            (n_episodes,) = struct.unpack_from("<I", data, off)
            off += 4
            raster_size = 12 + config.image_size * config.image_size * 3
            episodes = []
            for _ in range(n_episodes):
                (n_actions,) = struct.unpack_from("<I", data, off)
                off += 4
                rasters, actions = [], []
                for _t in range(n_actions):
                    rasters.append(Raster.from_bytes(data[off : off + raster_size]))
                    off += raster_size
                    actions.append(Action.from_bytes(data[off : off + 32]))
                    off += 32
                rasters.append(Raster.from_bytes(data[off : off + raster_size]))
                off += raster_size
                episodes.append(Episode(rasters, actions))
            if off != len(data):
                raise FormatError("trailing bytes in buffer file")
            return cls(episodes, config, int(seed))
        except (struct.error, ValueError, IndexError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"corrupt buffer file: {exc}") from exc


# ---------------------------------------------------------------------------
# core operations


def isolate(before, after, metric: DistanceMetric) -> tuple[int, float]:
    """Index of the entity whose state changed most, with the runner-up margin.

    Entity indices of the two sets must already correspond. Ties resolve to
    the lowest index; the margin (max minus second max) is diagnostic only.
    """
    if len(before) == 0 or len(after) == 0:
        raise ValueError("cannot isolate over empty entity sets")
    if len(before) != len(after):
        raise ValueError("entity sets must have equal cardinality")
    dists = np.array(
        [float(metric(b.state, a.state)) for b, a in zip(before, after)]
    )
    idx = int(np.argmax(dists))
    if dists.size == 1:
        return idx, float(dists[idx])
    second = float(np.partition(dists, -2)[-2])
    return idx, float(dists[idx] - second)


def cluster(states, n_clusters: int, metric: DistanceMetric, seed: int) -> list[GraphNode]:
    """K-means over states with a pluggable metric.

    Seeding follows the distance-weighted scheme (weights are metric
    distances, which reduces to the classic squared-Euclidean rule for that
    metric). Lloyd updates use elementwise means; an empty cluster is reseeded
    to the point currently farthest from its centroid. Runs are deterministic
    given (inputs, seed). Duplicate states are pooled internally, so at most
    ``min(n_clusters, distinct states)`` nodes are returned.
    """
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if len(states) < n_clusters:
        raise ValueError("fewer states than requested clusters")
    X = _flatten_states(states)
    uniq, _inverse, counts = _dedupe_rows(X)
    weights = counts.astype(float)
    n_uniq = uniq.shape[0]
    rng = np.random.default_rng(seed)

    if n_uniq <= n_clusters:
        return [
            GraphNode(centroid=uniq[i].copy(), member_count=int(counts[i]))
            for i in range(n_uniq)
        ]

    # distance-weighted seeding
    first = int(rng.choice(n_uniq, p=weights / weights.sum()))
    chosen = [first]
    best = metric.pairwise(uniq, uniq[first][None, :])[:, 0]
    while len(chosen) < n_clusters:
        w = best * weights
        total = w.sum()
        if total <= 0:
            break
        nxt = int(rng.choice(n_uniq, p=w / total))
        chosen.append(nxt)
        best = np.minimum(best, metric.pairwise(uniq, uniq[nxt][None, :])[:, 0])
    centroids = uniq[chosen].astype(float)

    assign = np.zeros(n_uniq, dtype=int)
    for _ in range(_KMEANS_MAX_ITER):
        dists = metric.pairwise(uniq, centroids)
        assign = np.argmin(dists, axis=1)
        new_centroids = centroids.copy()
        empties = []
        for m in range(len(centroids)):
            members = assign == m
            if not members.any():
                empties.append(m)
                continue
            w = weights[members]
            new_centroids[m] = np.average(uniq[members], axis=0, weights=w)
        if empties:
            # farthest-point reseeding, deterministic, one point per empty slot
            far = dists[np.arange(n_uniq), assign].copy()
            for m in empties:
                idx = int(np.argmax(far))
                new_centroids[m] = uniq[idx]
                far[idx] = -1.0
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < _KMEANS_TOL and not empties:
            break

    dists = metric.pairwise(uniq, centroids)
    assign = np.argmin(dists, axis=1)
    nodes = []
    for m in range(len(centroids)):
        members = assign == m
        nodes.append(
            GraphNode(centroid=centroids[m].copy(), member_count=int(weights[members].sum()))
        )
    return nodes


def bind(entity_state, graph: TransitionGraph) -> tuple[int, float]:
    return graph.bind(entity_state)


# ---------------------------------------------------------------------------
# graph construction


@dataclass
class MovedTransition:
    state_before: np.ndarray
    state_after: np.ndarray
    action: Action


@dataclass
class BuildReport:
    n_transitions: int
    skipped_perception: int
    dropped_self_loops: int
    n_nodes: int
    n_edges: int
    node_member_counts: list[int]


def extract_entity_transitions(buffer: ExperienceBuffer, perception, isolate_metric: DistanceMetric):
    """Per-episode lists of moved-entity transitions, plus the skip count.

    Each observation is segmented once; consecutive entity sets are matched by
    type before isolating the moved entity. Transitions whose endpoint
    cardinalities disagree are skipped and counted.
    """
    per_episode: list[list[MovedTransition]] = []
    skipped = 0
    for ep in buffer.episodes:
        sets = [perception(r) for r in ep.rasters]
        out: list[MovedTransition] = []
        for t, action in enumerate(ep.actions):
            before, after = sets[t], sets[t + 1]
            if len(before) == 0 or len(before) != len(after):
                skipped += 1
                continue
            alignment = align(current=after, goal=before)
            pairs = sorted(alignment.pi.items())
            from .perception import EntitySet

            mb = EntitySet([before[i] for i, _ in pairs])
            ma = EntitySet([after[j] for _, j in pairs])
            idx, _ = isolate(mb, ma, isolate_metric)
            out.append(
                MovedTransition(
                    state_before=np.asarray(mb[idx].state),
                    state_after=np.asarray(ma[idx].state),
                    action=action,
                )
            )
        per_episode.append(out)
    return per_episode, skipped


def build_graph_from_transitions(
    per_episode_transitions,
    config: GraphConfig,
    skipped: int = 0,
    provenance: dict | None = None,
) -> tuple[TransitionGraph, BuildReport]:
    transitions = [t for ep in per_episode_transitions for t in ep]
    if not transitions:
        raise BuildError("no usable transitions: every transition was skipped")

    state_shape = np.asarray(transitions[0].state_before).shape
    pool = [t.state_before for t in transitions] + [t.state_after for t in transitions]
    nodes = cluster(pool, config.n_clusters, config.metrics.cluster, config.seed)
    graph = TransitionGraph(nodes, {}, config.metrics, state_shape, provenance)

    before_ids = graph.bind_many([t.state_before for t in transitions])
    after_ids = graph.bind_many([t.state_after for t in transitions])
    dropped = 0
    for t, i, j in zip(transitions, before_ids, after_ids):
        i, j = int(i), int(j)
        if i == j:
            dropped += 1
            continue
        graph.edges[(i, j)] = GraphEdge(i, j, t.action)
    if not graph.edges:
        raise BuildError("no usable transitions: all transitions stayed within one cluster")

    report = BuildReport(
        n_transitions=len(transitions),
        skipped_perception=skipped,
        dropped_self_loops=dropped,
        n_nodes=len(nodes),
        n_edges=len(graph.edges),
        node_member_counts=[n.member_count for n in nodes],
    )
    return graph, report


def build_graph(
    buffer: ExperienceBuffer, perception, config: GraphConfig
) -> tuple[TransitionGraph, BuildReport]:
    """Abstract a buffer into a transition graph (see module docstring)."""
    per_episode, skipped = extract_entity_transitions(buffer, perception, config.metrics.isolate)
    provenance = {
        "buffer_digest": buffer.digest(),
        "n_clusters": config.n_clusters,
        "cluster_seed": config.seed,
        "env_config": buffer.env_config.to_text(),
    }
    return build_graph_from_transitions(per_episode, config, skipped, provenance)
