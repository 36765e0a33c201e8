"""Procedural navigation environments, oracle instructions and dataset splits."""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path as _csgraph_shortest_path

from . import render
from .render import NUM_VIEWS, StyleEncoderParams, StyleModulator

CLASS_NAMES = (
    "door", "table", "chair", "sofa", "bed", "plant", "window", "sink",
    "lamp", "rug", "shelf", "tv", "stairs", "mirror", "bathtub", "painting",
)
DIRECTION_TOKENS = ("left", "right", "straight", "up", "down")
STOP_TOKEN = "stop"
MASK_TOKEN = "mask"
PATH_EPS = 1e-9


@dataclass(frozen=True)
class WorldSpec:
    num_envs: int = 16
    nodes_per_env: int = 12
    grid_h: int = 4
    grid_w: int = 6
    num_classes: int = 8
    feature_dim: int = 32
    style_dim: int = 8
    class_vocab: tuple[str, ...] = CLASS_NAMES
    edge_len_range: tuple[float, float] = (3.5, 6.0)
    seed: int = 0
    jitter: float = 0.05
    appearance_noise: float = 0.3
    extra_edge_prob: float = 0.35
    landmark_fraction: float = 0.6
    holdout_fraction: float = 0.25
    style_spread: float = 0.25
    unseen_style_shift: float = 0.0

    def validate(self) -> None:
        counts = {k: getattr(self, k) for k in
                  ("num_envs", "nodes_per_env", "grid_h", "grid_w", "num_classes", "feature_dim", "style_dim")}
        bad = [k for k, v in counts.items() if int(v) <= 0]
        if bad:
            raise ValueError(f"non-positive counts in world spec: {', '.join(bad)}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.feature_dim < self.style_dim:
            raise ValueError("feature_dim must be >= style_dim")
        if len(self.class_vocab) < self.num_classes:
            raise ValueError(f"class_vocab has {len(self.class_vocab)} names, need {self.num_classes}")
        lo, hi = self.edge_len_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad edge_len_range {self.edge_len_range}")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(self.class_vocab[: self.num_classes])

    @property
    def mask_class(self) -> int:
        return self.num_classes + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        for key in ("class_vocab", "edge_len_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class WorldContext:
    """World-level generative state shared by all environments of a (spec, seed)."""

    prototypes: np.ndarray  # (C + 1, D); row 0 unused
    modulator: StyleModulator
    encoder: StyleEncoderParams
    seen_center: np.ndarray
    unseen_center: np.ndarray


@functools.lru_cache(maxsize=32)
def world_context(spec: WorldSpec, seed: int) -> WorldContext:
    rng = np.random.default_rng([seed, 0xC0])
    D, d_s = spec.feature_dim, spec.style_dim
    prototypes = np.vstack([np.zeros((1, D)), rng.standard_normal((spec.num_classes, D))])
    modulator = StyleModulator.random(D, d_s, rng)
    encoder = render.fit_style_encoder(modulator, d_s, rng)
    axis = rng.standard_normal(d_s)
    axis /= np.linalg.norm(axis)
    base = 0.3 * rng.standard_normal(d_s)
    half = 0.5 * spec.unseen_style_shift * axis
    return WorldContext(prototypes, modulator, encoder, base - half, base + half)


@dataclass(frozen=True)
class DiscretizedView:
    heading: float
    elevation: float
    semantic_grid: np.ndarray
    feature: np.ndarray
    orientation: np.ndarray


@dataclass(frozen=True)
class Panorama:
    viewpoint_id: str
    views: tuple[DiscretizedView, ...]


@dataclass
class NavCache:
    """Per-environment adjacency, distances and candidate layout."""

    neighbors: list[list[int]]
    dist: np.ndarray
    candidates: list[list[tuple[int, int, float, float]]]
    edge_len: dict[tuple[int, int], float]
    next_hop: np.ndarray  # (n, n) first hop of the tie-broken shortest path, -1 on the diagonal


@dataclass
class Environment:
    env_id: str
    node_ids: list[str]
    positions: np.ndarray  # (n, 3) meters
    edges: list[tuple[str, str, float]]
    grids: np.ndarray  # (n, 36, grid_h, grid_w) class ids
    features: np.ndarray  # (n, 36, D)
    appearance_table: dict[int, np.ndarray]
    style_field: np.ndarray  # (d_s,) base style of the environment
    view_styles: np.ndarray  # (n, 36, d_s) style embedding associated with every view
    spec: WorldSpec
    world_seed: int
    provenance: str = "original"
    domain: str = "seen"
    edit_config: Optional[dict] = None

    def index(self, node: str) -> int:
        try:
            return self._index[node]
        except KeyError:
            raise KeyError(f"unknown node {node!r} in {self.env_id}") from None

    @cached_property
    def _index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.node_ids)}

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @cached_property
    def nav(self) -> NavCache:
        n = self.num_nodes
        neighbors: list[list[int]] = [[] for _ in range(n)]
        edge_len = {}
        rows, cols, vals = [], [], []
        for a, b, length in self.edges:
            i, j = self.index(a), self.index(b)
            neighbors[i].append(j)
            neighbors[j].append(i)
            edge_len[(i, j)] = edge_len[(j, i)] = float(length)
            rows += [i, j]
            cols += [j, i]
            vals += [length, length]
        for nb in neighbors:
            nb.sort(key=lambda k: self.node_ids[k])
        dist = _csgraph_shortest_path(csr_matrix((vals, (rows, cols)), shape=(n, n)), directed=False)
        cands = []
        for i in range(n):
            row = []
            for j in neighbors[i]:
                heading, elevation = render.direction(self.positions[i], self.positions[j])
                row.append((j, render.nearest_view(heading, elevation), heading, elevation))
            cands.append(row)
        next_hop = np.full((n, n), -1, dtype=np.int64)
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                tol = PATH_EPS * max(1.0, dist[i, j])
                for nb in neighbors[i]:  # sorted by node id
                    if abs(edge_len[(i, nb)] + dist[nb, j] - dist[i, j]) <= tol:
                        next_hop[i, j] = nb
                        break
        return NavCache(neighbors, dist, cands, edge_len, next_hop)

    def distance(self, a: str, b: str) -> float:
        return float(self.nav.dist[self.index(a), self.index(b)])

    def neighbors(self, node: str) -> list[str]:
        return [self.node_ids[j] for j in self.nav.neighbors[self.index(node)]]

    def edge_length(self, a: str, b: str) -> float:
        try:
            return self.nav.edge_len[(self.index(a), self.index(b))]
        except KeyError:
            raise ValueError(f"{a} and {b} are not adjacent in {self.env_id}") from None

    def panorama(self, node: str) -> Panorama:
        i = self.index(node)
        views = tuple(
            DiscretizedView(
                heading=float(render.VIEW_HEADINGS[k]),
                elevation=float(render.VIEW_ELEVATIONS[k]),
                semantic_grid=self.grids[i, k],
                feature=self.features[i, k],
                orientation=render.orientation_feature(render.VIEW_HEADINGS[k], render.VIEW_ELEVATIONS[k]),
            )
            for k in range(NUM_VIEWS)
        )
        return Panorama(node, views)

    @property
    def context(self) -> WorldContext:
        return world_context(self.spec, self.world_seed)


def _env_rng(seed: int, env_index: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, env_index, *extra])


def holdout_indices(spec: WorldSpec, seed: int) -> list[int]:
    """Environment indices generated in the unseen (possibly style-shifted) domain."""
    n_unseen = int(round(spec.holdout_fraction * spec.num_envs))
    if n_unseen == 0:
        return []
    rng = np.random.default_rng([seed, 0x5E])
    return sorted(int(i) for i in rng.choice(spec.num_envs, size=n_unseen, replace=False))


def _layout(spec: WorldSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[tuple[int, int, float]]]:
    lo, hi = spec.edge_len_range
    n = spec.nodes_per_env
    positions = np.zeros((n, 3))
    edges: list[tuple[int, int]] = []
    for i in range(1, n):
        for _ in range(200):
            parent = int(rng.integers(i))
            theta = rng.uniform(0, 2 * math.pi)
            r = rng.uniform(lo, hi)
            p = positions[parent] + np.array([r * math.sin(theta), r * math.cos(theta), 0.0])
            p[2] = rng.uniform(-0.2, 0.2)
            if np.linalg.norm(positions[:i, :2] - p[:2], axis=1).min() >= 0.7 * lo:
                break
        positions[i] = p
        edges.append((parent, i))
    present = set(edges)
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) in present:
                continue
            d = float(np.linalg.norm(positions[i] - positions[j]))
            if lo <= d <= hi and rng.random() < spec.extra_edge_prob:
                edges.append((i, j))
    edges.sort()
    return positions, [(i, j, float(np.linalg.norm(positions[i] - positions[j]))) for i, j in edges]


def _semantic_grids(spec: WorldSpec, env: Environment, rng: np.random.Generator) -> np.ndarray:
    n, cells = env.num_nodes, spec.grid_h * spec.grid_w
    landmarks = rng.integers(1, spec.num_classes + 1, size=n)
    n_landmark = max(1, int(math.ceil(spec.landmark_fraction * cells)))
    grids = rng.integers(1, spec.num_classes + 1, size=(n, NUM_VIEWS, cells))
    for i in range(n):
        claimed: dict[int, int] = {}
        for j, view_index, _, _ in env.nav.candidates[i]:
            claimed.setdefault(view_index, j)
        for view_index, j in claimed.items():
            cells_idx = rng.choice(cells, size=n_landmark, replace=False)
            grids[i, view_index, cells_idx] = landmarks[j]
    return grids.reshape(n, NUM_VIEWS, spec.grid_h, spec.grid_w)


def sample_appearance(spec: WorldSpec, ctx: WorldContext, rng: np.random.Generator) -> dict[int, np.ndarray]:
    noise = rng.standard_normal((spec.num_classes, spec.feature_dim))
    return {c: ctx.prototypes[c] + spec.appearance_noise * noise[c - 1] for c in range(1, spec.num_classes + 1)}


def as_stored(features: np.ndarray) -> np.ndarray:
    """Round to float32 precision so features survive the on-disk feature cache unchanged."""
    return np.asarray(features, dtype=np.float32).astype(np.float64)


def render_features(env: Environment, appearance_table: dict[int, np.ndarray], styles,
                    jitter_key: Sequence[int], grids: Optional[np.ndarray] = None) -> np.ndarray:
    """Render every view of ``env``; ``styles`` broadcasts to (n, 36, d_s) or is None."""
    grids = env.grids if grids is None else grids
    n = grids.shape[0]
    dense = render.table_array(appearance_table)
    amp = render.jitter_amplitude(appearance_table, env.spec.jitter)
    mod = env.context.modulator
    out = np.empty((n, NUM_VIEWS, env.spec.feature_dim))
    if styles is not None:
        styles = np.broadcast_to(styles, (n, NUM_VIEWS, env.spec.style_dim))
    for i in range(n):
        for k in range(NUM_VIEWS):
            out[i, k] = render.render_view(
                grids[i, k], appearance_table, None if styles is None else styles[i, k], mod,
                jitter=env.spec.jitter, jitter_seed=(*jitter_key, i, k), _dense=dense, _amplitude=amp)
    return as_stored(out)


def generate_world(spec: WorldSpec, seed: Optional[int] = None) -> list[Environment]:
    spec.validate()
    seed = spec.seed if seed is None else int(seed)
    ctx = world_context(spec, seed)
    unseen = set(holdout_indices(spec, seed))
    envs = []
    for e in range(spec.num_envs):
        rng = _env_rng(seed, e)
        positions, idx_edges = _layout(spec, rng)
        env_id = f"env{e:03d}"
        node_ids = [f"{env_id}_n{i:03d}" for i in range(spec.nodes_per_env)]
        domain = "unseen" if e in unseen else "seen"
        center = ctx.unseen_center if domain == "unseen" else ctx.seen_center
        style_field = center + spec.style_spread * rng.standard_normal(spec.style_dim)
        env = Environment(
            env_id=env_id,
            node_ids=node_ids,
            positions=positions,
            edges=[(node_ids[i], node_ids[j], length) for i, j, length in idx_edges],
            grids=np.zeros(0),
            features=np.zeros(0),
            appearance_table=sample_appearance(spec, ctx, rng),
            style_field=style_field,
            view_styles=np.zeros(0),
            spec=spec,
            world_seed=seed,
            domain=domain,
        )
        env.grids = _semantic_grids(spec, env, rng)
        env.features = render_features(env, env.appearance_table, style_field, (seed, e))
        env.view_styles = render.style_encode(env.features, ctx.encoder)
        envs.append(env)
    return envs


def shortest_path(env: Environment, a: str, b: str) -> tuple[list[str], float]:
    """Length-minimal path; among equal lengths the lexicographically smallest id sequence."""
    i, j = env.index(a), env.index(b)
    nav = env.nav
    total = float(nav.dist[i, j])
    if not math.isfinite(total):
        raise ValueError(f"{b} unreachable from {a}")
    path = [i]
    while path[-1] != j:
        path.append(int(nav.next_hop[path[-1], j]))
    return [env.node_ids[k] for k in path], total


def next_hop(env: Environment, node: str, goal: str) -> Optional[str]:
    """First step of the tie-broken shortest path, or None at the goal."""
    if node == goal:
        return None
    return shortest_path(env, node, goal)[0][1]


def path_length(env: Environment, path: Sequence[str]) -> float:
    return float(sum(env.edge_length(a, b) for a, b in zip(path[:-1], path[1:])))


def direction_token(relative_heading: float, elevation: float) -> str:
    if elevation > math.radians(20):
        return "up"
    if elevation < -math.radians(20):
        return "down"
    rel = (relative_heading + math.pi) % (2 * math.pi) - math.pi
    if abs(rel) <= math.radians(45):
        return "straight"
    return "right" if rel > 0 else "left"


def class_name(spec: WorldSpec, class_id: int) -> str:
    if class_id == spec.mask_class:
        return MASK_TOKEN
    return spec.class_names[class_id - 1]


def modal_class(grid: np.ndarray) -> int:
    counts = np.bincount(np.asarray(grid).ravel())
    return int(np.argmax(counts))  # lowest id wins ties


def hop_view(env: Environment, a: str, b: str) -> tuple[int, float, float]:
    """(representative view index, heading, elevation) of the hop a -> b."""
    i, j = env.index(a), env.index(b)
    for nb, view_index, heading, elevation in env.nav.candidates[i]:
        if nb == j:
            return view_index, heading, elevation
    raise ValueError(f"{a} and {b} are not adjacent in {env.env_id}")


def oracle_instruction(env: Environment, path: Sequence[str]) -> list[str]:
    """Per hop a direction word and the landmark seen toward the next node, then ``stop``."""
    tokens: list[str] = []
    heading = 0.0
    for a, b in zip(path[:-1], path[1:]):
        view_index, hop_heading, hop_elevation = hop_view(env, a, b)
        tokens.append(direction_token(hop_heading - heading, hop_elevation))
        tokens.append(class_name(env.spec, modal_class(env.grids[env.index(a), view_index])))
        heading = hop_heading
    tokens.append(STOP_TOKEN)
    return tokens


def vocabulary(spec: WorldSpec) -> list[str]:
    return list(spec.class_names) + [MASK_TOKEN, *DIRECTION_TOKENS, STOP_TOKEN]


@dataclass
class Episode:
    episode_id: str
    env_id: str
    path: list[str]
    instruction: list[str]
    synthetic: bool = False

    @property
    def goal(self) -> str:
        return self.path[-1]

    @property
    def hops(self) -> int:
        return len(self.path) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(**d)


def sample_episodes(env_set: Sequence[Environment], n: int, len_range: tuple[int, int], seed: int,
                    exclude: Iterable[tuple[str, str, str]] = (), id_prefix: str = "ep",
                    max_attempts: int = 2000) -> list[Episode]:
    """Uniform endpoints, rejected until the shortest path has a hop count in ``len_range``."""
    lo, hi = len_range
    if lo < 0 or hi < lo:
        raise ValueError(f"bad len_range {len_range}")
    if not env_set:
        raise ValueError("no environments to sample from")
    excluded = set(exclude)
    rng = np.random.default_rng([seed, 0xE9])
    episodes = []
    for k in range(n):
        for _ in range(max_attempts):
            env = env_set[int(rng.integers(len(env_set)))]
            a, b = (env.node_ids[int(x)] for x in rng.integers(env.num_nodes, size=2))
            if (env.env_id, a, b) in excluded:
                continue
            path, _ = shortest_path(env, a, b)
            if lo <= len(path) - 1 <= hi:
                break
        else:
            raise ValueError(f"could not sample a path with {lo}..{hi} hops in {max_attempts} attempts")
        episodes.append(Episode(f"{id_prefix}{k:05d}_{env.env_id}", env.env_id, path, oracle_instruction(env, path)))
    return episodes


@dataclass
class DatasetSplit:
    train: list[Episode]
    val_seen: list[Episode]
    val_unseen: list[Episode]
    seen_envs: list[str] = field(default_factory=list)
    unseen_envs: list[str] = field(default_factory=list)

    def get(self, name: str) -> list[Episode]:
        if name not in ("train", "val_seen", "val_unseen"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def split_dataset(episodes: Sequence[Episode], env_holdout_fraction: float, seed: int,
                  unseen_env_ids: Optional[Sequence[str]] = None,
                  val_seen_fraction: float = 0.15) -> DatasetSplit:
    env_ids = sorted({ep.env_id for ep in episodes})
    if len(env_ids) < 2:
        raise ValueError("need episodes from at least 2 environments")
    rng = np.random.default_rng([seed, 0x59])
    if unseen_env_ids is None:
        n_unseen = int(round(env_holdout_fraction * len(env_ids)))
        if n_unseen <= 0 or n_unseen >= len(env_ids):
            raise ValueError(f"holdout fraction {env_holdout_fraction} leaves an empty side "
                             f"({n_unseen} of {len(env_ids)} environments)")
        unseen = sorted(env_ids[int(i)] for i in rng.choice(len(env_ids), size=n_unseen, replace=False))
    else:
        unseen = sorted(set(unseen_env_ids) & set(env_ids))
        if not unseen or len(unseen) == len(env_ids):
            raise ValueError("unseen environment list leaves an empty side")
    unseen_set = set(unseen)
    seen_eps = [ep for ep in episodes if ep.env_id not in unseen_set]
    val_unseen = [ep for ep in episodes if ep.env_id in unseen_set]
    n_val = int(round(val_seen_fraction * len(seen_eps)))
    val_idx = set(int(i) for i in rng.choice(len(seen_eps), size=n_val, replace=False)) if n_val else set()
    train = [ep for k, ep in enumerate(seen_eps) if k not in val_idx]
    val_seen = [ep for k, ep in enumerate(seen_eps) if k in val_idx]
    return DatasetSplit(train, val_seen, val_unseen,
                        seen_envs=[e for e in env_ids if e not in unseen_set], unseen_envs=unseen)
