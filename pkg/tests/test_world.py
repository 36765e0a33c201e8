import itertools
import math
from collections import deque
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SMALL, make_env, random_graph
from envedit import render
from envedit.editor import EditConfig, apply_edit
from envedit.world import (
    STOP_TOKEN, WorldSpec, direction_token, generate_world, hop_view, oracle_instruction, path_length,
    sample_episodes, shortest_path, split_dataset,
)


def all_simple_paths(env, a, b):
    """Depth-first enumeration of every simple path from a to b."""
    out = []
    stack = [[a]]
    while stack:
        path = stack.pop()
        if path[-1] == b:
            out.append(path)
            continue
        for nb in env.neighbors(path[-1]):
            if nb not in path:
                stack.append(path + [nb])
    return out


def brute_force_shortest(env, a, b):
    paths = all_simple_paths(env, a, b)
    lengths = [path_length(env, p) for p in paths]
    best = min(lengths)
    ties = [p for p, length in zip(paths, lengths) if length <= best + 1e-9 * max(1.0, best)]
    return min(ties), best


def test_generation_is_deterministic():
    spec = WorldSpec(num_envs=2, nodes_per_env=5, num_classes=6)
    a, b = generate_world(spec, seed=7), generate_world(spec, seed=7)
    for x, y in zip(a, b):
        assert x.node_ids == y.node_ids and x.edges == y.edges
        assert np.array_equal(x.positions, y.positions)
        assert np.array_equal(x.grids, y.grids)
        assert x.features.tobytes() == y.features.tobytes()
        assert all(np.array_equal(x.appearance_table[c], y.appearance_table[c]) for c in x.appearance_table)


def test_different_seeds_differ():
    spec = WorldSpec(num_envs=1, nodes_per_env=5, num_classes=6)
    assert not np.array_equal(generate_world(spec, 1)[0].features, generate_world(spec, 2)[0].features)


def test_every_env_connected(small_world):
    for env in small_world:
        seen = {env.node_ids[0]}
        queue = deque(seen)
        while queue:
            for nb in env.neighbors(queue.popleft()):
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        assert seen == set(env.node_ids)


def test_structural_invariants(small_world):
    for env in small_world:
        assert env.grids.shape[1] == render.NUM_VIEWS == 36
        assert env.features.shape == (env.num_nodes, 36, SMALL.feature_dim)
        assert env.grids.min() >= 1 and env.grids.max() <= SMALL.num_classes
        assert len(np.unique(env.grids)) >= 2
        assert all(length > 0 for _, _, length in env.edges)
        for a, b, length in env.edges:
            assert env.edge_length(a, b) == env.edge_length(b, a) == length


def test_thirteen_classes_bound_ids():
    envs = generate_world(WorldSpec(num_envs=3, nodes_per_env=6, num_classes=13), seed=1)
    assert max(int(e.grids.max()) for e in envs) <= 13


def test_panorama_layout_and_orientation(small_world):
    env = small_world[0]
    pano = env.panorama(env.node_ids[0])
    headings = sorted({round(math.degrees(v.heading)) for v in pano.views})
    elevations = sorted({round(math.degrees(v.elevation)) for v in pano.views})
    assert headings == list(range(0, 360, 30))
    assert elevations == [-30, 0, 30]
    for v in pano.views:
        expected = np.array([math.cos(v.heading), math.sin(v.heading), math.cos(v.elevation), math.sin(v.elevation)])
        np.testing.assert_array_equal(v.orientation, expected)


@pytest.mark.parametrize("bad", [dict(num_envs=0), dict(nodes_per_env=-1), dict(num_classes=1),
                                 dict(feature_dim=2, style_dim=4), dict(edge_len_range=(0.0, 1.0))])
def test_invalid_spec_rejected(bad):
    with pytest.raises(ValueError):
        generate_world(replace(SMALL, **bad))


def test_shortest_path_trivial_cases():
    env = make_env([[0, 0, 0], [0, 2.5, 0]], [(0, 1, 2.5)])
    assert shortest_path(env, "n0", "n0") == (["n0"], 0.0)
    assert shortest_path(env, "n0", "n1") == (["n0", "n1"], 2.5)
    with pytest.raises(KeyError):
        shortest_path(env, "n0", "nope")


@pytest.mark.parametrize("seed", range(6))
def test_shortest_path_matches_enumeration(seed):
    pos, edges = random_graph(8, seed)
    env = make_env(pos, edges)
    for a in env.node_ids:
        for b in env.node_ids:
            path, length = shortest_path(env, a, b)
            want_path, want_len = brute_force_shortest(env, a, b)
            assert math.isclose(length, want_len, rel_tol=1e-12, abs_tol=1e-12)
            assert path == want_path


def test_lexicographic_tie_break():
    # a square: n0 -> n3 via n1 or n2, both length 2
    env = make_env([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]],
                   [(0, 2, 1.0), (0, 1, 1.0), (2, 3, 1.0), (1, 3, 1.0)])
    assert shortest_path(env, "n0", "n3")[0] == ["n0", "n1", "n3"]
    assert shortest_path(env, "n3", "n0")[0] == ["n3", "n1", "n0"]


def test_triangle_inequality(small_world):
    rng = np.random.default_rng(0)
    for env in small_world:
        for _ in range(50):
            a, b, c = (env.node_ids[i] for i in rng.integers(env.num_nodes, size=3))
            assert env.distance(a, c) <= env.distance(a, b) + env.distance(b, c) + 1e-9


def test_oracle_single_node_is_stop(small_world):
    env = small_world[0]
    assert oracle_instruction(env, [env.node_ids[0]]) == [STOP_TOKEN]


def test_oracle_mentions_forced_landmark(small_world):
    env = small_world[0]
    a = env.node_ids[0]
    b = env.neighbors(a)[0]
    view_index, _, _ = hop_view(env, a, b)
    grids = env.grids.copy()
    grids[env.index(a), view_index] = SMALL.class_names.index("door") + 1
    forced = replace(env, grids=grids)
    tokens = oracle_instruction(forced, [a, b])
    assert tokens[1] == "door" and tokens[-1] == STOP_TOKEN


def test_oracle_deterministic_and_appearance_invariant(small_world):
    env = small_world[1]
    ep = sample_episodes([env], 5, (3, 3), seed=4)
    edited = apply_edit(env, EditConfig.default("E_is1", seed=9))
    for e in ep:
        assert oracle_instruction(env, e.path) == oracle_instruction(env, e.path) == e.instruction
        assert oracle_instruction(edited, e.path) == e.instruction
        assert len(e.instruction) == 2 * e.hops + 1


def test_direction_tokens():
    assert direction_token(0.0, 0.0) == "straight"
    assert direction_token(math.radians(90), 0.0) == "right"
    assert direction_token(math.radians(-90), 0.0) == "left"
    assert direction_token(math.radians(270), 0.0) == "left"
    assert direction_token(0.0, math.radians(30)) == "up"
    assert direction_token(0.0, math.radians(-30)) == "down"


def test_sample_episodes_len_range_and_repro(small_world):
    one_hop = sample_episodes(small_world, 30, (1, 1), seed=2)
    assert all(len(e.path) == 2 for e in one_hop)
    a = sample_episodes(small_world, 100, (1, 3), seed=5)
    b = sample_episodes(small_world, 100, (1, 3), seed=5)
    assert [(e.episode_id, e.path) for e in a] == [(e.episode_id, e.path) for e in b]


def test_sampled_paths_are_shortest_by_enumeration():
    env = generate_world(replace(SMALL, num_envs=1, nodes_per_env=10), seed=11)[0]
    for ep in sample_episodes([env], 40, (1, 5), seed=0):
        want, _ = brute_force_shortest(env, ep.path[0], ep.goal)
        assert ep.path == want


def test_sample_infeasible_len_range(small_world):
    with pytest.raises(ValueError):
        sample_episodes(small_world[:1], 1, (50, 60), seed=0, max_attempts=50)


def test_split_counts_and_disjointness():
    envs = generate_world(replace(SMALL, num_envs=10, nodes_per_env=5), seed=0)
    eps = sample_episodes(envs, 300, (1, 3), seed=0)
    split = split_dataset(eps, 0.3, seed=1)
    assert len(split.unseen_envs) == 3 and len(split.seen_envs) == 7
    train_envs = {e.env_id for e in split.train}
    assert not train_envs & {e.env_id for e in split.val_unseen}
    assert {e.env_id for e in split.val_seen} <= set(split.seen_envs)
    assert not {e.episode_id for e in split.train} & {e.episode_id for e in split.val_seen}
    again = split_dataset(eps, 0.3, seed=1)
    assert [e.episode_id for e in again.train] == [e.episode_id for e in split.train]


@pytest.mark.parametrize("fraction", [0.0, 1.0])
def test_split_rejects_empty_side(small_world, fraction):
    eps = sample_episodes(small_world, 50, (1, 2), seed=0)
    with pytest.raises(ValueError):
        split_dataset(eps, fraction, seed=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=3, max_value=9), st.integers(min_value=0, max_value=10_000))
def test_next_hop_walk_reaches_goal_with_shortest_length(n, seed):
    pos, edges = random_graph(n, seed)
    env = make_env(pos, edges)
    for a, b in itertools.product(env.node_ids[:3], env.node_ids):
        path, length = shortest_path(env, a, b)
        assert path[0] == a and path[-1] == b
        assert math.isclose(path_length(env, path), length, rel_tol=1e-12, abs_tol=1e-12)
