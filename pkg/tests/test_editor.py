
import numpy as np
import pytest

from conftest import SMALL, make_env
from envedit import render
from envedit.editor import (
    EXPECTED_COMPONENTS, VARIANTS, EditConfig, StylePrior, apply_edit, assign_styles, component_flags,
    edit_style_transfer, edit_synthesis, edit_world, fit_style_prior, mask_semantics, style_library,
)
from envedit.world import WorldSpec, generate_world

PRIOR = fit_style_prior(style_library(SMALL.style_dim, seed=0))


def chain_env(n):
    return make_env([[5.0 * i, 0, 0] for i in range(n)], [(i, i + 1, 5.0) for i in range(n - 1)])


def test_prior_single_vector():
    s = np.array([0.5, -1.0, 2.0])
    prior = fit_style_prior([s])
    np.testing.assert_array_equal(prior.mean, s)
    np.testing.assert_array_equal(prior.covariance, np.zeros((3, 3)))
    draws = prior.sample(np.random.default_rng(0), size=5)
    assert np.all(np.isfinite(draws)) and np.allclose(draws, s, atol=1e-3)


def test_prior_hand_case_population_cov():
    prior = fit_style_prior([[0.0, 0.0], [2.0, 0.0]])
    np.testing.assert_array_equal(prior.mean, [1.0, 0.0])
    np.testing.assert_array_equal(prior.covariance, [[1.0, 0.0], [0.0, 0.0]])


def test_prior_empty_rejected():
    with pytest.raises(ValueError):
        fit_style_prior([])


def test_prior_recovers_known_normal_within_three_se():
    rng = np.random.default_rng(42)
    mean = np.array([1.0, -2.0, 0.5])
    a = rng.standard_normal((3, 3))
    cov = a @ a.T + 0.5 * np.eye(3)
    n = 1000
    prior = fit_style_prior(rng.multivariate_normal(mean, cov, size=n))
    se_mean = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(prior.mean - mean) <= 3 * se_mean)
    d = np.diag(cov)
    se_cov = np.sqrt((np.outer(d, d) + cov ** 2) / n)
    assert np.all(np.abs(prior.covariance - cov) <= 3 * se_cov)


def test_prior_sampling_matches_moments():
    prior = StylePrior(np.array([0.0, 3.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
    draws = prior.sample(np.random.default_rng(1), size=20000)
    np.testing.assert_allclose(draws.mean(0), prior.mean, atol=0.05)
    np.testing.assert_allclose(np.cov(draws.T, bias=True), prior.covariance, atol=0.06)


def test_scope_per_panorama_shares_within_viewpoint():
    styles = assign_styles(chain_env(10), PRIOR, "per_panorama", seed=1)
    assert np.all(styles == styles[:, :1])
    assert np.all(styles.var(axis=1) < 1e-25)
    assert len({styles[i, 0].tobytes() for i in range(10)}) == 10


def test_scope_per_environment_all_equal():
    styles = assign_styles(chain_env(6), PRIOR, "per_environment", seed=1)
    assert np.all(styles == styles[0, 0])


def test_scope_per_view_distinct():
    styles = assign_styles(chain_env(100), PRIOR, "per_view", seed=1).reshape(-1, SMALL.style_dim)
    assert len({s.tobytes() for s in styles}) / len(styles) >= 0.99


def test_unknown_scope_rejected():
    with pytest.raises(ValueError):
        assign_styles(chain_env(2), PRIOR, "per_house", seed=0)


def test_style_transfer_semantics_and_geometry_preserved(small_world):
    env = small_world[0]
    edited = edit_style_transfer(env, PRIOR, "per_panorama", seed=3)
    assert np.array_equal(edited.grids, env.grids)
    assert edited.edges == env.edges and np.array_equal(edited.positions, env.positions)
    assert edited.provenance == "E_st"
    assert not np.allclose(edited.features, env.features)
    again = edit_style_transfer(env, PRIOR, "per_panorama", seed=3)
    assert again.features.tobytes() == edited.features.tobytes()


def test_style_transfer_renders_assigned_styles(small_world):
    env = small_world[1]
    edited = edit_style_transfer(env, PRIOR, "per_view", seed=8)
    mod = env.context.modulator
    for i, k in [(0, 0), (3, 17), (5, 35)]:
        want = render.conditional_instance_norm(env.features[i, k], edited.view_styles[i, k], mod)
        np.testing.assert_allclose(edited.features[i, k], want, rtol=1e-6, atol=1e-6)


def test_mask_contract_thirteen_classes():
    spec = WorldSpec(num_envs=1, nodes_per_env=6, num_classes=13)
    env = generate_world(spec, seed=2)[0]
    grids, chosen = mask_semantics(env, 1, seed=5)
    (c,) = chosen
    assert np.array_equal(grids == 14, env.grids == c)
    assert not np.any(grids == c)
    assert int((grids == 14).sum()) == int((env.grids == c).sum())
    untouched = env.grids != c
    assert np.array_equal(grids[untouched], env.grids[untouched])


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_mask_sweep(small_world, k):
    env = small_world[0]
    grids, chosen = mask_semantics(env, k, seed=k)
    assert len(set(chosen)) == k
    assert int((grids == SMALL.mask_class).sum()) == int(np.isin(env.grids, chosen).sum())
    edited = apply_edit(env, EditConfig("E_is2_m", mask_count=k, seed=k))
    assert edited.edit_config["masked_class_ids"] == chosen


@pytest.mark.parametrize("k", [0, SMALL.num_classes])
def test_mask_count_out_of_range(small_world, k):
    with pytest.raises(ValueError):
        mask_semantics(small_world[0], k, seed=0)


def test_edit_config_rules():
    assert EditConfig("E_st").style_scope == "per_panorama"
    assert EditConfig.default("E_is1_m").mask_count == 1
    with pytest.raises(ValueError):
        EditConfig("E_st", mask_count=1)
    with pytest.raises(ValueError):
        EditConfig("E_is2_m", mask_count=0)
    with pytest.raises(ValueError):
        EditConfig("E_xx")


def test_synthesis_style_modes(small_world):
    env = small_world[2]
    is1 = edit_synthesis(env, "original", seed=4)
    assert np.array_equal(is1.grids, env.grids)
    assert any(not np.array_equal(is1.appearance_table[c], env.appearance_table[c]) for c in env.appearance_table)
    np.testing.assert_array_equal(is1.view_styles, render.style_encode(env.features, env.context.encoder))
    is2 = edit_synthesis(env, "fixed_zero", seed=4)
    assert np.all(is2.view_styles == 0)
    is1m = edit_synthesis(env, "original", k=1, seed=4)
    assert len(is1m.edit_config["masked_class_ids"]) == 1
    assert SMALL.mask_class in is1m.appearance_table


@pytest.mark.parametrize("variant", VARIANTS)
def test_component_matrix(small_world, variant):
    env = small_world[0]
    edited = apply_edit(env, EditConfig.default(variant, seed=7))
    assert component_flags(env, edited) == EXPECTED_COMPONENTS[variant]
    assert edited.provenance == variant
    assert set(edited.edit_config) == {"variant", "style_scope", "mask_count", "seed", "masked_class_ids"}
    assert edited.edges == env.edges


def test_expected_component_table():
    assert EXPECTED_COMPONENTS == {
        "E_st": {"S": True, "A": False, "O": False},
        "E_is1": {"S": False, "A": True, "O": False},
        "E_is2": {"S": True, "A": True, "O": False},
        "E_is1_m": {"S": False, "A": True, "O": True},
        "E_is2_m": {"S": True, "A": True, "O": True},
    }


@pytest.mark.parametrize("variant", VARIANTS)
def test_edit_world_deterministic_and_per_env_seeds(small_world, variant):
    cfg = EditConfig.default(variant, seed=11)
    a, b = edit_world(small_world[:2], cfg), edit_world(small_world[:2], cfg)
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert np.array_equal(x.grids, y.grids)
    # reordering the input does not change any single environment's edit
    c = edit_world(small_world[1::-1], cfg)
    assert c[1].features.tobytes() == a[0].features.tobytes()


def test_edits_require_original(small_world):
    edited = apply_edit(small_world[0], EditConfig("E_st"))
    with pytest.raises(ValueError):
        apply_edit(edited, EditConfig("E_is1"))


def test_style_library_shape():
    lib = style_library(5, seed=1, size=64)
    assert lib.shape == (64, 5) and np.all(np.isfinite(lib))
    assert not np.array_equal(lib, style_library(5, seed=2, size=64))
