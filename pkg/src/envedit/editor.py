"""Environment edits: style transfer, appearance re-synthesis and object masking."""
from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import render
from .render import NUM_VIEWS
from .world import Environment, as_stored, render_features, sample_appearance

VARIANTS = ("E_st", "E_is1", "E_is2", "E_is1_m", "E_is2_m")
STYLE_SCOPES = ("per_view", "per_panorama", "per_environment")
PRIOR_EPS = 1e-9


@dataclass(frozen=True)
class StylePrior:
    mean: np.ndarray
    covariance: np.ndarray

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        cov = self.covariance
        if np.linalg.matrix_rank(cov) < cov.shape[0]:
            cov = cov + PRIOR_EPS * np.eye(cov.shape[0])
        return rng.multivariate_normal(self.mean, cov, size=size, method="cholesky")


@dataclass(frozen=True)
class EditConfig:
    variant: str
    style_scope: str = "per_panorama"
    mask_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.style_scope not in STYLE_SCOPES:
            raise ValueError(f"unknown style scope {self.style_scope!r}")
        masked = self.variant.endswith("_m")
        if masked and self.mask_count < 1:
            raise ValueError(f"{self.variant} needs mask_count >= 1")
        if not masked and self.mask_count != 0:
            raise ValueError(f"mask_count must be 0 for {self.variant}")

    @classmethod
    def default(cls, variant: str, seed: int = 0, **kw) -> "EditConfig":
        if variant.endswith("_m"):
            kw.setdefault("mask_count", 1)
        return cls(variant=variant, seed=seed, **kw)


def style_library(style_dim: int, seed: int, size: int = 256, rank: int = 3) -> np.ndarray:
    """Synthetic stand-in for a painting-style corpus: low-rank structure plus isotropic noise."""
    rng = np.random.default_rng([seed, 0x57])
    mixing = rng.standard_normal((style_dim, rank))
    latent = rng.standard_normal((size, rank))
    scale = np.sqrt(rank + 0.5)
    return (latent @ mixing.T + 0.7 * rng.standard_normal((size, style_dim))) / scale


def fit_style_prior(styles: Sequence[np.ndarray]) -> StylePrior:
    """Mean and population covariance of a style library."""
    if len(styles) == 0:
        raise ValueError("style library is empty")
    lib = np.atleast_2d(np.asarray(styles, dtype=np.float64))
    mean = lib.mean(axis=0)
    centered = lib - mean
    return StylePrior(mean, centered.T @ centered / lib.shape[0])


def assign_styles(env: Environment, prior: StylePrior, scope: str, seed: int) -> np.ndarray:
    """Style embedding per (viewpoint, view), shape (n, 36, d_s), drawn before any rendering."""
    rng = np.random.default_rng([seed, 0xA5])
    n, d = env.num_nodes, prior.mean.shape[0]
    if scope == "per_panorama":
        draws = prior.sample(rng, size=n)
        return np.repeat(draws[:, None, :], NUM_VIEWS, axis=1)
    if scope == "per_view":
        return prior.sample(rng, size=n * NUM_VIEWS).reshape(n, NUM_VIEWS, d)
    if scope == "per_environment":
        draw = prior.sample(rng)
        return np.broadcast_to(draw, (n, NUM_VIEWS, d)).copy()
    raise ValueError(f"unknown style scope {scope!r}")


def _derived(env: Environment, **changes) -> Environment:
    out = copy.copy(env)
    out.__dict__.pop("nav", None)
    out.__dict__.pop("_index", None)
    for k, v in changes.items():
        setattr(out, k, v)
    # geometry is shared, never edited
    out.nav  # noqa: B018 - warm the cache
    return out


def edit_style_transfer(env: Environment, prior: StylePrior, scope: str = "per_panorama",
                        seed: int = 0) -> Environment:
    if env.provenance != "original":
        raise ValueError(f"style transfer expects an original environment, got {env.provenance}")
    styles = assign_styles(env, prior, scope, seed)
    mod = env.context.modulator
    gammas = styles @ mod.w_gamma.T + mod.b_gamma
    betas = styles @ mod.w_beta.T + mod.b_beta
    features = as_stored(render.instance_norm_affine(env.features, gammas, betas))
    return _derived(
        env, features=features, view_styles=styles, provenance="E_st",
        edit_config={"variant": "E_st", "style_scope": scope, "mask_count": 0, "seed": seed,
                     "masked_class_ids": []},
    )


def mask_semantics(env: Environment, k: int, seed: int) -> tuple[np.ndarray, list[int]]:
    """Replace every cell of ``k`` randomly chosen classes by the mask id C + 1."""
    C = env.spec.num_classes
    if not 1 <= k <= C - 1:
        raise ValueError(f"mask count {k} outside 1..{C - 1}")
    rng = np.random.default_rng([seed, 0x3A])
    chosen = sorted(int(c) for c in rng.choice(np.arange(1, C + 1), size=k, replace=False))
    grids = env.grids.copy()
    grids[np.isin(grids, chosen)] = env.spec.mask_class
    return grids, chosen


def edit_synthesis(env: Environment, style_mode: str = "original", k: int = 0, seed: int = 0) -> Environment:
    """Re-synthesize appearance; ``style_mode`` 'original' keeps view styles, 'fixed_zero' uses zeros."""
    if style_mode not in ("original", "fixed_zero"):
        raise ValueError(f"unknown style_mode {style_mode!r}")
    if env.provenance != "original":
        raise ValueError(f"synthesis expects an original environment, got {env.provenance}")
    spec = env.spec
    ctx = env.context
    rng = np.random.default_rng([seed, 0x15])
    table = sample_appearance(spec, ctx, rng)
    grids, masked = env.grids, []
    if k > 0:
        grids, masked = mask_semantics(env, k, seed)
        table[spec.mask_class] = rng.standard_normal(spec.feature_dim)
    if style_mode == "original":
        styles = render.style_encode(env.features, ctx.encoder)
    else:
        styles = np.zeros((env.num_nodes, NUM_VIEWS, spec.style_dim))
    variant = ("E_is1" if style_mode == "original" else "E_is2") + ("_m" if k > 0 else "")
    features = render_features(env, table, styles, (env.world_seed, seed, 0x15), grids=grids)
    return _derived(
        env, grids=grids, features=features, appearance_table=table, view_styles=styles,
        provenance=variant,
        edit_config={"variant": variant, "style_scope": "per_view", "mask_count": k, "seed": seed,
                     "masked_class_ids": masked},
    )


def env_seed(seed: int, env_id: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(env_id.encode())]).generate_state(1)[0])


def apply_edit(env: Environment, config: EditConfig, prior: Optional[StylePrior] = None) -> Environment:
    if config.variant == "E_st":
        if prior is None:
            prior = fit_style_prior(style_library(env.spec.style_dim, env.world_seed))
        return edit_style_transfer(env, prior, config.style_scope, config.seed)
    style_mode = "original" if config.variant.startswith("E_is1") else "fixed_zero"
    return edit_synthesis(env, style_mode, config.mask_count, config.seed)


def edit_world(envs: Sequence[Environment], config: EditConfig,
               prior: Optional[StylePrior] = None) -> list[Environment]:
    """Edit every environment; each gets its own seed stream derived from the config seed."""
    if prior is None and config.variant == "E_st" and envs:
        prior = fit_style_prior(style_library(envs[0].spec.style_dim, envs[0].world_seed))
    out = []
    for env in envs:
        sub = EditConfig(config.variant, config.style_scope, config.mask_count, env_seed(config.seed, env.env_id))
        edited = apply_edit(env, sub, prior)
        edited.edit_config = {**edited.edit_config, "seed": config.seed}
        out.append(edited)
    return out


def component_flags(original: Environment, edited: Environment) -> dict[str, bool]:
    """Which of (S, A, O) differ from the original, as in the variant/component table."""
    same_o = original.grids.shape == edited.grids.shape and np.array_equal(original.grids, edited.grids)
    same_a = (original.appearance_table.keys() == edited.appearance_table.keys()
              and all(np.array_equal(original.appearance_table[c], edited.appearance_table[c])
                      for c in original.appearance_table))
    same_s = np.array_equal(original.view_styles, edited.view_styles)
    return {"S": not same_s, "A": not same_a, "O": not same_o}


EXPECTED_COMPONENTS = {
    "E_st": {"S": True, "A": False, "O": False},
    "E_is1": {"S": False, "A": True, "O": False},
    "E_is2": {"S": True, "A": True, "O": False},
    "E_is1_m": {"S": False, "A": True, "O": True},
    "E_is2_m": {"S": True, "A": True, "O": True},
}
