"""View featurization and the style machinery.

Views are rendered from semantic grids by averaging per-class appearance
vectors (plus a seeded per-cell jitter) and modulating the result with a
style embedding through conditional instance normalization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

NUM_HEADINGS = 12
NUM_ELEVATIONS = 3
NUM_VIEWS = NUM_HEADINGS * NUM_ELEVATIONS
ORIENT_DIM = 4
CIN_EPS = 1e-8
STD_EPS = 1e-12

# view index = 12 * elevation_index + heading_index
VIEW_HEADINGS = np.tile(np.deg2rad(np.arange(NUM_HEADINGS) * 30.0), NUM_ELEVATIONS)
VIEW_ELEVATIONS = np.repeat(np.deg2rad([-30.0, 0.0, 30.0]), NUM_HEADINGS)


def orientation_feature(heading, elevation):
    """(cos heading, sin heading, cos elevation, sin elevation); broadcasts over arrays."""
    heading = np.asarray(heading, dtype=np.float64)
    elevation = np.asarray(elevation, dtype=np.float64)
    return np.stack(
        np.broadcast_arrays(np.cos(heading), np.sin(heading), np.cos(elevation), np.sin(elevation)),
        axis=-1,
    )


def view_representation(v: np.ndarray, heading: float, elevation: float) -> np.ndarray:
    return np.concatenate([np.asarray(v, dtype=np.float64), orientation_feature(heading, elevation)])


def split_representation(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(f)
    return f[..., :-ORIENT_DIM], f[..., -ORIENT_DIM:]


@dataclass(frozen=True)
class StyleModulator:
    """The two affine maps producing per-channel (gamma, beta) from a style embedding."""

    w_gamma: np.ndarray  # (D, d_s)
    b_gamma: np.ndarray  # (D,)
    w_beta: np.ndarray
    b_beta: np.ndarray

    @classmethod
    def random(cls, feature_dim: int, style_dim: int, rng: np.random.Generator,
               gamma_scale: float = 0.35, beta_scale: float = 0.6) -> "StyleModulator":
        # gamma = 1, beta = 0 at the zero embedding
        return cls(
            w_gamma=rng.normal(0.0, gamma_scale / math.sqrt(style_dim), (feature_dim, style_dim)),
            b_gamma=np.ones(feature_dim),
            w_beta=rng.normal(0.0, beta_scale / math.sqrt(style_dim), (feature_dim, style_dim)),
            b_beta=np.zeros(feature_dim),
        )

    def gamma_beta(self, style: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        style = np.asarray(style, dtype=np.float64)
        return self.w_gamma @ style + self.b_gamma, self.w_beta @ style + self.b_beta


def instance_norm_affine(x_in, gamma, beta, eps: float = CIN_EPS) -> np.ndarray:
    """gamma * (x - mean) / std + beta with population std over the last axis."""
    x_in = np.asarray(x_in, dtype=np.float64)
    mu = x_in.mean(axis=-1, keepdims=True)
    sigma = x_in.std(axis=-1, keepdims=True)
    denom = np.where(sigma < eps, sigma + eps, sigma)
    return np.asarray(gamma) * (x_in - mu) / denom + np.asarray(beta)


def conditional_instance_norm(x_in, style, modulator: StyleModulator, eps: float = CIN_EPS) -> np.ndarray:
    gamma, beta = modulator.gamma_beta(style)
    return instance_norm_affine(x_in, gamma, beta, eps)


def channel_groups(feature_dim: int, n_groups: int) -> list[np.ndarray]:
    return np.array_split(np.arange(feature_dim), n_groups)


def channel_statistics(v: np.ndarray, n_groups: int) -> np.ndarray:
    """Mean and std of each channel group, concatenated as [means, stds]."""
    v = np.asarray(v, dtype=np.float64)
    groups = channel_groups(v.shape[-1], n_groups)
    means = np.stack([v[..., g].mean(axis=-1) for g in groups], axis=-1)
    stds = np.stack([np.sqrt(v[..., g].var(axis=-1) + STD_EPS) for g in groups], axis=-1)
    return np.concatenate([means, stds], axis=-1)


@dataclass(frozen=True)
class StyleEncoderParams:
    weight: np.ndarray  # (d_s, 2 * d_s)
    bias: np.ndarray  # (d_s,)

    @property
    def style_dim(self) -> int:
        return self.bias.shape[0]


def style_encode(v, params: StyleEncoderParams) -> np.ndarray:
    """Map a rendered feature (or a stack of them) to a style embedding."""
    stats = channel_statistics(v, params.style_dim)
    return stats @ params.weight.T + params.bias


def fit_style_encoder(modulator: StyleModulator, style_dim: int, rng: np.random.Generator,
                      n_samples: int = 2048, style_scale: float = 1.0) -> StyleEncoderParams:
    """Least-squares affine map from channel statistics back to the applied style.

    Training pairs are random unit-free contents modulated by random styles, so
    the encoder roughly inverts the modulator.
    """
    feature_dim = modulator.b_gamma.shape[0]
    styles = rng.normal(0.0, style_scale, (n_samples, style_dim))
    contents = rng.normal(0.0, 1.0, (n_samples, feature_dim))
    gammas = styles @ modulator.w_gamma.T + modulator.b_gamma
    betas = styles @ modulator.w_beta.T + modulator.b_beta
    rendered = instance_norm_affine(contents, gammas, betas)
    stats = channel_statistics(rendered, style_dim)
    design = np.concatenate([stats, np.ones((n_samples, 1))], axis=1)
    coef, *_ = np.linalg.lstsq(design, styles, rcond=None)
    return StyleEncoderParams(weight=coef[:-1].T.copy(), bias=coef[-1].copy())


class StyleEncoder(nn.Module):
    """Trainable counterpart of :func:`style_encode`."""

    def __init__(self, params: StyleEncoderParams, feature_dim: int):
        super().__init__()
        d_s = params.style_dim
        self.groups = [torch.as_tensor(g) for g in channel_groups(feature_dim, d_s)]
        self.linear = nn.Linear(2 * d_s, d_s)
        with torch.no_grad():
            self.linear.weight.copy_(torch.as_tensor(params.weight))
            self.linear.bias.copy_(torch.as_tensor(params.bias))

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        means = torch.stack([v[..., g].mean(-1) for g in self.groups], -1)
        stds = torch.stack([torch.sqrt(v[..., g].var(-1, unbiased=False) + STD_EPS) for g in self.groups], -1)
        return self.linear(torch.cat([means, stds], -1))


def table_array(appearance_table: dict[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Dense lookup (row per id up to the max key) plus a validity mask."""
    size = max(appearance_table) + 1
    dim = len(next(iter(appearance_table.values())))
    dense = np.zeros((size, dim))
    valid = np.zeros(size, dtype=bool)
    for cid, vec in appearance_table.items():
        dense[cid] = vec
        valid[cid] = True
    return dense, valid


def jitter_amplitude(appearance_table: dict[int, np.ndarray], jitter: float) -> float:
    dense = np.stack([np.asarray(v, dtype=np.float64) for v in appearance_table.values()])
    return jitter * float(np.linalg.norm(dense, axis=1).mean()) / math.sqrt(dense.shape[1])


def render_view(semantic_grid, appearance_table: dict[int, np.ndarray],
                style: Optional[np.ndarray], modulator: Optional[StyleModulator] = None,
                jitter: float = 0.0, jitter_seed: Optional[Sequence[int]] = None,
                _dense: Optional[tuple[np.ndarray, np.ndarray]] = None,
                _amplitude: Optional[float] = None) -> np.ndarray:
    """Render one view; ``style=None`` skips modulation.

    The per-cell jitter amplitude does not depend on the cell's class, so the
    result depends only on the class histogram and the jitter seed.
    """
    grid = np.asarray(semantic_grid, dtype=np.int64).ravel()
    dense, valid = _dense if _dense is not None else table_array(appearance_table)
    if grid.min() < 0 or grid.max() >= len(valid) or not valid[grid].all():
        bad = sorted({int(c) for c in grid if c < 0 or c >= len(valid) or not valid[c]})
        raise ValueError(f"class ids {bad} missing from appearance table")
    cells = dense[grid]
    if jitter > 0.0:
        if jitter_seed is None:
            raise ValueError("jitter requires a jitter_seed")
        amp = _amplitude if _amplitude is not None else jitter_amplitude(appearance_table, jitter)
        cells = cells + amp * np.random.default_rng(list(jitter_seed)).standard_normal(cells.shape)
    base = cells.mean(axis=0)
    if style is None:
        return base
    if modulator is None:
        raise ValueError("a style requires a modulator")
    return conditional_instance_norm(base, style, modulator)


def nearest_view(heading: float, elevation: float) -> int:
    """Index of the discretized view whose center is angularly closest to a direction."""
    target = _unit(heading, elevation)
    centers = _unit(VIEW_HEADINGS, VIEW_ELEVATIONS)
    cos = np.clip(centers @ target, -1.0, 1.0)
    # argmax picks the lowest index on ties
    return int(np.argmax(np.round(cos, 12)))


def _unit(heading, elevation) -> np.ndarray:
    # heading measured clockwise from +y (north)
    heading = np.asarray(heading, dtype=np.float64)
    elevation = np.asarray(elevation, dtype=np.float64)
    return np.stack([np.sin(heading) * np.cos(elevation),
                     np.cos(heading) * np.cos(elevation),
                     np.sin(elevation)], axis=-1)


def direction(src_xyz: np.ndarray, dst_xyz: np.ndarray) -> tuple[float, float]:
    """(heading, elevation) of the straight line from src to dst."""
    dx, dy, dz = np.asarray(dst_xyz, dtype=np.float64) - np.asarray(src_xyz, dtype=np.float64)
    heading = math.atan2(dx, dy) % (2 * math.pi)
    elevation = math.atan2(dz, math.hypot(dx, dy))
    return heading, elevation


@dataclass(frozen=True)
class Candidate:
    target_node: str
    view_index: int
    f: np.ndarray
    heading: float  # exact direction of the hop
    elevation: float


STOP = "STOP"


def candidates(env, node: str, agent_heading: float = 0.0) -> list:
    """Navigable candidates ordered by target node id, followed by the STOP marker.

    Orientation features are relative to ``agent_heading`` (0 gives absolute headings).
    """
    idx = env.index(node)
    out = []
    for nb, view_index, hop_heading, hop_elevation in env.nav.candidates[idx]:
        f = view_representation(env.features[idx, view_index],
                                VIEW_HEADINGS[view_index] - agent_heading,
                                VIEW_ELEVATIONS[view_index])
        out.append(Candidate(env.node_ids[nb], view_index, f, hop_heading, hop_elevation))
    out.append(STOP)
    return out
