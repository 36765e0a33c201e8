"""Toy-scale comparisons: baseline vs edited-environment mixing, style scopes, ensembles."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .editor import EditConfig, edit_world
from .trainer import TrainConfig, TrainingData, evaluate, train
from .vocab import Vocab
from .world import WorldSpec, generate_world, sample_episodes, split_dataset, vocabulary

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentSetup:
    world: WorldSpec = WorldSpec(num_envs=16, unseen_style_shift=4.0)
    episodes: int = 1600
    len_range: tuple[int, int] = (1, 4)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=800, eval_every=200))


def build_data(setup: ExperimentSetup, seed: int,
               edits: Sequence[EditConfig] = ()) -> TrainingData:
    spec = replace(setup.world, seed=seed)
    envs = generate_world(spec)
    by_id = {e.env_id: e for e in envs}
    unseen = [e.env_id for e in envs if e.domain == "unseen"]
    episodes = sample_episodes(envs, setup.episodes, setup.len_range, seed)
    split = split_dataset(episodes, spec.holdout_fraction, seed, unseen_env_ids=unseen)
    seen_envs = [by_id[e] for e in split.seen_envs]
    data = TrainingData(Vocab(vocabulary(spec)), by_id, split)
    for cfg in edits:
        name = edit_name(cfg)
        data.edited[name] = {e.env_id: e for e in edit_world(seen_envs, cfg)}
    return data


def edit_name(cfg: EditConfig) -> str:
    if cfg.variant == "E_st" and cfg.style_scope != "per_panorama":
        return f"E_st@{cfg.style_scope}"
    if cfg.variant.endswith("_m") and cfg.mask_count != 1:
        return f"{cfg.variant}{cfg.mask_count}"
    return cfg.variant


@dataclass
class RunResult:
    name: str
    seed: int
    val_unseen_sr: float
    val_seen_sr: float
    seconds: float
    agent: object = None


def run_variant(data: TrainingData, name: Optional[str], setup: ExperimentSetup, seed: int) -> RunResult:
    """Train on originals (``name`` None) or originals mixed with one edited source."""
    cfg = replace(setup.train, seed=seed, variants=(name,) if name else ())
    t0 = time.time()
    result = train(data, cfg)
    unseen = evaluate(result.agent, data.vocab, data.envs, data.split.val_unseen, cfg.success_radius)
    seen = evaluate(result.agent, data.vocab, data.envs, data.split.val_seen, cfg.success_radius)
    run = RunResult(name or "baseline", seed, unseen.overall["SR"], seen.overall["SR"], time.time() - t0,
                    result.agent)
    logger.info("%s seed=%d unseen SR %.1f seen SR %.1f (%.0fs)", run.name, seed, run.val_unseen_sr,
                run.val_seen_sr, run.seconds)
    return run


def mean_sr(runs: Sequence[RunResult]) -> float:
    return float(np.mean([r.val_unseen_sr for r in runs]))
