"""Training stages, mixed original/edited batches, curricula, ensembles and evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch

from .agent import Follower, batch_rl_loss, imitation_loss, rollout_batch
from .metrics import SUCCESS_RADIUS, MetricsReport, episode_row
from .render import ORIENT_DIM
from .speaker import Speaker, back_translate
from .vocab import Vocab
from .world import DatasetSplit, Environment, Episode

logger = logging.getLogger(__name__)

ORIGINAL = "original"


@dataclass
class TrainConfig:
    batch_size: int = 32
    iterations: int = 1000  # per stage
    bt_iterations: int = 0
    bt_paths: int = 400
    bt_len_range: tuple[int, int] = (1, 4)
    bt_mix_edits: bool = True
    variants: tuple[str, ...] = ()
    schedule: str = "mixed"  # or "curriculum"
    curriculum: tuple[str, ...] = ()
    il_weight: float = 0.2
    lr: float = 1e-3
    hidden: int = 64
    embed: int = 32
    feature_dropout: float = 0.0
    seed: int = 0
    eval_every: int = 500
    select: str = "best_unseen"  # or "last"
    success_radius: float = SUCCESS_RADIUS
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.variants = tuple(self.variants)
        self.curriculum = tuple(self.curriculum)
        self.bt_len_range = tuple(self.bt_len_range)
        if self.schedule not in ("mixed", "curriculum"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "mixed" and self.variants and self.batch_size < 2:
            raise ValueError("mixed batches need batch_size >= 2")
        if self.schedule == "curriculum" and not self.curriculum:
            raise ValueError("curriculum schedule needs at least one stage")
        if self.select not in ("best_unseen", "last"):
            raise ValueError(f"unknown checkpoint selection {self.select!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))


@dataclass
class TrainingData:
    vocab: Vocab
    envs: dict[str, Environment]
    split: DatasetSplit
    edited: dict[str, dict[str, Environment]] = field(default_factory=dict)  # variant -> env_id -> env

    def source(self, name: str) -> dict[str, Environment]:
        if name == ORIGINAL:
            return self.envs
        try:
            return self.edited[name]
        except KeyError:
            raise ValueError(f"unknown environment source {name!r}; have {[ORIGINAL, *self.edited]}") from None


@dataclass
class TrainResult:
    agent: Follower
    checkpoints: dict[str, dict]
    log: list[dict]
    examples_consumed: int = 0
    synthetic: list[Episode] = field(default_factory=list)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, checkpoint: Optional[dict]):
        super().__init__(message)
        self.checkpoint = checkpoint


def max_steps_for(episodes: Sequence[Episode]) -> int:
    return 2 * max(ep.hops for ep in episodes) + 2


def mixed_batch(train_set: Sequence[Episode], original_envs: Mapping[str, Environment],
                edited_envs: Mapping[str, Union[Environment, Sequence[Environment]]], N: int,
                seed: Union[int, np.random.Generator]) -> list[tuple[Environment, Episode]]:
    """N episodes: the first ceil(N/2) see their original environment, the rest an edited one."""
    if N < 1:
        raise ValueError("batch size must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng([seed, 0xBA])
    idx = rng.choice(len(train_set), size=N, replace=len(train_set) < N)
    n_orig = (N + 1) // 2
    batch = []
    for j, k in enumerate(idx):
        ep = train_set[int(k)]
        if j < n_orig:
            batch.append((original_envs[ep.env_id], ep))
            continue
        options = edited_envs.get(ep.env_id)
        if options is None:
            raise KeyError(f"no edited counterpart for environment {ep.env_id}")
        if isinstance(options, Environment):
            options = [options]
        batch.append((options[int(rng.integers(len(options)))], ep))
    return batch


def plain_batch(train_set: Sequence[Episode], envs: Mapping[str, Environment], N: int,
                rng: np.random.Generator) -> list[tuple[Environment, Episode]]:
    idx = rng.choice(len(train_set), size=N, replace=len(train_set) < N)
    return [(envs[train_set[int(k)].env_id], train_set[int(k)]) for k in idx]


def ensemble_decide(logit_lists: Sequence[Sequence[float]]) -> int:
    """Argmax of the elementwise mean logits; ties go to the lowest index."""
    lengths = {len(lg) for lg in logit_lists}
    if len(lengths) != 1:
        raise ValueError(f"logit lists differ in length: {sorted(lengths)}")
    mean = np.mean(np.asarray(logit_lists, dtype=np.float64), axis=0)
    return int(np.argmax(mean))


def build_agent(vocab: Vocab, feature_dim: int, config: TrainConfig) -> Follower:
    torch.manual_seed(config.seed)
    return Follower(len(vocab), feature_dim + ORIENT_DIM, hidden=config.hidden, embed=config.embed,
                    feature_dropout=config.feature_dropout)


@torch.no_grad()
def evaluate(agents, vocab: Optional[Vocab], envs: Mapping[str, Environment], episodes: Sequence[Episode],
             success_radius: float = SUCCESS_RADIUS, max_steps: Optional[int] = None,
             batch_size: int = 64, **meta) -> MetricsReport:
    """Single-run evaluation: one argmax (or ensemble) rollout per episode.

    ``agents`` is a Follower, a list of Followers (logit-averaging ensemble) or
    None for the shortest-path teacher.
    """
    if isinstance(agents, Follower):
        agents = [agents]
    agents = list(agents or [])
    modes = [a.training for a in agents]
    for a in agents:
        a.eval()
    max_steps = max_steps or max_steps_for(episodes)
    rows = []
    try:
        for start in range(0, len(episodes), batch_size):
            chunk = episodes[start: start + batch_size]
            pairs = [(envs[ep.env_id], ep) for ep in chunk]
            trajs = rollout_batch(agents, vocab, pairs, "argmax" if agents else "teacher", max_steps)
            rows.extend(episode_row(env, ep, tr.nodes, success_radius) for tr, (env, ep) in zip(trajs, pairs))
    finally:
        for a, m in zip(agents, modes):
            a.train(m)
    return MetricsReport.from_rows(rows, **meta)


def _snapshot(agent: Follower) -> dict:
    return {k: v.detach().clone() for k, v in agent.state_dict().items()}


class _Loop:
    """Shared optimisation state across stages."""

    def __init__(self, agent: Follower, data: TrainingData, config: TrainConfig):
        self.agent = agent
        self.data = data
        self.config = config
        self.opt = torch.optim.Adam(agent.parameters(), lr=config.lr)
        self.rng = np.random.default_rng([config.seed, 0x7A])
        self.gen = torch.Generator().manual_seed(config.seed)
        self.log: list[dict] = []
        self.best_sr = -1.0
        self.best: Optional[dict] = None
        self.last_good: Optional[dict] = None
        self.examples = 0
        self.global_it = 0
        self.max_steps = config.max_steps or max_steps_for(data.split.train)

    def step(self, pairs, stage: str, stage_it: int) -> None:
        cfg = self.config
        self.agent.train()
        il = imitation_loss(rollout_batch(self.agent, self.data.vocab, pairs, "teacher", self.max_steps))
        trajs = rollout_batch(self.agent, self.data.vocab, pairs, "sample", self.max_steps, self.gen)
        rl, mean_return = batch_rl_loss(trajs, pairs, cfg.success_radius)
        loss = rl + cfg.il_weight * il
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss in {stage} at iteration {stage_it}", self.last_good)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.examples += len(pairs)
        self.global_it += 1
        self.log.append({"stage": stage, "iteration": stage_it, "il_loss": round(il.item(), 9),
                         "rl_loss": round(rl.item(), 9), "return": round(mean_return, 9),
                         "sources": sorted({env.provenance for env, _ in pairs})})
        if cfg.eval_every and self.global_it % cfg.eval_every == 0:
            self.validate(stage, stage_it)

    def validate(self, stage: str, stage_it: int) -> dict:
        split, envs, vocab = self.data.split, self.data.envs, self.data.vocab
        row = {"stage": stage, "iteration": stage_it, "eval": True}
        for name in ("val_seen", "val_unseen"):
            eps = split.get(name)
            if eps:
                rep = evaluate(self.agent, vocab, envs, eps, self.config.success_radius, self.max_steps)
                row[f"{name}_SR"] = round(rep.overall["SR"], 9)
                row[f"{name}_SPL"] = round(rep.overall["SPL"], 9)
        self.log.append(row)
        sr = row.get("val_unseen_SR", row.get("val_seen_SR", 0.0))
        self.last_good = _snapshot(self.agent)
        if sr > self.best_sr:
            self.best_sr, self.best = sr, self.last_good
        logger.info("%s it=%d %s", stage, stage_it, row)
        return row

    def finish(self, checkpoints: dict[str, dict]) -> TrainResult:
        if self.config.select == "best_unseen":
            self.validate("final", self.global_it)
            self.agent.load_state_dict(self.best)
            checkpoints["best"] = self.best
        checkpoints["final"] = _snapshot(self.agent)
        return TrainResult(self.agent, checkpoints, self.log, self.examples)


def _edited_by_env(data: TrainingData, variants: Sequence[str]) -> dict[str, list[Environment]]:
    out: dict[str, list[Environment]] = {}
    for v in variants:
        for env_id, env in data.source(v).items():
            out.setdefault(env_id, []).append(env)
    return out


def train(data: TrainingData, config: TrainConfig, speaker: Optional[Speaker] = None,
          agent: Optional[Follower] = None) -> TrainResult:
    """Stage 2 (mixed original/edited batches) and optional stage 3 (back translation)."""
    if config.schedule == "curriculum":
        return curriculum_train(data, config.curriculum, config, agent)
    feature_dim = next(iter(data.envs.values())).spec.feature_dim
    agent = agent or build_agent(data.vocab, feature_dim, config)
    loop = _Loop(agent, data, config)
    edited = _edited_by_env(data, config.variants)
    train_set = data.split.train

    def next_batch(pool):
        if edited:
            return mixed_batch(pool, data.envs, edited, config.batch_size, loop.rng)
        return plain_batch(pool, data.envs, config.batch_size, loop.rng)

    checkpoints: dict[str, dict] = {}
    for it in range(config.iterations):
        loop.step(next_batch(train_set), "stage2", it)
    checkpoints["stage2"] = _snapshot(agent)
    synthetic: list[Episode] = []
    if config.bt_iterations > 0:
        if speaker is None:
            raise ValueError("back translation needs a trained speaker")
        seen = [data.envs[e] for e in data.split.seen_envs]
        synthetic = back_translate(speaker, data.vocab, seen, config.bt_paths, config.seed,
                                   config.bt_len_range, annotated=train_set)
        pool = list(train_set) + synthetic
        if not config.bt_mix_edits:
            edited = {}
        for it in range(config.bt_iterations):
            loop.step(next_batch(pool), "stage3", it)
        checkpoints["stage3"] = _snapshot(agent)
    result = loop.finish(checkpoints)
    result.synthetic = synthetic
    return result


def curriculum_train(data: TrainingData, stages: Sequence[str], config: TrainConfig,
                     agent: Optional[Follower] = None) -> TrainResult:
    """Sequential stages with equal budgets, each drawing features from a single source."""
    if not stages:
        raise ValueError("curriculum needs at least one stage")
    sources = [data.source(s) for s in stages]  # validates names up front
    feature_dim = next(iter(data.envs.values())).spec.feature_dim
    agent = agent or build_agent(data.vocab, feature_dim, config)
    loop = _Loop(agent, data, config)
    checkpoints: dict[str, dict] = {}
    for k, (name, envs) in enumerate(zip(stages, sources)):
        for it in range(config.iterations):
            loop.step(plain_batch(data.split.train, envs, config.batch_size, loop.rng), f"curriculum{k}:{name}", it)
        checkpoints[f"curriculum{k}:{name}"] = _snapshot(agent)
    return loop.finish(checkpoints)
