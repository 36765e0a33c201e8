"""Instruction-following navigation policy, batched rollouts and the IL / RL losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from . import render
from .render import ORIENT_DIM, VIEW_ELEVATIONS, VIEW_HEADINGS
from .vocab import Vocab
from .world import Environment, Episode

SUCCESS_REWARD = 2.0
FAILURE_REWARD = -2.0


class Follower(nn.Module):
    """Attention LSTM policy scoring K navigable candidates plus STOP (always last)."""

    def __init__(self, vocab_size: int, feature_dim: int, hidden: int = 64, embed: int = 32,
                 feature_dropout: float = 0.0):
        super().__init__()
        self.feature_dim = feature_dim  # D + 4
        self.hidden = hidden
        self.embedding = nn.Embedding(vocab_size, embed, padding_idx=0)
        self.encoder = nn.LSTM(embed, hidden // 2, batch_first=True, bidirectional=True)
        self.init_state = nn.Linear(hidden, 2 * hidden)
        self.pano_query = nn.Linear(hidden, feature_dim, bias=False)
        self.cell = nn.LSTMCell(2 * feature_dim, hidden)
        self.text_query = nn.Linear(hidden, hidden, bias=False)
        self.fuse = nn.Linear(2 * hidden, hidden)
        self.cand_proj = nn.Linear(feature_dim, hidden, bias=False)
        self.stop_feature = nn.Parameter(0.1 * torch.randn(feature_dim))
        self.feature_dropout = nn.Dropout(feature_dropout)

    @property
    def dtype(self) -> torch.dtype:
        return self.stop_feature.dtype

    def encode(self, token_ids: torch.Tensor, lengths: Sequence[int]):
        """Context (B, L, H), padding mask (B, L) and the initial recurrent state."""
        lengths_t = torch.as_tensor(list(lengths), dtype=torch.long)
        if (lengths_t <= 0).any():
            raise ValueError("empty instruction")
        packed = pack_padded_sequence(self.embedding(token_ids), lengths_t, batch_first=True,
                                      enforce_sorted=False)
        out, (h_n, _) = self.encoder(packed)
        ctx, _ = pad_packed_sequence(out, batch_first=True, total_length=token_ids.shape[1])
        mask = torch.arange(token_ids.shape[1])[None, :] < lengths_t[:, None]
        summary = torch.cat([h_n[0], h_n[1]], dim=-1)
        h0, c0 = torch.tanh(self.init_state(summary)).chunk(2, dim=-1)
        return ctx, mask, (h0, c0)

    def _drop(self, feats: torch.Tensor) -> torch.Tensor:
        if self.feature_dropout.p == 0.0:
            return feats
        visual = self.feature_dropout(feats[..., :-ORIENT_DIM])
        return torch.cat([visual, feats[..., -ORIENT_DIM:]], dim=-1)

    def step(self, state, prev_action: torch.Tensor, pano: torch.Tensor, cands: torch.Tensor,
             cand_mask: torch.Tensor, ctx: torch.Tensor, ctx_mask: torch.Tensor):
        """Padded logits (B, Kmax + 1) with STOP in the last column; padding is -inf."""
        h, c = state
        pano = self._drop(pano)
        cands = self._drop(cands)
        pano_scores = torch.einsum("bvf,bf->bv", pano, self.pano_query(h))
        pano_att = torch.einsum("bv,bvf->bf", torch.softmax(pano_scores, -1), pano)
        h, c = self.cell(torch.cat([prev_action, pano_att], -1), (h, c))
        txt_scores = torch.einsum("blh,bh->bl", ctx, self.text_query(h))
        txt_scores = txt_scores.masked_fill(~ctx_mask, float("-inf"))
        txt_att = torch.einsum("bl,blh->bh", torch.softmax(txt_scores, -1), ctx)
        h_tilde = torch.tanh(self.fuse(torch.cat([txt_att, h], -1)))
        stop = self.stop_feature.expand(cands.shape[0], 1, -1)
        keys = self.cand_proj(torch.cat([cands, stop], 1))
        logits = torch.einsum("bkh,bh->bk", keys, h_tilde)
        full_mask = torch.cat([cand_mask, cand_mask.new_ones(cand_mask.shape[0], 1)], 1)
        return logits.masked_fill(~full_mask, float("-inf")), (h, c)

    def encode_instruction(self, vocab: Vocab, tokens: Sequence[str]) -> torch.Tensor:
        if not tokens:
            raise ValueError("empty instruction")
        ids = torch.as_tensor([vocab.encode(tokens)], dtype=torch.long)
        ctx, _, _ = self.encode(ids, [len(tokens)])
        return ctx[0]


def compact_logits(padded: torch.Tensor, k: int) -> torch.Tensor:
    """Per-item logits of length K + 1 from one padded row."""
    return torch.cat([padded[:k], padded[-1:]])


@dataclass
class Trajectory:
    episode_id: str
    env_id: str
    nodes: list[str]
    actions: list[int] = field(default_factory=list)
    teacher_actions: list[int] = field(default_factory=list)
    logits: list[torch.Tensor] = field(default_factory=list)
    log_probs: list[torch.Tensor] = field(default_factory=list)
    terminated_by: str = "max_steps"


def relative_orientation(headings, elevations, agent_heading: float) -> np.ndarray:
    return render.orientation_feature(np.asarray(headings) - agent_heading, elevations)


def observation(env: Environment, node: int, heading: float) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Panorama (36, D + 4), candidate features (K, D + 4) and candidate target indices."""
    feats = env.features[node]
    pano = np.concatenate([feats, relative_orientation(VIEW_HEADINGS, VIEW_ELEVATIONS, heading)], axis=1)
    cands = env.nav.candidates[node]
    targets = [c[0] for c in cands]
    view_idx = [c[1] for c in cands]
    return pano, pano[view_idx], targets


def _pad_tokens(vocab: Vocab, instructions: Sequence[Sequence[str]]) -> tuple[torch.Tensor, list[int]]:
    lengths = [len(t) for t in instructions]
    if min(lengths) == 0:
        raise ValueError("empty instruction")
    ids = torch.zeros(len(instructions), max(lengths), dtype=torch.long)
    for b, toks in enumerate(instructions):
        ids[b, : len(toks)] = torch.as_tensor(vocab.encode(toks))
    return ids, lengths


def rollout_batch(agents, vocab: Optional[Vocab], pairs: Sequence[tuple[Environment, Episode]], mode: str,
                  max_steps: int, generator: Optional[torch.Generator] = None) -> list[Trajectory]:
    """Roll out one policy (or a logit-averaging ensemble) over a batch of episodes.

    ``mode`` is 'teacher' (execute shortest-path actions), 'sample' or 'argmax'.
    With ``agents`` empty/None only 'teacher' is allowed and no logits are recorded.
    """
    if mode not in ("teacher", "sample", "argmax"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if isinstance(agents, nn.Module):
        agents = [agents]
    agents = list(agents or [])
    if not agents and mode != "teacher":
        raise ValueError("a policy is required for sample/argmax rollouts")
    if len(agents) > 1 and mode != "argmax":
        raise ValueError("ensembles only support argmax decisions")
    B = len(pairs)
    trajs = [Trajectory(ep.episode_id, ep.env_id, [ep.path[0]]) for _, ep in pairs]
    cur = [env.index(ep.path[0]) for env, ep in pairs]
    goal = [env.index(ep.goal) for env, ep in pairs]
    heading = [0.0] * B
    active = list(range(B))
    states = ctxs = None
    if agents:
        dtype = agents[0].dtype
        ids, lengths = _pad_tokens(vocab, [ep.instruction for _, ep in pairs])
        ctxs, states = [], []
        for agent in agents:
            ctx, ctx_mask, state = agent.encode(ids, lengths)
            ctxs.append((ctx, ctx_mask))
            states.append(state)
        prev = torch.zeros(B, agents[0].feature_dim, dtype=dtype)
    for _ in range(max_steps):
        if not active:
            break
        obs = [observation(pairs[b][0], cur[b], heading[b]) for b in active]
        teacher = []
        for b, (_, _, targets) in zip(active, obs):
            nxt = pairs[b][0].nav.next_hop[cur[b], goal[b]]
            teacher.append(len(targets) if nxt < 0 else targets.index(int(nxt)))
        if agents:
            kmax = max(len(o[2]) for o in obs)
            pano = torch.as_tensor(np.stack([o[0] for o in obs]), dtype=dtype)
            cands = torch.zeros(len(active), kmax, agents[0].feature_dim, dtype=dtype)
            cand_mask = torch.zeros(len(active), kmax, dtype=torch.bool)
            for r, o in enumerate(obs):
                k = len(o[2])
                if k:
                    cands[r, :k] = torch.as_tensor(o[1], dtype=dtype)
                    cand_mask[r, :k] = True
            idx = torch.as_tensor(active)
            step_logits = []
            for a, agent in enumerate(agents):
                h, c = states[a]
                ctx, ctx_mask = ctxs[a]
                logits, (h_new, c_new) = agent.step((h[idx], c[idx]), prev[idx], pano, cands, cand_mask,
                                                    ctx[idx], ctx_mask[idx])
                h, c = h.clone(), c.clone()
                h[idx], c[idx] = h_new, c_new
                states[a] = (h, c)
                step_logits.append(logits)
            logits = step_logits[0] if len(agents) == 1 else torch.stack(step_logits).mean(0)
            log_probs = torch.log_softmax(logits, -1)
            if mode == "teacher":
                chosen = list(teacher)
            elif mode == "argmax":
                chosen = logits.detach().argmax(-1).tolist()
            else:
                chosen = torch.multinomial(log_probs.detach().exp(), 1, generator=generator)[:, 0].tolist()
        else:
            chosen = list(teacher)
        next_active = []
        prev_rows = []
        for r, b in enumerate(active):
            env = pairs[b][0]
            targets = obs[r][2]
            k = len(targets)
            # actions are reported in the compact K + 1 layout: STOP == K
            a = chosen[r]
            if agents and mode != "teacher" and a == logits.shape[1] - 1:
                a = k
            action = a
            is_stop = action == k
            tr = trajs[b]
            tr.actions.append(action)
            tr.teacher_actions.append(teacher[r])
            if agents:
                compact = compact_logits(logits[r], k)
                tr.logits.append(compact)
                tr.log_probs.append(torch.log_softmax(compact, -1)[action])
            if is_stop:
                tr.terminated_by = "stop"
                prev_rows.append(None)
                continue
            hop_heading = env.nav.candidates[cur[b]][action][2]
            cur[b] = targets[action]
            heading[b] = hop_heading
            tr.nodes.append(env.node_ids[cur[b]])
            next_active.append(b)
            prev_rows.append(obs[r][1][action])
        if agents:
            new_prev = prev.clone()
            for r, b in enumerate(active):
                if prev_rows[r] is not None:
                    new_prev[b] = torch.as_tensor(prev_rows[r], dtype=prev.dtype)
            prev = new_prev
        active = next_active
    return trajs


def rollout(agent, vocab: Optional[Vocab], env: Environment, episode: Episode, mode: str, max_steps: int,
            seed: Optional[int] = None) -> Trajectory:
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    return rollout_batch(agent, vocab, [(env, episode)], mode, max_steps, gen)[0]


def imitation_loss(trajectories: Sequence[Trajectory]) -> torch.Tensor:
    """Mean per-step cross entropy against the teacher action."""
    terms = [-torch.log_softmax(lg, -1)[t] for tr in trajectories for lg, t in zip(tr.logits, tr.teacher_actions)]
    return torch.stack(terms).mean()


def step_rewards(trajectory: Trajectory, env: Environment, episode: Episode,
                 success_radius: float = 3.0) -> np.ndarray:
    """Progress in geodesic distance to the goal per move, 0 for STOP, plus +2 / -2 on the last step.

    A trajectory truncated without STOP counts as a failure.
    """
    goal = env.index(episode.goal)
    dist = env.nav.dist
    nodes = [env.index(n) for n in trajectory.nodes]
    rewards = [dist[a, goal] - dist[b, goal] for a, b in zip(nodes[:-1], nodes[1:])]
    if trajectory.terminated_by == "stop":
        rewards.append(0.0)
    if rewards:
        ok = trajectory.terminated_by == "stop" and dist[nodes[-1], goal] <= success_radius
        rewards[-1] += SUCCESS_REWARD if ok else FAILURE_REWARD
    return np.asarray(rewards, dtype=np.float64)


def rewards_to_go(rewards: np.ndarray) -> np.ndarray:
    return np.cumsum(rewards[::-1])[::-1].copy()


def rl_loss(trajectory: Trajectory, env: Environment, episode: Episode, baseline=0.0,
            success_radius: float = 3.0) -> torch.Tensor:
    """REINFORCE with reward-to-go: -sum_t (G_t - b_t) log pi(a_t)."""
    returns = rewards_to_go(step_rewards(trajectory, env, episode, success_radius))
    adv = returns - np.broadcast_to(np.asarray(baseline, dtype=np.float64), returns.shape)
    logp = torch.stack(trajectory.log_probs)
    return -(torch.as_tensor(adv, dtype=logp.dtype) * logp).sum()


def batch_rl_loss(trajectories: Sequence[Trajectory], pairs: Sequence[tuple[Environment, Episode]],
                  success_radius: float = 3.0) -> tuple[torch.Tensor, float]:
    """Mean RL loss with a per-step batch-mean reward-to-go baseline; also returns mean return."""
    returns = [rewards_to_go(step_rewards(tr, env, ep, success_radius))
               for tr, (env, ep) in zip(trajectories, pairs)]
    horizon = max(len(g) for g in returns)
    baseline = np.zeros(horizon)
    for t in range(horizon):
        alive = [g[t] for g in returns if len(g) > t]
        baseline[t] = np.mean(alive)
    losses = [rl_loss(tr, env, ep, baseline[: len(g)], success_radius)
              for tr, (env, ep), g in zip(trajectories, pairs, returns)]
    return torch.stack(losses).mean(), float(np.mean([g[0] for g in returns]))
