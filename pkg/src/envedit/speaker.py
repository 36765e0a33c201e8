"""Style-aware speaker: route encoder, attention decoder initialised from the start-view style."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import render
from .render import VIEW_ELEVATIONS, VIEW_HEADINGS, StyleEncoder, StyleEncoderParams
from .vocab import Vocab
from .world import Environment, Episode, STOP_TOKEN, hop_view, sample_episodes

logger = logging.getLogger(__name__)


def route_inputs(env: Environment, path: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Route features (L + 1, D + 4) and context (L + 1, 4 + C + 2) for an L-hop path.

    Step i < L describes hop i by its representative view (orientation relative to
    the heading of the previous hop) and its class histogram; the last step is an
    end marker.
    """
    spec = env.spec
    feat_dim = spec.feature_dim + render.ORIENT_DIM
    n_bins = spec.num_classes + 1  # classes 1..C+1
    steps = len(path) - 1
    route = np.zeros((steps + 1, feat_dim))
    context = np.zeros((steps + 1, render.ORIENT_DIM + n_bins + 1))
    heading = 0.0
    for i, (a, b) in enumerate(zip(path[:-1], path[1:])):
        view_index, hop_heading, hop_elevation = hop_view(env, a, b)
        node = env.index(a)
        rel = render.orientation_feature(VIEW_HEADINGS[view_index] - heading, VIEW_ELEVATIONS[view_index])
        route[i] = np.concatenate([env.features[node, view_index], rel])
        hist = np.bincount(env.grids[node, view_index].ravel() - 1, minlength=n_bins)[:n_bins]
        context[i, : render.ORIENT_DIM] = render.orientation_feature(hop_heading - heading, hop_elevation)
        context[i, render.ORIENT_DIM: -1] = hist / hist.sum()
        heading = hop_heading
    context[steps, -1] = 1.0
    return route, context


class Speaker(nn.Module):
    def __init__(self, vocab_size: int, feature_dim: int, context_dim: int, encoder_params: StyleEncoderParams,
                 hidden: int = 64, embed: int = 32, style_aware: bool = True):
        super().__init__()
        self.style_aware = style_aware
        self.hidden = hidden
        style_dim = encoder_params.style_dim
        # two stacked bidirectional layers: route features, then (route encoding, context)
        self.route_rnn = nn.LSTM(feature_dim, hidden // 2, batch_first=True, bidirectional=True)
        self.context_rnn = nn.LSTM(hidden + context_dim, hidden // 2, batch_first=True, bidirectional=True)
        self.style_encoder = StyleEncoder(encoder_params, feature_dim - render.ORIENT_DIM)
        self.style_fc = nn.Linear(style_dim, 2 * hidden)
        self.embedding = nn.Embedding(vocab_size, embed, padding_idx=0)
        self.decoder = nn.LSTMCell(embed, hidden)
        self.attn_query = nn.Linear(hidden, hidden, bias=False)
        self.fuse = nn.Linear(2 * hidden, hidden)
        self.out = nn.Linear(hidden, vocab_size)
        nn.init.zeros_(self.out.weight)  # uniform predictions at initialization
        nn.init.zeros_(self.out.bias)

    @property
    def dtype(self) -> torch.dtype:
        return self.out.weight.dtype

    def style_embedding(self, start_views: torch.Tensor) -> torch.Tensor:
        """Mean style encoding over the 36 views of each start panorama: (B, 36, D) -> (B, d_s)."""
        return self.style_encoder(start_views).mean(dim=1)

    def init_decoder_state(self, start_views: torch.Tensor):
        s0 = self.style_embedding(start_views)
        h, c = self.style_fc(s0).chunk(2, dim=-1)
        return h, c

    def encode_route(self, route: torch.Tensor, context: torch.Tensor, lengths: Sequence[int]):
        lengths_t = torch.as_tensor(list(lengths), dtype=torch.long)
        total = route.shape[1]
        packed = nn.utils.rnn.pack_padded_sequence(route, lengths_t, batch_first=True, enforce_sorted=False)
        enc, _ = self.route_rnn(packed)
        enc, _ = nn.utils.rnn.pad_packed_sequence(enc, batch_first=True, total_length=total)
        packed = nn.utils.rnn.pack_padded_sequence(torch.cat([enc, context], -1), lengths_t, batch_first=True,
                                                   enforce_sorted=False)
        ctx, _ = self.context_rnn(packed)
        ctx, _ = nn.utils.rnn.pad_packed_sequence(ctx, batch_first=True, total_length=total)
        mask = torch.arange(total)[None, :] < lengths_t[:, None]
        return ctx, mask

    def initial_state(self, start_views: torch.Tensor):
        if self.style_aware:
            return self.init_decoder_state(start_views)
        zeros = torch.zeros(start_views.shape[0], self.hidden, dtype=self.dtype)
        return zeros, zeros.clone()

    def decode_step(self, word: torch.Tensor, state, ctx, mask):
        h, c = self.decoder(self.embedding(word), state)
        scores = torch.einsum("blh,bh->bl", ctx, self.attn_query(h)).masked_fill(~mask, float("-inf"))
        att = torch.einsum("bl,blh->bh", torch.softmax(scores, -1), ctx)
        return self.out(torch.tanh(self.fuse(torch.cat([att, h], -1)))), (h, c)

    def forward(self, batch: "SpeakerBatch") -> torch.Tensor:
        """Teacher-forced logits (B, T, V) for the target tokens."""
        ctx, mask = self.encode_route(batch.route, batch.context, batch.route_lengths)
        state = self.initial_state(batch.start_views)
        inputs = batch.targets.clone()
        inputs = torch.cat([torch.full_like(inputs[:, :1], batch.bos_id), inputs[:, :-1]], 1)
        out = []
        for t in range(inputs.shape[1]):
            logits, state = self.decode_step(inputs[:, t], state, ctx, mask)
            out.append(logits)
        return torch.stack(out, 1)


@dataclass
class SpeakerBatch:
    route: torch.Tensor
    context: torch.Tensor
    route_lengths: list[int]
    start_views: torch.Tensor  # (B, 36, D)
    targets: torch.Tensor  # (B, T) token ids, 0 = pad
    bos_id: int


def make_batch(pairs: Sequence[tuple[Environment, Sequence[str]]], vocab: Vocab,
               instructions: Optional[Sequence[Sequence[str]]] = None,
               dtype: torch.dtype = torch.float32) -> SpeakerBatch:
    """``pairs`` are (env, path); ``instructions`` may be omitted for decoding."""
    inputs = [route_inputs(env, path) for env, path in pairs]
    lengths = [r.shape[0] for r, _ in inputs]
    L = max(lengths)
    route = np.zeros((len(pairs), L, inputs[0][0].shape[1]))
    context = np.zeros((len(pairs), L, inputs[0][1].shape[1]))
    for b, (r, c) in enumerate(inputs):
        route[b, : len(r)] = r
        context[b, : len(c)] = c
    start = np.stack([env.features[env.index(path[0])] for env, path in pairs])
    if instructions is None:
        targets = torch.zeros(len(pairs), 1, dtype=torch.long)
    else:
        T = max(len(t) for t in instructions)
        targets = torch.zeros(len(pairs), T, dtype=torch.long)
        for b, toks in enumerate(instructions):
            targets[b, : len(toks)] = torch.as_tensor(vocab.encode(toks))
    return SpeakerBatch(torch.as_tensor(route, dtype=dtype), torch.as_tensor(context, dtype=dtype), lengths,
                        torch.as_tensor(start, dtype=dtype), targets, vocab.bos_id)


def speaker_loss(speaker: Speaker, batch: SpeakerBatch) -> torch.Tensor:
    """Mean per-token negative log-likelihood (padding ignored)."""
    logits = speaker(batch)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch.targets.reshape(-1), ignore_index=0)


def build_speaker(env: Environment, vocab: Vocab, style_aware: bool = True, hidden: int = 64,
                  embed: int = 32, seed: int = 0) -> Speaker:
    torch.manual_seed(seed)
    spec = env.spec
    context_dim = render.ORIENT_DIM + spec.num_classes + 2
    return Speaker(len(vocab), spec.feature_dim + render.ORIENT_DIM, context_dim, env.context.encoder,
                   hidden=hidden, embed=embed, style_aware=style_aware)


@dataclass
class SpeakerConfig:
    iterations: int = 600
    batch_size: int = 32
    lr: float = 3e-3
    hidden: int = 64
    embed: int = 32
    style_aware: bool = True
    seed: int = 0
    log_every: int = 50


def train_speaker(envs: dict[str, Environment], episodes: Sequence[Episode], vocab: Vocab,
                  config: SpeakerConfig = SpeakerConfig(), speaker: Optional[Speaker] = None,
                  log: Optional[list] = None) -> Speaker:
    """Teacher-forced maximum likelihood on (path, instruction) pairs."""
    if not episodes:
        raise ValueError("speaker training needs at least one episode")
    if speaker is None:
        speaker = build_speaker(next(iter(envs.values())), vocab, config.style_aware, config.hidden,
                                config.embed, config.seed)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng([config.seed, 0x5B])
    opt = torch.optim.Adam(speaker.parameters(), lr=config.lr)
    speaker.train()
    for it in range(config.iterations):
        n = min(config.batch_size, len(episodes))
        idx = rng.choice(len(episodes), size=n, replace=False)
        eps = [episodes[i] for i in idx]
        batch = make_batch([(envs[e.env_id], e.path) for e in eps], vocab, [e.instruction for e in eps],
                           speaker.dtype)
        loss = speaker_loss(speaker, batch)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"speaker loss diverged at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None:
            log.append({"iteration": it, "loss": loss.item()})
        if config.log_every and it % config.log_every == 0:
            logger.debug("speaker it=%d loss=%.4f", it, loss.item())
    speaker.eval()
    return speaker


def default_max_length(hops: int) -> int:
    return 4 * hops + 4


@torch.no_grad()
def generate_batch(speaker: Speaker, vocab: Vocab, pairs: Sequence[tuple[Environment, Sequence[str]]],
                   mode: str = "greedy", seed: Optional[int] = None,
                   max_length: Optional[int] = None) -> list[tuple[list[str], bool]]:
    """Decode instructions; each result is (tokens, truncated)."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    gen = torch.Generator().manual_seed(seed if seed is not None else 0)
    batch = make_batch(pairs, vocab, dtype=speaker.dtype)
    ctx, mask = speaker.encode_route(batch.route, batch.context, batch.route_lengths)
    state = speaker.initial_state(batch.start_views)
    limits = [max_length or default_max_length(len(path) - 1) for _, path in pairs]
    word = torch.full((len(pairs),), vocab.bos_id, dtype=torch.long)
    stop_id = vocab.stoi[STOP_TOKEN]
    out: list[list[int]] = [[] for _ in pairs]
    done = [False] * len(pairs)
    for _ in range(max(limits)):
        logits, state = speaker.decode_step(word, state, ctx, mask)
        logits[:, : vocab.bos_id + 1] = float("-inf")  # never emit special tokens
        if mode == "greedy":
            word = logits.argmax(-1)
        else:
            word = torch.multinomial(torch.softmax(logits, -1), 1, generator=gen)[:, 0]
        for b, w in enumerate(word.tolist()):
            if done[b]:
                continue
            out[b].append(w)
            if w == stop_id or len(out[b]) >= limits[b]:
                done[b] = True
        if all(done):
            break
    results = []
    for ids in out:
        tokens = vocab.decode(ids)
        results.append((tokens, tokens[-1:] != [STOP_TOKEN]))
    return results


def generate_instruction(speaker: Speaker, vocab: Vocab, env: Environment, path: Sequence[str],
                         mode: str = "greedy", seed: Optional[int] = None,
                         max_length: Optional[int] = None) -> tuple[list[str], bool]:
    return generate_batch(speaker, vocab, [(env, path)], mode, seed, max_length)[0]


def back_translate(speaker: Speaker, vocab: Vocab, env_set: Sequence[Environment], n_paths: int, seed: int,
                   len_range: tuple[int, int] = (1, 4), annotated: Sequence[Episode] = (),
                   batch_size: int = 64) -> list[Episode]:
    """Synthetic episodes on unannotated paths of the given (seen) environments."""
    if n_paths <= 0:
        return []
    exclude = {(e.env_id, e.path[0], e.goal) for e in annotated}
    episodes = sample_episodes(env_set, n_paths, len_range, seed, exclude=exclude, id_prefix="bt")
    by_id = {env.env_id: env for env in env_set}
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start: start + batch_size]
        decoded = generate_batch(speaker, vocab, [(by_id[e.env_id], e.path) for e in chunk])
        for ep, (tokens, _) in zip(chunk, decoded):
            ep.instruction = tokens if tokens else [STOP_TOKEN]
            ep.synthetic = True
    return episodes
