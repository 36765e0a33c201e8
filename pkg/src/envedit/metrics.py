"""Navigation metrics: TL, NE, SR, SPL, DTW, nDTW, sDTW and their aggregation."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .world import Environment, path_length

SUCCESS_RADIUS = 3.0
METRIC_KEYS = ("TL", "NE", "SR", "SPL", "nDTW", "sDTW")
PERCENT_KEYS = ("SR", "SPL")


def tl_ne_sr(env: Environment, trajectory: Sequence[str], goal: str,
             success_radius: float = SUCCESS_RADIUS) -> tuple[float, float, int]:
    tl = path_length(env, trajectory)
    ne = env.distance(trajectory[-1], goal)
    return tl, ne, int(ne <= success_radius)


def spl(success: float, shortest_len: float, taken_len: float) -> float:
    if shortest_len < 0 or taken_len < 0:
        raise ValueError("path lengths must be non-negative")
    if shortest_len == 0:
        return float(success)
    return float(success) * shortest_len / max(taken_len, shortest_len)


def dtw(env: Environment, predicted: Sequence[str], reference: Sequence[str]) -> float:
    """Boundary-aligned monotone DTW with graph-geodesic cost."""
    if not predicted or not reference:
        raise ValueError("paths must be non-empty")
    pi = [env.index(n) for n in predicted]
    ri = [env.index(n) for n in reference]
    cost = env.nav.dist[np.ix_(pi, ri)]
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def ndtw(dtw_value: float, reference: Sequence[str], success_radius: float = SUCCESS_RADIUS) -> float:
    if not reference:
        raise ValueError("reference path must be non-empty")
    return math.exp(-dtw_value / (len(reference) * success_radius))


def sdtw(success: float, ndtw_value: float) -> float:
    return float(success) * ndtw_value


def episode_row(env: Environment, episode, trajectory: Sequence[str],
                success_radius: float = SUCCESS_RADIUS) -> dict:
    tl, ne, sr = tl_ne_sr(env, trajectory, episode.goal, success_radius)
    shortest = env.distance(episode.path[0], episode.goal)
    nd = ndtw(dtw(env, trajectory, episode.path), episode.path, success_radius)
    return {
        "episode_id": episode.episode_id,
        "env_id": episode.env_id,
        "TL": tl,
        "NE": ne,
        "SR": sr,
        "SPL": spl(sr, shortest, tl),
        "nDTW": nd,
        "sDTW": sdtw(sr, nd),
    }


def _means(rows: Sequence[dict]) -> dict:
    out = {"count": len(rows)}
    for key in METRIC_KEYS:
        mean = float(np.mean([r[key] for r in rows]))
        out[key] = 100.0 * mean if key in PERCENT_KEYS else mean
    return out


def aggregate(rows: Sequence[dict], group_by: str = "overall") -> dict:
    """Arithmetic means; SR and SPL as percentages. ``env_id`` grouping returns one entry per env."""
    if group_by == "overall":
        if not rows:
            raise ValueError("no rows to aggregate")
        return _means(rows)
    if group_by == "env_id":
        groups = defaultdict(list)
        for r in rows:
            groups[r["env_id"]].append(r)
        return {env_id: _means(g) for env_id, g in sorted(groups.items()) if g}
    raise ValueError(f"unknown grouping {group_by!r}")


@dataclass
class MetricsReport:
    rows: list[dict]
    overall: dict = field(default_factory=dict)
    per_env: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[dict], **meta) -> "MetricsReport":
        return cls(rows, aggregate(rows), aggregate(rows, "env_id"), meta)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["episode_id", "env_id", *METRIC_KEYS])
        for r in self.rows:
            writer.writerow([r["episode_id"], r["env_id"], *(f"{r[k]:.9g}" for k in METRIC_KEYS)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "aggregates": {"overall": self.overall, "per_env": self.per_env},
                           "rows": self.rows}, indent=1, sort_keys=True)

    def table(self) -> str:
        """Overall and per-environment means in the usual TL/NE/SR/SPL/nDTW/sDTW layout."""
        lines = [f"{'group':<12}{'n':>5}{'TL':>8}{'NE':>8}{'SR':>7}{'SPL':>7}{'nDTW':>8}{'sDTW':>8}"]
        for name, agg in [("overall", self.overall), *self.per_env.items()]:
            lines.append(f"{name:<12}{agg['count']:>5}{agg['TL']:>8.2f}{agg['NE']:>8.2f}{agg['SR']:>7.1f}"
                         f"{agg['SPL']:>7.1f}{agg['nDTW']:>8.3f}{agg['sDTW']:>8.3f}")
        return "\n".join(lines)
