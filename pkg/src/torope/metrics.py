"""Ranking metrics for a single held-out target per user, and attention
analytics (probability-weighted query-key distance, row entropy in nats)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionTrace
from .errors import InputError


def _rank_table(rankings, targets, k):
    if k < 1:
        raise InputError(f"k must be positive, got {k}")
    targets = np.asarray(targets, dtype=np.int64)
    if len(rankings) != targets.size:
        raise InputError(f"{len(rankings)} rankings but {targets.size} targets")
    if targets.size == 0:
        raise InputError("no users to score")
    short = [len(r) for r in rankings if len(r) < k]
    if short:
        raise InputError(f"k={k} exceeds ranking length {min(short)}")
    top = np.array([np.asarray(r[:k], dtype=np.int64) for r in rankings])
    return top, targets


def target_ranks(rankings, targets, k) -> np.ndarray:
    """1-based rank of each target within the top k, 0 when it is missing."""
    top, targets = _rank_table(rankings, targets, k)
    hit = top == targets[:, None]
    return np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, 0)


def hit_rate(rankings, targets, k: int) -> float:
    """Fraction of users whose target is among the first k ranked items."""
    return float(np.mean(target_ranks(rankings, targets, k) > 0))


def ndcg(rankings, targets, k: int) -> float:
    """Mean of 1/log2(rank + 1) for targets ranked within k, 0 otherwise."""
    r = target_ranks(rankings, targets, k)
    gains = np.zeros(r.size)
    hit = r > 0
    gains[hit] = 1.0 / np.log2(r[hit] + 1.0)
    return float(gains.mean())


@dataclass
class RankingReport:
    ks: tuple
    hr: dict
    ndcg: dict
    n_users: int
    ranks: np.ndarray | None = None

    def check(self) -> None:
        prev_h = prev_n = 0.0
        for k in self.ks:
            h, n = self.hr[k], self.ndcg[k]
            if not (0.0 <= n <= h <= 1.0):
                raise InputError(f"metrics out of range at k={k}: HR={h}, NDCG={n}")
            if h < prev_h or n < prev_n:
                raise InputError(f"metrics decrease at k={k}")
            prev_h, prev_n = h, n


def ranking_report(rankings, targets, ks, keep_ranks: bool = False) -> RankingReport:
    ks = tuple(sorted(int(k) for k in ks))
    full = target_ranks(rankings, targets, ks[-1])
    hr, nd = {}, {}
    for k in ks:
        hit = (full > 0) & (full <= k)
        hr[k] = float(hit.mean())
        gains = np.zeros(full.size)
        gains[hit] = 1.0 / np.log2(full[hit] + 1.0)
        nd[k] = float(gains.mean())
    report = RankingReport(ks, hr, nd, int(full.size), full if keep_ranks else None)
    report.check()
    return report


# ---------------------------------------------------------------- attention analytics


def _layer_probs(trace: AttentionTrace, layer: int) -> np.ndarray:
    p = np.asarray(trace.probs[layer], dtype=np.float64)
    return p if p.ndim == 4 else p[None]


def _valid_queries(trace: AttentionTrace, B: int, T: int) -> np.ndarray:
    if trace.lengths is None:
        return np.ones((B, T), dtype=bool)
    return np.arange(T)[None, :] < np.asarray(trace.lengths)[:, None]


def row_distance(probs) -> np.ndarray:
    """Per query i: sum_j p[i, j] * |i - j| over the last two axes."""
    p = np.asarray(probs, dtype=np.float64)
    T = p.shape[-1]
    gap = np.abs(np.arange(T)[:, None] - np.arange(T)[None, :])
    return (p * gap).sum(axis=-1)


def row_entropy(probs) -> np.ndarray:
    """Per query: -sum_j p log p (nats), with 0 log 0 taken as 0."""
    p = np.asarray(probs, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=-1)


def per_user_attention(trace: AttentionTrace, tol: float = 1e-6):
    """(distance, entropy), each (users, layers): means over valid queries and heads."""
    trace.check_stochastic(tol)
    dist, ent = [], []
    for layer in range(trace.n_layers):
        p = _layer_probs(trace, layer)
        B, H, T, _ = p.shape
        valid = _valid_queries(trace, B, T)[:, None, :]
        denom = valid.sum(axis=(1, 2)) * H
        dist.append(np.where(valid, row_distance(p), 0.0).sum(axis=(1, 2)) / denom)
        ent.append(np.where(valid, row_entropy(p), 0.0).sum(axis=(1, 2)) / denom)
    return np.stack(dist, axis=1), np.stack(ent, axis=1)


def attention_distance(trace: AttentionTrace, tol: float = 1e-6) -> np.ndarray:
    """Per-layer mean attention distance in index steps, averaged per user then over users."""
    return per_user_attention(trace, tol)[0].mean(axis=0)


def attention_entropy(trace: AttentionTrace, tol: float = 1e-6) -> np.ndarray:
    """Per-layer mean attention entropy in nats, averaged like ``attention_distance``."""
    return per_user_attention(trace, tol)[1].mean(axis=0)


@dataclass
class AttentionStats:
    distance: np.ndarray
    entropy: np.ndarray
    n_users: int
    n_eligible: int
    users: list = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.distance)


def aggregate_stats(distance, entropy, lengths, n_users: int, min_len: int, seed: int = 0, users=None) -> AttentionStats:
    """Average per-user (users, layers) stats over a seeded sample of users
    with at least ``min_len`` events. Uses every eligible user (with a
    warning) when fewer than ``n_users`` qualify."""
    distance = np.atleast_2d(np.asarray(distance, dtype=np.float64))
    entropy = np.atleast_2d(np.asarray(entropy, dtype=np.float64))
    lengths = np.asarray(lengths)
    if distance.shape != entropy.shape or distance.shape[0] != lengths.size:
        raise InputError("distance, entropy and lengths disagree on the number of users")
    eligible = np.flatnonzero(lengths >= min_len)
    if eligible.size == 0:
        raise InputError(f"no user has at least {min_len} events")
    if eligible.size < n_users:
        warnings.warn(f"only {eligible.size} users have >= {min_len} events; using all of them", stacklevel=2)
        chosen = eligible
    else:
        chosen = np.sort(np.random.default_rng(seed).choice(eligible, size=n_users, replace=False))
    ids = list(chosen) if users is None else [users[i] for i in chosen]
    return AttentionStats(
        distance[chosen].mean(axis=0), entropy[chosen].mean(axis=0), int(chosen.size), int(eligible.size), ids
    )
