"""Ranking metrics, the evaluation harness, and the S-POP / IKNN baselines."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import DataError, __version__
from .data import Session, TrainingSample

DEFAULT_KS = (5, 20)


class UndefinedMetricError(DataError, ValueError):
    pass


class EvaluationError(DataError):
    pass


def rank_target(scores, target: int) -> int:
    """1-based rank of ``target`` under the order (score desc, index asc)."""
    scores = np.asarray(scores)
    s = scores[target]
    return int(1 + np.count_nonzero(scores > s) + np.count_nonzero(scores[:target] == s))


def rank_targets(scores: np.ndarray, targets) -> np.ndarray:
    """Row-wise :func:`rank_target` for a (B, n_items) score matrix."""
    scores = np.asarray(scores)
    targets = np.asarray(targets, dtype=np.int64)
    s = scores[np.arange(len(targets)), targets][:, None]
    ahead = scores > s
    tied_before = (scores == s) & (np.arange(scores.shape[1])[None, :] < targets[:, None])
    return 1 + ahead.sum(axis=1) + tied_before.sum(axis=1)


def _check(ranks) -> np.ndarray:
    ranks = np.asarray(ranks, dtype=float)
    if ranks.size == 0:
        raise UndefinedMetricError("metric undefined on an empty rank list")
    return ranks


def hr_at_k(ranks, k: int) -> float:
    ranks = _check(ranks)
    return float(np.count_nonzero(ranks <= k) / ranks.size)


def mrr_at_k(ranks, k: int) -> float:
    ranks = _check(ranks)
    rr = np.where(ranks <= k, 1.0 / ranks, 0.0)
    return float(rr.sum(dtype=np.float64) / ranks.size)


@dataclass
class MetricsReport:
    ks: tuple[int, ...]
    hr: dict[int, float]
    mrr: dict[int, float]
    n: int
    n_hit: dict[int, int]
    ranks: list[int] = field(default_factory=list)

    @classmethod
    def from_ranks(cls, ranks, ks=DEFAULT_KS) -> "MetricsReport":
        ranks = [int(r) for r in ranks]
        ks = tuple(sorted(ks))
        return cls(
            ks,
            {k: hr_at_k(ranks, k) for k in ks},
            {k: mrr_at_k(ranks, k) for k in ks},
            len(ranks),
            {k: sum(1 for r in ranks if r <= k) for k in ks},
            ranks,
        )

    def summary(self) -> dict:
        out = {"n": self.n}
        for k in self.ks:
            out[f"HR@{k}"] = self.hr[k]
            out[f"MRR@{k}"] = self.mrr[k]
        return out

    def line(self) -> str:
        return " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in self.summary().items())


def evaluate(scorer: Callable, samples: Sequence[TrainingSample], ks=DEFAULT_KS, batch_size: int | None = None) -> MetricsReport:
    """Rank every sample's label under ``scorer`` and derive HR/MRR per K.

    ``scorer`` maps one sample to a score vector, or, when ``batch_size`` is
    given, a list of samples to a (B, n_items) matrix.
    """
    if not samples:
        raise UndefinedMetricError("no test samples to evaluate")
    ranks = []
    if batch_size:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            try:
                scores = np.asarray(scorer(chunk))
            except Exception as exc:
                ids = ",".join(s.session_id for s in chunk[:3])
                raise EvaluationError(f"scorer failed on batch starting at sample {start} ({ids}...): {exc}") from exc
            ranks.extend(rank_targets(scores, [s.label_item for s in chunk]).tolist())
    else:
        for i, s in enumerate(samples):
            try:
                scores = scorer(s)
            except Exception as exc:
                raise EvaluationError(f"scorer failed on sample {i} (session {s.session_id}): {exc}") from exc
            ranks.append(rank_target(scores, s.label_item))
    return MetricsReport.from_ranks(ranks, ks)


def model_scorer(model) -> Callable:
    """Batched scorer wrapping :meth:`HICG.predict`."""
    return model.predict


def report_json(blocks: dict[str, MetricsReport], run_id: str = "", config: dict | None = None) -> str:
    payload = {
        "run_id": run_id,
        "version": __version__,
        "config": config or {},
        "results": {
            name: {
                "n": rep.n,
                "metrics": {str(k): {"HR": rep.hr[k], "MRR": rep.mrr[k], "n_hit": rep.n_hit[k]} for k in rep.ks},
            }
            for name, rep in blocks.items()
        },
    }
    return json.dumps(payload, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# Baselines


def ranking_to_scores(ranking: Sequence[int], n_items: int) -> np.ndarray:
    """Strictly decreasing probabilities that reproduce ``ranking``."""
    scores = np.empty(n_items)
    scores[np.asarray(ranking, dtype=np.int64)] = np.arange(n_items, 0, -1, dtype=float)
    return scores / scores.sum()


class SPop:
    """Most popular items of the current session, backed by global
    popularity."""

    def __init__(self, train_sessions: Sequence[Session], n_items: int):
        self.n_items = n_items
        pop = Counter(b.item for s in train_sessions for b in s.behaviors)
        self.popularity = np.array([pop.get(i, 0) for i in range(n_items)])
        self._global = sorted(range(n_items), key=lambda i: (-self.popularity[i], i))

    def rank(self, prefix) -> list[int]:
        freq = Counter(b.item for b in prefix)
        last = {b.item: t for t, b in enumerate(prefix)}
        in_session = sorted(freq, key=lambda i: (-freq[i], -last[i], -self.popularity[i], i))
        return in_session + [i for i in self._global if i not in freq]

    def __call__(self, sample: TrainingSample) -> np.ndarray:
        return ranking_to_scores(self.rank(sample.prefix), self.n_items)


class IKNN:
    """Session-neighbourhood recommender: similarity is the number of shared
    items, candidates score the summed similarity of neighbours holding
    them."""

    def __init__(self, train_sessions: Sequence[Session], n_items: int, k_neighbors: int = 500):
        self.n_items = n_items
        self.k = k_neighbors
        self.session_items = [frozenset(s.items) for s in train_sessions]
        self.session_start = [s.start for s in train_sessions]
        self.index: dict[int, list[int]] = defaultdict(list)
        for sid, items in enumerate(self.session_items):
            for i in items:
                self.index[i].append(sid)

    def neighbors(self, prefix) -> list[tuple[int, int]]:
        items = {b.item for b in prefix}
        overlap: Counter = Counter()
        for i in items:
            for sid in self.index.get(i, ()):
                overlap[sid] += 1
        best = sorted(overlap.items(), key=lambda kv: (-kv[1], -self.session_start[kv[0]], kv[0]))
        return best[: self.k]

    def scores(self, prefix) -> np.ndarray:
        seen = {b.item for b in prefix}
        score = np.zeros(self.n_items)
        for sid, sim in self.neighbors(prefix):
            for i in self.session_items[sid]:
                if i not in seen:
                    score[i] += sim
        if seen:
            score[list(seen)] = -1.0
        return score

    def rank(self, prefix) -> list[int]:
        score = self.scores(prefix)
        return sorted(range(self.n_items), key=lambda i: (-score[i], i))

    def __call__(self, sample: TrainingSample) -> np.ndarray:
        return ranking_to_scores(self.rank(sample.prefix), self.n_items)
