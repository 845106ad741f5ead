"""Synthetic clickstreams whose next item is a fixed function of the last
item and the last behavior type."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import ConfigError
from .data import CANONICAL_HEADER, MINUTE_MS, DAY_MS

BEHAVIOR_LABELS = ("view", "cart", "buy", "fav", "share")


@dataclass
class SyntheticSpec:
    n_items: int = 50
    n_behavior_types: int = 2
    n_sessions: int = 2000
    min_len: int = 4
    max_len: int = 10
    noise: float = 0.0
    n_clusters: int = 1
    type_probs: tuple[float, ...] | None = None
    span_days: int = 30
    start_ms: int = 1_600_000_000_000
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_behavior_types <= len(BEHAVIOR_LABELS):
            raise ConfigError(f"n_behavior_types must be in [1, {len(BEHAVIOR_LABELS)}]")
        if self.n_clusters < 1 or self.n_items % self.n_clusters:
            raise ConfigError("n_items must be a positive multiple of n_clusters")
        if self.n_items // self.n_clusters < 2 and self.n_behavior_types > 1:
            raise ConfigError("clusters need at least 2 items for type-dependent transitions")
        if not 2 <= self.min_len <= self.max_len:
            raise ConfigError("need 2 <= min_len <= max_len")
        if not 0 <= self.noise <= 1:
            raise ConfigError("noise must be in [0, 1]")
        if self.type_probs is None:
            first = 0.6 if self.n_behavior_types > 1 else 1.0
            rest = (1 - first) / max(self.n_behavior_types - 1, 1)
            self.type_probs = (first,) + (rest,) * (self.n_behavior_types - 1)
        self.type_probs = tuple(float(p) for p in self.type_probs)
        if len(self.type_probs) != self.n_behavior_types or abs(sum(self.type_probs) - 1) > 1e-9:
            raise ConfigError("type_probs must have one entry per type and sum to 1")

    @property
    def labels(self) -> tuple[str, ...]:
        return BEHAVIOR_LABELS[: self.n_behavior_types]

    def cluster_of(self, item: int) -> int:
        return item // (self.n_items // self.n_clusters)


def transition_table(spec: SyntheticSpec) -> np.ndarray:
    """``table[t, i]`` is the item following item ``i`` under a type-``t``
    behavior.  Each row permutes items within their cluster, and rows differ
    at every item."""
    rng = np.random.default_rng([spec.seed, 1])
    size = spec.n_items // spec.n_clusters
    table = np.empty((spec.n_behavior_types, spec.n_items), dtype=np.int64)
    for c in range(spec.n_clusters):
        members = np.arange(c * size, (c + 1) * size)
        while True:
            perms = np.stack([rng.permutation(members) for _ in range(spec.n_behavior_types)])
            # every pair of rows must disagree at every position
            if all((perms[a] != perms[b]).all()
                   for a in range(len(perms)) for b in range(a + 1, len(perms))):
                break
        table[:, members] = perms
    return table


def generate_sessions(spec: SyntheticSpec):
    """List of sessions, each a list of (item, type, timestamp_ms)."""
    table = transition_table(spec)
    rng = np.random.default_rng([spec.seed, 2])
    size = spec.n_items // spec.n_clusters
    sessions = []
    for _ in range(spec.n_sessions):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        ts = spec.start_ms + int(rng.integers(0, spec.span_days * DAY_MS))
        item = int(rng.integers(spec.n_items))
        btype = int(rng.choice(spec.n_behavior_types, p=spec.type_probs))
        rows = [(item, btype, ts)]
        for _ in range(length - 1):
            if spec.noise and rng.random() < spec.noise:
                c = spec.cluster_of(item)
                item = int(c * size + rng.integers(size))
            else:
                item = int(table[btype, item])
            btype = int(rng.choice(spec.n_behavior_types, p=spec.type_probs))
            ts += int(rng.integers(10_000, 5 * MINUTE_MS))
            rows.append((item, btype, ts))
        sessions.append(rows)
    return sessions


def item_token(i: int) -> str:
    return f"item{i}"


def generate_synthetic(spec: SyntheticSpec) -> bytes:
    """Canonical CSV bytes (header ``session_id,timestamp,item_id,behavior``)."""
    out = io.StringIO(newline="")
    out.write(",".join(CANONICAL_HEADER) + "\n")
    labels = spec.labels
    for k, rows in enumerate(generate_sessions(spec)):
        for item, btype, ts in rows:
            out.write(f"s{k},{ts},{item_token(item)},{labels[btype]}\n")
    return out.getvalue().encode("utf-8")


def follows_rule(rows, table: np.ndarray) -> bool:
    """Whether every transition in ``rows`` obeys ``table``."""
    return all(table[t0, i0] == i1 for (i0, t0, _), (i1, _, _) in zip(rows, rows[1:]))
