"""Losses, the multi-task mini-batch trainer and checkpoint I/O."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import ConfigError, DataError, NumericError
from .data import TrainingSample
from .evaluation import MetricsReport, evaluate
from .graph import CLBatch, build_union_graph, connected_components, sample_cl_pairs
from .model import HICG, collate

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
NORM_EPS = 1e-12
CHECKPOINT_FORMAT = "hicg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class HyperParams:
    dim: int = 100
    dropout: float = 0.2
    batch_size: int = 100
    learning_rate: float = 3e-4
    l2: float = 1e-5
    lambda_cl: float = 0.1
    beta: float = 0.2
    temperature: float = 0.2
    steps: int = 1
    epochs: int = 30
    seed: int = 0
    clip_norm: float = 5.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        positive = ("dim", "batch_size", "learning_rate", "temperature", "steps", "epochs", "clip_norm", "adam_eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.l2 < 0 or self.lambda_cl < 0:
            raise ConfigError("l2 and lambda_cl must be non-negative")
        if not 0 < self.beta <= 1:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")


@dataclass
class LossBreakdown:
    l_rec: float
    l_cl: float
    l_total: float


@dataclass
class EpochStats:
    epoch: int
    l_rec: float
    l_cl: float
    l_total: float
    secs: float
    steps: int
    batches: list[LossBreakdown] = field(default_factory=list, repr=False)

    def line(self) -> str:
        return (f"epoch={self.epoch} l_rec={self.l_rec:.6f} l_cl={self.l_cl:.6f} "
                f"l_total={self.l_total:.6f} secs={self.secs:.3f}")


# --------------------------------------------------------------------------
# Losses


def loss_rec(probs, label: int) -> float:
    """Cross-entropy of a single score vector."""
    return -math.log(max(float(probs[label]), PROB_FLOOR))


def rec_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean clamped next-item cross-entropy over a batch of logits."""
    logp = torch.log_softmax(logits, dim=-1).gather(1, labels[:, None]).squeeze(1)
    return -(logp.clamp(min=math.log(PROB_FLOOR))).mean()


def loss_cl(batch: CLBatch, embeddings: torch.Tensor, temperature: float) -> torch.Tensor:
    """Contrastive loss over sampled pairs, summed over components.

    Each entry contributes ``-log softmax`` of its positive among the
    positive plus the component's negatives (cosine similarity over
    ``temperature``), scaled by ``1 / |component|``.
    """
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    if len(batch) == 0:
        return embeddings.sum() * 0.0
    entries = batch.entries
    m = len(entries)
    k = max(len(e.negatives) for e in entries)
    # column 0 is the positive, the rest are (padded) negatives
    cand = np.zeros((m, 1 + k), dtype=np.int64)
    mask = np.zeros((m, 1 + k), dtype=bool)
    for row, e in enumerate(entries):
        cand[row, 0] = e.positive
        cand[row, 1:1 + len(e.negatives)] = e.negatives
        mask[row, :1 + len(e.negatives)] = True
    anchors = torch.tensor([e.anchor for e in entries])
    sizes = torch.tensor([e.component_size for e in entries], dtype=embeddings.dtype)
    cand_t = torch.from_numpy(cand)
    mask_t = torch.from_numpy(mask)

    ex = embeddings[anchors]
    ec = embeddings[cand_t]
    dots = torch.einsum("md,mkd->mk", ex, ec)
    norms = (ex.norm(dim=-1, keepdim=True) + NORM_EPS) * (ec.norm(dim=-1) + NORM_EPS)
    logits = (dots / norms / temperature).masked_fill(~mask_t, float("-inf"))
    per_pair = torch.logsumexp(logits, dim=1) - logits[:, 0]
    return (per_pair / sizes).sum()


def loss_total(l_rec, l_cl, lambda_cl: float):
    return l_rec + lambda_cl * l_cl


def l2_penalty(model: torch.nn.Module) -> torch.Tensor:
    return sum((p * p).sum() for p in model.parameters())


# --------------------------------------------------------------------------
# Trainer


class Trainer:
    """Owns the model's parameters and the optimiser; the single writer.

    Graphs for every sample are built once and cached by sample position.
    Shuffling and contrastive sampling draw from separate generators spawned
    from ``hp.seed`` so switching the contrastive task on or off leaves the
    batch order unchanged.
    """

    def __init__(self, model: HICG, hp: HyperParams):
        self.model = model
        self.hp = hp
        torch.manual_seed(hp.seed)
        shuffle_seq, cl_seq = np.random.SeedSequence(hp.seed).spawn(2)
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.cl_rng = np.random.default_rng(cl_seq)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=hp.learning_rate,
                                          betas=hp.adam_betas, eps=hp.adam_eps)
        self.union_graphs_built = 0
        self.steps_taken = 0
        self.epoch = 0
        self._graph_cache: dict[int, object] = {}

    def _graphs(self, samples, idx):
        cache = self._graph_cache
        out = []
        for i in idx:
            g = cache.get(i)
            if g is None:
                g = cache[i] = self.model.graph_for(samples[i].prefix)
            out.append(g)
        return out

    def batch_losses(self, samples: Sequence[TrainingSample], idx=None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(l_rec, l_cl, objective) for one batch, objective including L2."""
        idx = list(range(len(samples))) if idx is None else list(idx)
        dtype = self.model.embedding.dtype
        batch = collate(self._graphs(samples, idx), dtype)
        labels = torch.tensor([samples[i].label_item for i in idx])
        l_rec = rec_loss(self.model(batch), labels)
        if self.hp.lambda_cl > 0:
            self.union_graphs_built += 1
            union = build_union_graph(samples[i].prefix for i in idx)
            pairs = sample_cl_pairs(connected_components(union), self.hp.beta, self.cl_rng)
            l_cl = loss_cl(pairs, self.model.embedding, self.hp.temperature)
        else:
            l_cl = torch.zeros((), dtype=dtype)
        objective = loss_total(l_rec, l_cl, self.hp.lambda_cl)
        if self.hp.l2 > 0:
            objective = objective + self.hp.l2 * l2_penalty(self.model)
        return l_rec, l_cl, objective

    def train_epoch(self, samples: Sequence[TrainingSample]) -> EpochStats:
        if not samples:
            raise DataError("no training samples")
        if samples is not getattr(self, "_cached_for", None):
            self._graph_cache = {}
            self._cached_for = samples
        self.model.train()
        self.epoch += 1
        start = time.perf_counter()
        order = self.shuffle_rng.permutation(len(samples))
        bs = self.hp.batch_size
        history = []
        for b, lo in enumerate(range(0, len(order), bs)):
            idx = order[lo:lo + bs]
            l_rec, l_cl, objective = self.batch_losses(samples, idx)
            if not torch.isfinite(objective):
                raise NumericError(
                    f"non-finite loss in epoch {self.epoch} batch {b}: "
                    f"l_rec={l_rec.item()} l_cl={l_cl.item()}")
            self.optimizer.zero_grad()
            objective.backward()
            if self.hp.clip_norm:
                torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.hp.clip_norm)
            self.optimizer.step()
            self.steps_taken += 1
            lr, lc = l_rec.item(), l_cl.item()
            history.append(LossBreakdown(lr, lc, float(loss_total(lr, lc, self.hp.lambda_cl))))
        n = len(history)
        stats = EpochStats(
            self.epoch,
            sum(h.l_rec for h in history) / n,
            sum(h.l_cl for h in history) / n,
            sum(h.l_total for h in history) / n,
            time.perf_counter() - start,
            n,
            history,
        )
        log.info(stats.line())
        return stats

    def validate(self, samples, ks=(5, 20), batch_size: int = 500) -> MetricsReport:
        return evaluate(self.model.predict, samples, ks, batch_size=batch_size)

    def fit(self, train: Sequence[TrainingSample], valid: Sequence[TrainingSample] | None = None,
            epochs: int | None = None, select_k: int = 20, patience: int | None = None, callback=None):
        """Train for ``epochs``; with ``valid``, keep the parameters with the
        best validation HR@``select_k``.  Returns the per-epoch history
        (stats, validation report) and restores the best parameters."""
        epochs = epochs or self.hp.epochs
        history = []
        best, best_state, since_best = -1.0, None, 0
        for _ in range(epochs):
            stats = self.train_epoch(train)
            report = self.validate(valid, ks=tuple(sorted({5, select_k}))) if valid else None
            history.append((stats, report))
            if callback:
                callback(stats, report)
            if report is not None:
                if report.hr[select_k] > best:
                    best, best_state, since_best = report.hr[select_k], copy.deepcopy(self.model.state_dict()), 0
                else:
                    since_best += 1
                if patience and since_best >= patience:
                    break
        if best_state is not None:
            self.model.load_state_dict(best_state)
        return history


# --------------------------------------------------------------------------
# Checkpoints


class CheckpointError(DataError):
    pass


def hp_to_dict(hp: HyperParams) -> dict:
    d = asdict(hp)
    d["adam_betas"] = list(hp.adam_betas)
    return d


def save_checkpoint(model: HICG, hp: HyperParams, path, vocab_checksum: str = "", extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.config(),
        "hparams": hp_to_dict(hp),
        "vocab_checksum": vocab_checksum,
        "extra": extra or {},
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, hp: HyperParams | None = None, vocab_checksum: str | None = None):
    """Load ``(model, hparams, payload)``.

    Raises :class:`CheckpointError` on unreadable files, format/version
    mismatch, a vocabulary checksum mismatch, or a tensor whose shape
    disagrees with ``hp`` (when given).
    """
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot parse checkpoint {path}: {exc.__class__.__name__}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint (key 'format')")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION} (key 'version')")
    if vocab_checksum is not None and payload.get("vocab_checksum") != vocab_checksum:
        raise CheckpointError("vocabulary checksum mismatch (key 'vocab_checksum')")
    names = {f.name for f in fields(HyperParams)}
    stored_hp = HyperParams(**{k: v for k, v in payload["hparams"].items() if k in names})
    cfg = dict(payload["model"])
    if hp is not None:
        cfg.update(dim=hp.dim, steps=hp.steps, dropout=hp.dropout)
    model = HICG(**cfg)
    state = payload["state"]
    own = model.state_dict()
    for key, tensor in own.items():
        if key not in state:
            raise CheckpointError(f"missing tensor (key {key!r})")
        if tuple(state[key].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for key {key!r}: checkpoint {tuple(state[key].shape)} vs expected {tuple(tensor.shape)}")
    extra_keys = set(state) - set(own)
    if extra_keys:
        raise CheckpointError(f"unexpected tensor (key {sorted(extra_keys)[0]!r})")
    model = model.to(next(iter(state.values())).dtype)
    model.load_state_dict(state)
    return model, hp or stored_hp, payload
