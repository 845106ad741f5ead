import math

import numpy as np
import pytest
import torch

from hicg import ConfigError, NumericError
from hicg.graph import CLBatch, CLEntry, ComponentPartition, sample_cl_pairs
from hicg.model import HICG
from hicg.training import (
    CheckpointError,
    HyperParams,
    Trainer,
    load_checkpoint,
    loss_cl,
    loss_rec,
    loss_total,
    save_checkpoint,
)

from helpers import finite_difference_errors, frozen_objective, random_samples
from oracles import scalar_infonce


def hp(**kw):
    base = dict(dim=8, dropout=0.0, batch_size=100, epochs=1, seed=0)
    base.update(kw)
    return HyperParams(**base)


# -- recommendation loss ------------------------------------------------------


def test_loss_rec_examples():
    assert loss_rec([0.25, 0.25, 0.25, 0.25], 2) == pytest.approx(math.log(4))
    assert loss_rec([0, 1, 0], 1) == 0
    assert loss_rec([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))


# -- contrastive loss ---------------------------------------------------------


def entry(x, y, negs, comp=0, size=2):
    return CLEntry(x, y, tuple(negs), comp, size)


def test_loss_cl_empty_is_zero():
    e = torch.randn(4, 3)
    assert float(loss_cl(CLBatch([]), e, 0.2)) == 0.0


def test_loss_cl_degenerate_equal_similarity():
    # positive and negative equally similar: log 2 per pair, halved by |P|
    e = torch.tensor([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    v = loss_cl(CLBatch([entry(0, 1, [2])]), e, 0.2)
    assert float(v) == pytest.approx(math.log(2) / 2)


def test_loss_cl_orthogonal_negative_value():
    # cos(x, y) = 1, cos(x, n) = 0, tau = 1:  -log(e / (e + 1)) = log(1 + e^-1)
    e = torch.tensor([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0]], dtype=torch.float64)
    v = loss_cl(CLBatch([entry(0, 1, [2], size=1)]), e, 1.0)
    assert float(v) == pytest.approx(0.31326, abs=1e-5)


def test_loss_cl_monotone_in_temperature_when_positive_wins():
    e = torch.tensor([[1.0, 0.0], [1.0, 0.1], [0.0, 1.0]], dtype=torch.float64)
    b = CLBatch([entry(0, 1, [2])])
    vals = [float(loss_cl(b, e, t)) for t in (0.1, 0.2, 0.5, 1.0, 2.0)]
    assert vals == sorted(vals)


def test_loss_cl_rejects_bad_temperature():
    with pytest.raises(ConfigError):
        loss_cl(CLBatch([entry(0, 1, [2])]), torch.ones(3, 2), 0)


def _random_cl_case(rng):
    n = int(rng.integers(3, 16))
    labels = rng.integers(0, int(rng.integers(2, 5)), size=n)
    comps = {}
    for item, lab in enumerate(labels):
        comps.setdefault(int(lab), set()).add(item)
    part = ComponentPartition(sorted((frozenset(c) for c in comps.values()), key=min), frozenset(range(n)))
    return part, n


def test_loss_cl_matches_scalar_oracle(rng):
    checked = 0
    while checked < 200:
        part, n = _random_cl_case(rng)
        if any(len(c) > 5 for c in part.components):
            continue
        batch = sample_cl_pairs(part, float(rng.uniform(0.1, 1.0)), rng)
        if not len(batch):
            continue
        emb = rng.normal(size=(n, 4))
        for tau in (0.1, 0.2, 1.0):
            got = float(loss_cl(batch, torch.from_numpy(emb), tau))
            want = scalar_infonce([(e.anchor, e.positive, e.negatives, e.component, e.component_size)
                                   for e in batch], emb, tau)
            assert got == pytest.approx(want, abs=1e-6)
        checked += 1


# -- total objective ----------------------------------------------------------


def test_loss_total_examples_and_derivative():
    assert loss_total(2.0, 5.0, 0.0) == 2.0
    assert loss_total(2.0, 5.0, 0.1) == pytest.approx(2.5)
    lam = torch.tensor(0.3, requires_grad=True)
    loss_total(torch.tensor(1.5), torch.tensor(4.0), lam).backward()
    assert float(lam.grad) == pytest.approx(4.0)


def test_gradients_match_finite_differences(rng):
    model = HICG(12, 2, dim=8, steps=1, dropout=0.0).double()
    model.reset_parameters(torch.Generator().manual_seed(1))
    samples = random_samples(rng, 6, 12, 2, max_len=5)
    objective, pairs = frozen_objective(model, samples, lambda_cl=0.1, beta=0.5, tau=0.2, l2=1e-5)
    assert len(pairs) > 0
    errors = finite_difference_errors(model, objective, step=1e-3)
    assert max(errors.values()) <= 1e-3, errors


# -- trainer ------------------------------------------------------------------


def make_trainer(n_items=20, n_types=2, **kw):
    h = hp(**kw)
    torch.manual_seed(h.seed)
    model = HICG(n_items, n_types, dim=h.dim, steps=h.steps, dropout=h.dropout)
    return Trainer(model, h)


def test_steps_per_epoch_is_ceiling(rng):
    samples = random_samples(rng, 250, 20, 2)
    t = make_trainer()
    stats = t.train_epoch(samples)
    assert stats.steps == t.steps_taken == math.ceil(250 / 100)


def test_plain_and_contrastive_runs_share_first_batch(rng):
    # many items, short sessions: batches split into several components
    samples = random_samples(rng, 300, 400, 2, max_len=3)
    plain = make_trainer(400, lambda_cl=0.0).train_epoch(samples)
    cl = make_trainer(400, lambda_cl=0.1).train_epoch(samples)
    assert plain.batches[0].l_rec == cl.batches[0].l_rec
    assert plain.batches[0].l_cl == 0 and cl.batches[0].l_cl > 0
    assert plain.batches[1].l_rec != cl.batches[1].l_rec


def test_fixed_batch_loss_decreases(rng):
    samples = random_samples(rng, 50, 20, 2)
    t = make_trainer(learning_rate=1e-2, batch_size=50)
    t.shuffle_rng = np.random.default_rng(0)
    losses = [t.train_epoch(samples).l_rec for _ in range(5)]
    assert losses[-1] < losses[0]


def test_non_finite_loss_raises_with_batch(rng):
    samples = random_samples(rng, 30, 20, 2)
    t = make_trainer()
    with torch.no_grad():
        t.model.embedding[:] = float("nan")
    with pytest.raises(NumericError, match="batch 0"):
        t.train_epoch(samples)


def test_union_graph_skipped_without_contrastive_task(rng):
    samples = random_samples(rng, 120, 20, 2)
    t = make_trainer(lambda_cl=0.0)
    t.train_epoch(samples)
    assert t.union_graphs_built == 0
    t2 = make_trainer(lambda_cl=0.1)
    t2.train_epoch(samples)
    assert t2.union_graphs_built == 2


def test_same_seed_same_history(rng):
    samples = random_samples(rng, 150, 400, 2, max_len=3)
    runs = []
    for _ in range(2):
        t = make_trainer(400, lambda_cl=0.1, dropout=0.2, seed=7)
        runs.append([(b.l_rec, b.l_cl) for _ in range(2) for b in t.train_epoch(samples).batches])
    assert runs[0] == runs[1]
    assert any(lc > 0 for _, lc in runs[0])


def test_fit_restores_best_state(rng):
    samples = random_samples(rng, 100, 20, 2)
    t = make_trainer()
    seen = []
    history = t.fit(samples, samples[:30], epochs=3, callback=lambda s, r: seen.append(r.hr[20]))
    assert len(history) == 3 and len(seen) == 3
    assert t.validate(samples[:30]).hr[20] == pytest.approx(max(seen))


def test_hyperparams_validation():
    with pytest.raises(ConfigError):
        HyperParams(beta=0)
    with pytest.raises(ConfigError):
        HyperParams(dropout=1.0)
    with pytest.raises(ConfigError):
        HyperParams(temperature=0)


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    t = make_trainer()
    path = tmp_path / "m.pt"
    save_checkpoint(t.model, t.hp, path, vocab_checksum="abc")
    model, h, payload = load_checkpoint(path, vocab_checksum="abc")
    samples = random_samples(rng, 10, 20, 2)
    np.testing.assert_array_equal(model.predict(samples), t.model.predict(samples))
    assert h == t.hp and payload["vocab_checksum"] == "abc"


def test_checkpoint_shape_mismatch_names_key(tmp_path):
    t = make_trainer()
    path = tmp_path / "m.pt"
    save_checkpoint(t.model, t.hp, path)
    with pytest.raises(CheckpointError, match="embedding"):
        load_checkpoint(path, hp=hp(dim=16))


def test_checkpoint_truncated(tmp_path):
    t = make_trainer()
    path = tmp_path / "m.pt"
    save_checkpoint(t.model, t.hp, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_vocab_mismatch(tmp_path):
    t = make_trainer()
    path = tmp_path / "m.pt"
    save_checkpoint(t.model, t.hp, path, vocab_checksum="abc")
    with pytest.raises(CheckpointError, match="vocab"):
        load_checkpoint(path, vocab_checksum="xyz")
