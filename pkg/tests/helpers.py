"""Shared test utilities that need the package (unlike ``oracles``)."""

import numpy as np
import torch

from hicg.data import Behavior, TrainingSample
from hicg.graph import build_union_graph, connected_components, sample_cl_pairs
from hicg.model import collate
from hicg.training import l2_penalty, loss_cl, loss_total, rec_loss


def random_samples(rng, n, n_items, n_types, max_len=8):
    out = []
    for _ in range(n):
        length = int(rng.integers(1, max_len + 1))
        prefix = tuple(Behavior(int(rng.integers(n_items)), int(rng.integers(n_types)), t) for t in range(length))
        out.append(TrainingSample(prefix, int(rng.integers(n_items)), int(rng.integers(n_types))))
    return out


def frozen_objective(model, samples, lambda_cl, beta, tau, l2, seed=0):
    """Objective closure with the contrastive pairs sampled once, so finite
    differences see a deterministic function of the parameters."""
    batch = collate([model.graph_for(s.prefix) for s in samples], model.embedding.dtype)
    labels = torch.tensor([s.label_item for s in samples])
    pairs = sample_cl_pairs(connected_components(build_union_graph(s.prefix for s in samples)),
                            beta, np.random.default_rng(seed))

    def objective():
        value = loss_total(rec_loss(model(batch), labels), loss_cl(pairs, model.embedding, tau), lambda_cl)
        return value + l2 * l2_penalty(model)

    return objective, pairs


def finite_difference_errors(model, objective, step=1e-3):
    """Relative error between autograd and central differences, per parameter."""
    model.zero_grad()
    objective().backward()
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone().reshape(-1)
            numeric = torch.zeros_like(analytic)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = objective().item()
                flat[i] = orig - step
                down = objective().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * step)
            scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
            errors[name] = (analytic - numeric).norm().item() / scale
    return errors
