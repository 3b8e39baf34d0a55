"""Shared oracles for the training and acceptance tests."""

import math

import numpy as np
import torch

from rtkge.evaluation import rank_of_truth
from rtkge.model import ModelConfig, TemporalKGE, build_context_index
from rtkge.synthetic import random_kg
from rtkge.training import NegativeSampler, TrainConfig, objective

DIMS = {"rotate": (8, 0, 0), "de": (8, 8, 0), "rt": (8, 8, 8)}


def gradient_check(kind: str, seed: int = 0, h: float = 1e-4, n_pos: int = 8) -> dict[str, float]:
    """Relative error ``|g - g_fd| / max(|g|, |g_fd|)`` (2-norms) of every table.

    Random KG with |V|=20, |R|=4, |T|=30; all tables (W_P included) get random
    values so that every term carries gradient.  Adversarial weights are held
    fixed and dropout is off so the objective is a deterministic function.
    """
    kg = random_kg(n_entities=20, n_relations=4, n_timestamps=30, n_quads=120, seed=seed)
    d_s, d_t, d_r = DIMS[kind]
    model = TemporalKGE(ModelConfig(20, 4, kind=kind, d_s=d_s, d_t=d_t, d_r=d_r, dtype="float64"), seed=seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1)
    config = TrainConfig(dropout=0.0, l3=5e-4, margin=2.0)
    index = build_context_index(kg.quads, 4) if model.config.has_relative else None
    sampler = NegativeSampler(kg.entity_types, kg.quads, 4, kg.tmin, kg.tmax, 4, 4)
    rng = np.random.default_rng(seed)
    batch = sampler.sample(kg.quads[rng.choice(len(kg), n_pos, replace=False)], rng)
    _, weights = objective(model, batch, config, index, dropout=0.0, reg="full")

    def f() -> float:
        return objective(model, batch, config, index, weights=weights, dropout=0.0, reg="full")[0].item()

    model.zero_grad()
    objective(model, batch, config, index, weights=weights, dropout=0.0, reg="full")[0].backward()
    errors = {}
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.reshape(-1)
        for i in range(flat.numel()):
            keep = flat[i].item()
            flat[i] = keep + h
            up = f()
            flat[i] = keep - h
            down = f()
            flat[i] = keep
            numeric[i] = (up - down) / (2 * h)
        scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        errors[name] = (analytic - numeric).norm().item() / scale
    return errors


def brute_force_rank(scores: dict[int, float], truth: int, pushed: set[int]) -> int:
    """Sort (pushed, score, is_truth) ascending and read off the truth's position."""
    order = sorted(scores, key=lambda c: (c in pushed and c != truth, scores[c], c == truth))
    return order.index(truth) + 1


def oracle_ranks(model, entity_types, history, eval_quads, rerank="push", kind="link"):
    """Score every candidate one at a time and rank by sorting, pessimistic ties."""
    history = np.asarray(history).reshape(-1, 4)
    index = build_context_index(history, model.config.n_relations) if model.config.has_relative else None
    t_q = int(history[:, 3].max())
    facts = {tuple(map(int, q)) for q in history}
    types = [str(t) for t in entity_types]
    days = range(int(eval_quads[:, 3].min()), int(eval_quads[:, 3].max()) + 1)
    ranks = []
    for s, r, o, t in np.asarray(eval_quads).tolist():
        if kind == "time":
            cands, truth = list(days), t
            completions = {c: (s, r, o, c) for c in cands}
        else:
            cands = [e for e in range(len(types)) if types[e] == types[o]]
            truth = o
            completions = {c: (s, r, c, t) for c in cands}
        scores = {}
        for c, q in completions.items():
            qs = [np.array([x]) for x in q]
            with torch.no_grad():
                scores[c] = float(model.score_quads(*qs, np.array([t_q]), index)[0])
        pushed = set()
        if kind == "link" and rerank == "push":
            pushed = {int(b) for a, _, b, _ in history if a == s} | {int(a) for a, _, b, _ in history if b == s}
        elif kind == "link" and rerank == "filter":
            pushed = {c for c, q in completions.items() if q in facts}
            scores = {c: v for c, v in scores.items() if c == truth or c not in pushed}
            pushed = set()
        ranks.append(brute_force_rank(scores, truth, pushed))
    return ranks


def metrics_oracle(ranks) -> dict[str, float]:
    ranks = [int(r) for r in ranks]
    n = len(ranks)
    out = {f"HITS@{k}": sum(r <= k for r in ranks) / n for k in (1, 3, 10)}
    out["MR"] = sum(ranks) / n
    out["MRR"] = math.fsum(1 / r for r in ranks) / n
    return out


__all__ = ["gradient_check", "brute_force_rank", "metrics_oracle", "oracle_ranks", "rank_of_truth"]
