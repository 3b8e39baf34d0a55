"""Negative sampling, self-adversarial loss, L3 regularisation and the optimiser loop."""

from __future__ import annotations

import copy
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .kg import EntityType
from .model import ContextIndex, TemporalKGE, build_context_index

log = logging.getLogger(__name__)

REGULARISED = ("E", "E_A", "W_E", "W_P")
ROW_TABLES = ("E", "E_A", "E_F", "E_PHI")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named generator derived from one top-level seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


@dataclass
class TrainConfig:
    eta: float = 0.5
    margin: float = 6.0
    lr: float = 3e-5
    l3: float = 5e-4
    dropout: float = 0.4
    neg_time_agnostic: int = 256
    neg_time_dependent: int = 32
    batch_size: int = 64
    warmup_steps: int = 100_000
    warmup_decay: float = 0.1
    total_steps: int = 200_000
    validation_every: int = 10_000
    seed: int = 0
    retry_cap: int = 100
    select_best: bool = True
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.eta <= 0 or self.margin <= 0:
            raise ValueError("eta and margin must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if min(self.neg_time_agnostic, self.neg_time_dependent) < 0 or self.n_negatives == 0:
            raise ValueError("negative ratios must be non-negative with a positive total")
        if self.batch_size < 1 or self.validation_every < 1 or self.total_steps < 0:
            raise ValueError("batch_size and validation_every must be positive, total_steps >= 0")

    @property
    def n_negatives(self) -> int:
        return self.neg_time_agnostic + self.neg_time_dependent

    def lr_at(self, step: int) -> float:
        return self.lr * (self.warmup_decay if step >= self.warmup_steps else 1.0)


# -- negative sampling --------------------------------------------------------------

@dataclass
class Batch:
    """``negatives[i]`` holds the corruptions of ``positives[i]``; ``kinds`` is 0
    for entity-corrupted and 1 for time-corrupted columns."""

    positives: np.ndarray  # (B, 4)
    negatives: np.ndarray  # (B, N, 4)
    kinds: np.ndarray      # (N,)

    def __len__(self) -> int:
        return len(self.positives)


class NegativeSampler:
    def __init__(self, entity_types: Sequence[EntityType], known: np.ndarray, n_relations: int,
                 tmin: int, tmax: int, n_agnostic: int, n_dependent: int, retry_cap: int = 100):
        self.n_entities = len(entity_types)
        self.n_relations = n_relations
        self.tmin, self.tmax = int(tmin), int(tmax)
        self.n_agnostic, self.n_dependent = n_agnostic, n_dependent
        self.retry_cap = retry_cap
        if n_dependent and self.tmax <= self.tmin:
            raise ValueError("time-dependent negatives need at least two timestamps")
        # members of each type, and the position of every entity inside its type
        codes = np.array([list(EntityType).index(EntityType.parse(t)) for t in entity_types], dtype=np.int64)
        self._type = codes
        self._members = [np.flatnonzero(codes == k) for k in range(len(EntityType))]
        self._pos = np.zeros(self.n_entities, dtype=np.int64)
        for members in self._members:
            self._pos[members] = np.arange(len(members))
        self._sizes = np.array([len(m) for m in self._members], dtype=np.int64)
        self._flat = np.concatenate(self._members)
        self._offset = np.r_[0, np.cumsum(self._sizes)[:-1]]
        singletons = [list(EntityType)[k].value for k, m in enumerate(self._members) if len(m) == 1]
        if singletons:
            log.info("single-member entity types %s fall back to untyped corruption", singletons)
        self._known_keys = np.unique(self._keys(np.asarray(known, dtype=np.int64).reshape(-1, 4)))

    def _keys(self, quads: np.ndarray) -> np.ndarray:
        span = self.tmax - self.tmin + 3
        t = np.clip(quads[..., 3] - self.tmin + 1, 0, span - 1)
        return ((quads[..., 0] * self.n_relations + quads[..., 1]) * self.n_entities + quads[..., 2]) * span + t

    def _is_known(self, quads: np.ndarray) -> np.ndarray:
        keys = self._keys(quads)
        pos = np.searchsorted(self._known_keys, keys)
        pos = np.minimum(pos, max(len(self._known_keys) - 1, 0))
        return self._known_keys[pos] == keys if len(self._known_keys) else np.zeros(keys.shape, bool)

    def _other_entity(self, current: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        sizes = self._sizes[self._type[current]]
        typed = sizes >= 2
        out = np.empty_like(current)
        if typed.any():
            cur = current[typed]
            draw = rng.integers(0, sizes[typed] - 1)
            draw = draw + (draw >= self._pos[cur])
            out[typed] = self._flat[self._offset[self._type[cur]] + draw]
        if (~typed).any():
            cur = current[~typed]
            if self.n_entities < 2:
                raise ValueError("cannot corrupt entities of a one-entity graph")
            draw = rng.integers(0, self.n_entities - 1, size=len(cur))
            out[~typed] = draw + (draw >= cur)
        return out

    def _corrupt(self, pos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        B = len(pos)
        neg = np.repeat(pos[:, None, :], self.n_agnostic + self.n_dependent, axis=1)
        if self.n_agnostic:
            ent = neg[:, : self.n_agnostic]
            side = np.where(rng.random((B, self.n_agnostic)) < 0.5, 0, 2)
            flat_side = side.reshape(-1)
            rows = ent.reshape(-1, 4)
            current = rows[np.arange(len(rows)), flat_side]
            rows[np.arange(len(rows)), flat_side] = self._other_entity(current, rng)
            neg[:, : self.n_agnostic] = rows.reshape(B, self.n_agnostic, 4)
        if self.n_dependent:
            t_true = neg[:, self.n_agnostic:, 3]
            draw = rng.integers(0, self.tmax - self.tmin, size=t_true.shape) + self.tmin
            neg[:, self.n_agnostic:, 3] = draw + (draw >= t_true)
        return neg

    def sample(self, positives: np.ndarray, rng: np.random.Generator) -> Batch:
        positives = np.asarray(positives, dtype=np.int64).reshape(-1, 4)
        neg = self._corrupt(positives, rng)
        for _ in range(self.retry_cap):
            bad = self._is_known(neg)
            if not bad.any():
                break
            b, j = np.nonzero(bad)
            fresh = self._corrupt(positives[b], rng)
            neg[b, j] = fresh[np.arange(len(b)), j]
        kinds = np.r_[np.zeros(self.n_agnostic, np.int64), np.ones(self.n_dependent, np.int64)]
        return Batch(positives, neg, kinds)


def sample_negatives(sampler: NegativeSampler, positive: Sequence[int], rng: np.random.Generator) -> Batch:
    """Negatives for a single positive tuple."""
    return sampler.sample(np.asarray(positive).reshape(1, 4), rng)


# -- loss pieces ------------------------------------------------------------------------

def adversarial_weights(neg_scores, eta: float):
    """Softmax of ``eta * f`` over the last axis, with no gradient.

    ``f`` is a plausibility score (use ``-distance`` for translational models).
    numpy input gives numpy output.
    """
    if torch.is_tensor(neg_scores):
        return torch.softmax(eta * neg_scores.detach(), dim=-1)
    f = np.asarray(neg_scores, dtype=np.float64) * eta
    f = np.exp(f - f.max(axis=-1, keepdims=True))
    return f / f.sum(axis=-1, keepdims=True)


def loss(pos_distance, neg_distances, weights, margin: float):
    """``-log s(margin - d+) - sum_i w_i log s(d-_i - margin)`` per positive."""
    as_np = not torch.is_tensor(pos_distance)
    pos = torch.as_tensor(pos_distance, dtype=torch.float64) if as_np else pos_distance
    neg = torch.as_tensor(neg_distances, dtype=pos.dtype) if not torch.is_tensor(neg_distances) else neg_distances
    w = torch.as_tensor(weights, dtype=pos.dtype) if not torch.is_tensor(weights) else weights
    value = -F.logsigmoid(margin - pos)
    if neg.numel():
        value = value - (w * F.logsigmoid(neg - margin)).sum(-1)
    return float(value) if as_np and value.dim() == 0 else value


def l3_penalty(params: TemporalKGE, lam: float, rows: torch.Tensor | None = None) -> torch.Tensor:
    """``lam * sum |w|^3`` over E, E_A, W_E and W_P.

    With ``rows`` only those entity rows of E and E_A enter the sum.
    """
    tables = params.tables
    total = torch.zeros((), dtype=params.E.dtype)
    for name in REGULARISED:
        if name not in tables:
            continue
        w = tables[name]
        if rows is not None and name in ROW_TABLES:
            w = w[rows]
        total = total + w.abs().pow(3).sum()
    return lam * total


def batch_distances(model: TemporalKGE, batch: Batch, index: ContextIndex | None,
                    dropout: float = 0.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Distances of positives ``(B,)`` and negatives ``(B, N)``; t_q is each positive's t."""
    B, N = batch.negatives.shape[:2]
    quads = np.concatenate([batch.positives[:, None, :], batch.negatives], axis=1).reshape(-1, 4)
    t_q = np.repeat(batch.positives[:, 3], N + 1)
    d = model.score_quads(quads[:, 0], quads[:, 1], quads[:, 2], quads[:, 3], t_q, index, dropout=dropout)
    d = d.reshape(B, N + 1)
    return d[:, 0], d[:, 1:]


def objective(model: TemporalKGE, batch: Batch, config: TrainConfig, index: ContextIndex | None,
              weights: torch.Tensor | None = None, dropout: float | None = None,
              reg: str = "batch") -> tuple[torch.Tensor, torch.Tensor]:
    """Mean loss over the batch plus L3; returns ``(total, adversarial weights)``.

    ``reg="batch"`` regularises only the entity rows the batch touches;
    ``reg="full"`` uses whole tables.  Passing ``weights`` freezes the
    adversarial distribution (needed for finite-difference checks).
    """
    dropout = config.dropout if dropout is None else dropout
    pos, neg = batch_distances(model, batch, index, dropout)
    if weights is None:
        weights = adversarial_weights(-neg, config.eta)
    data = loss(pos, neg, weights, config.margin).mean()
    rows = None
    if reg == "batch":
        rows = torch.as_tensor(np.unique(np.concatenate([batch.positives[:, [0, 2]].ravel(),
                                                         batch.negatives[..., [0, 2]].ravel()])))
    return data + l3_penalty(model, config.l3, rows), weights


# -- optimiser -------------------------------------------------------------------------

class LazyAdam:
    """Adam whose per-entity tables only update the rows a batch touched.

    Moments of untouched rows are left as they are (no decay), as in the
    usual lazy/sparse Adam variants; bias correction uses the global step.
    """

    def __init__(self, params: dict[str, torch.nn.Parameter], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 row_tables: Sequence[str] = ROW_TABLES):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.row_tables = set(row_tables)
        self.step_count = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, rows: torch.Tensor | None = None, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1 - b1 ** self.step_count
        bc2 = 1 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            if rows is not None and name in self.row_tables:
                g = p.grad[rows]
                m[rows] = b1 * m[rows] + (1 - b1) * g
                v[rows] = b2 * v[rows] + (1 - b2) * g * g
                p[rows] -= lr * (m[rows] / bc1) / (torch.sqrt(v[rows] / bc2) + self.eps)
            else:
                g = p.grad
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                p -= lr * (m / bc1) / (torch.sqrt(v / bc2) + self.eps)

    def state(self) -> dict:
        return {"step": self.step_count}


def train_step(model: TemporalKGE, optimizer: LazyAdam, batch: Batch, config: TrainConfig,
               index: ContextIndex | None, step: int = 0) -> float:
    optimizer.zero_grad()
    total, _ = objective(model, batch, config, index)
    value = total.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at step {step}")
    total.backward()
    rows = torch.as_tensor(np.unique(np.concatenate([batch.positives[:, [0, 2]].ravel(),
                                                     batch.negatives[..., [0, 2]].ravel()])))
    optimizer.step(rows=rows, lr=config.lr_at(step))
    return value


# -- loop ---------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: TemporalKGE
    best_step: int | None
    best_mrr: float | None
    log: list[tuple[int, float, float | None]] = field(default_factory=list)
    final_model: TemporalKGE | None = None
    rng_state: dict | None = None  # negative-sampling generator state after the last step


def train_loop(model: TemporalKGE, train_quads: np.ndarray, entity_types: Sequence[EntityType],
               config: TrainConfig, validate=None, n_relations: int | None = None) -> TrainResult:
    """Run ``config.total_steps`` optimiser steps.

    ``validate(model) -> MRR`` is called every ``validation_every`` steps and at
    the end; with ``select_best`` the best-MRR snapshot is returned (earliest on
    ties).  The context index is built from ``train_quads`` only.
    """
    train_quads = np.asarray(train_quads, dtype=np.int64).reshape(-1, 4)
    if not len(train_quads):
        raise ValueError("empty training set")
    if config.select_best and validate is None and config.total_steps:
        raise ValueError("model selection needs a validation callback")
    n_relations = n_relations if n_relations is not None else model.config.n_relations
    index = build_context_index(train_quads, n_relations) if model.config.has_relative else None
    sampler = NegativeSampler(entity_types, train_quads, n_relations,
                              train_quads[:, 3].min(), train_quads[:, 3].max(),
                              config.neg_time_agnostic, config.neg_time_dependent, config.retry_cap)
    neg_rng = substream(config.seed, "negatives")
    batch_rng = substream(config.seed, "batches")
    torch.manual_seed(int(substream(config.seed, "dropout").integers(2 ** 31)))
    optimizer = LazyAdam(model.tables, config.lr, config.betas, config.eps)

    best_state, best_step, best_mrr = None, None, None
    history: list[tuple[int, float, float | None]] = []
    perm, cursor = batch_rng.permutation(len(train_quads)), 0
    for step in range(config.total_steps):
        if cursor + config.batch_size > len(perm):
            perm, cursor = batch_rng.permutation(len(train_quads)), 0
        take = perm[cursor: cursor + config.batch_size]
        cursor += config.batch_size
        batch = sampler.sample(train_quads[take], neg_rng)
        value = train_step(model, optimizer, batch, config, index, step)
        done = step + 1
        mrr = None
        if validate is not None and (done % config.validation_every == 0 or done == config.total_steps):
            mrr = float(validate(model))
            if best_mrr is None or mrr > best_mrr:
                best_mrr, best_step = mrr, done
                best_state = copy.deepcopy(model.state_arrays())
            log.info("step %d loss %.5f valid MRR %.4f", done, value, mrr)
        history.append((done, value, mrr))

    result = TrainResult(model, best_step, best_mrr, history, final_model=model,
                         rng_state=neg_rng.bit_generator.state)
    if config.select_best and best_state is not None:
        best = TemporalKGE(model.config, seed=None)
        best.load_arrays(best_state)
        result.model = best
    return result
