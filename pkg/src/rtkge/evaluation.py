"""Ranking evaluation for time-conditioned link prediction and time prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .kg import EntityType
from .model import ContextIndex, TemporalKGE, build_context_index

RERANK_MODES = ("push", "filter", "none")
TIE_POLICIES = ("pessimistic", "optimistic", "random")
HITS_AT = (1, 3, 10)


@dataclass(frozen=True)
class Query:
    kind: str  # "link" | "time"
    s: int
    r: int
    o: int
    t: int
    slot: str = "o"  # the unknown: "s"/"o" for link queries, "t" for time queries

    def __post_init__(self):
        if self.kind == "link" and self.slot not in ("s", "o"):
            raise ValueError("link queries hide s or o")
        if self.kind == "time" and self.slot != "t":
            raise ValueError("time queries hide t")
        if self.kind not in ("link", "time"):
            raise ValueError(f"unknown query kind {self.kind!r}")

    @property
    def truth(self) -> int:
        return getattr(self, self.slot)

    @property
    def fixed_entity(self) -> int:
        return self.s if self.slot == "o" else self.o

    def completions(self, candidates: np.ndarray) -> tuple[np.ndarray, ...]:
        n = len(candidates)
        s, r, o, t = (np.full(n, x, dtype=np.int64) for x in (self.s, self.r, self.o, self.t))
        {"s": s, "o": o, "t": t}[self.slot][:] = candidates
        return s, r, o, t


def build_queries(quads: np.ndarray, kind: str = "link", relations: Iterable[int] | None = None,
                  slot: str | None = None) -> list[Query]:
    slot = slot or ("t" if kind == "time" else "o")
    quads = np.asarray(quads).reshape(-1, 4)
    if relations is not None:
        quads = quads[np.isin(quads[:, 1], list(relations))]
    return [Query(kind, int(s), int(r), int(o), int(t), slot) for s, r, o, t in quads]


def candidates_link(query: Query, entity_types: Sequence[EntityType]) -> np.ndarray:
    """Every entity sharing the truth's node type."""
    types = np.asarray([EntityType.parse(t).value for t in entity_types])
    return np.flatnonzero(types == types[query.truth])


def candidates_time(eval_quads: np.ndarray) -> np.ndarray:
    """All integer days between the evaluated split's first and last timestamp."""
    t = np.asarray(eval_quads).reshape(-1, 4)[:, 3]
    if not len(t):
        raise ValueError("empty evaluation split")
    return np.arange(t.min(), t.max() + 1)


def interaction_sets(history: np.ndarray) -> dict[int, set[int]]:
    partners: dict[int, set[int]] = {}
    for s, _, o, _ in np.asarray(history).reshape(-1, 4):
        partners.setdefault(int(s), set()).add(int(o))
        partners.setdefault(int(o), set()).add(int(s))
    return partners


def rerank_prior_interactions(query: Query, candidates: Sequence[int], distances: Sequence[float],
                              interactions: dict[int, set[int]]) -> list[int]:
    """Best-first candidate order with prior interactors of the fixed entity pushed last.

    The truth itself is never pushed.  Order within each group follows the
    distances (stable), and the truth sits after any competitor at equal distance.
    """
    partners = interactions.get(query.fixed_entity, set())
    truth = query.truth

    def key(i):
        c = int(candidates[i])
        pushed = c != truth and c in partners
        return (pushed, float(distances[i]), c == truth)

    return [int(candidates[i]) for i in sorted(range(len(candidates)), key=key)]


def rank_of_truth(candidates: np.ndarray, distances: np.ndarray, truth: int,
                  pushed: np.ndarray | None = None, removed: np.ndarray | None = None,
                  tie: str = "pessimistic", rng: np.random.Generator | None = None) -> int:
    """1-based rank of ``truth`` (lower distance is better).

    ``pushed`` marks candidates moved behind all others, ``removed`` marks
    candidates dropped entirely; neither may flag the truth.
    """
    candidates = np.asarray(candidates)
    distances = np.asarray(distances, dtype=np.float64)
    at = np.flatnonzero(candidates == truth)
    if not len(at):
        raise ValueError(f"truth {truth} is not among the candidates")
    d_truth = distances[at[0]]
    live = candidates != truth
    if removed is not None:
        live &= ~removed
    if pushed is None:
        pushed = np.zeros(len(candidates), dtype=bool)
    front = live & ~pushed
    better = int(np.sum(front & (distances < d_truth)))
    ties = int(np.sum(front & (distances == d_truth)))
    if tie == "pessimistic":
        return 1 + better + ties
    if tie == "optimistic":
        return 1 + better
    if tie == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return 1 + better + int(rng.integers(0, ties + 1))
    raise ValueError(f"unknown tie policy {tie!r}")


@dataclass
class RankingResult:
    ranks: np.ndarray
    hits: dict[int, float]
    mr: float
    mrr: float
    stderr: dict[str, float]
    queries: list[Query] | None = None

    @property
    def n(self) -> int:
        return len(self.ranks)

    def metrics(self) -> dict[str, float]:
        out = {f"HITS@{k}": v for k, v in self.hits.items()}
        out.update(MR=self.mr, MRR=self.mrr)
        return out

    def ci95(self) -> dict[str, float]:
        return {k: 1.96 * v for k, v in self.stderr.items()}


def _stderr(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


def aggregate(ranks: Sequence[int]) -> RankingResult:
    ranks = np.asarray(ranks, dtype=np.int64)
    if not len(ranks):
        raise ValueError("no ranks to aggregate")
    if ranks.min() < 1:
        raise ValueError("ranks are 1-based")
    n = len(ranks)
    hits = {k: int(np.sum(ranks <= k)) / n for k in HITS_AT}
    recip = 1.0 / ranks
    stderr = {f"HITS@{k}": _stderr((ranks <= k).astype(float)) for k in HITS_AT}
    stderr.update(MR=_stderr(ranks.astype(float)), MRR=_stderr(recip))
    # correctly rounded sums keep the means independent of summation order
    return RankingResult(ranks, hits, int(ranks.sum()) / n, math.fsum(recip.tolist()) / n, stderr)


def within_ci_of_best(results: dict[str, RankingResult], metric: str) -> set[str]:
    """Names whose ``metric`` lies within the best result's 95% interval."""
    lower_is_better = metric == "MR"
    values = {k: r.metrics()[metric] for k, r in results.items()}
    best = min(values, key=values.get) if lower_is_better else max(values, key=values.get)
    half = 1.96 * results[best].stderr[metric]
    return {k for k, v in values.items() if abs(v - values[best]) <= half}


# -- evaluator ---------------------------------------------------------------------------

@dataclass
class EvalOptions:
    kind: str = "link"
    slot: str | None = None
    relations: list[int] | None = None  # query relations; None = all
    rerank: str = "push"
    tie: str = "pessimistic"
    seed: int = 0

    def __post_init__(self):
        if self.rerank not in RERANK_MODES:
            raise ValueError(f"rerank must be one of {RERANK_MODES}")
        if self.tie not in TIE_POLICIES:
            raise ValueError(f"tie must be one of {TIE_POLICIES}")


@dataclass
class Evaluator:
    """Ranks queries against a frozen model.

    ``history`` is the data the model was trained on: it defines the context
    index, ``t_q`` (its latest timestamp) and the prior-interaction sets.
    """

    model: TemporalKGE
    entity_types: Sequence[EntityType]
    history: np.ndarray
    options: EvalOptions = field(default_factory=EvalOptions)
    known: np.ndarray | None = None  # extra true facts for the "filter" mode

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=np.int64).reshape(-1, 4)
        n_rel = self.model.config.n_relations
        self.index: ContextIndex | None = (build_context_index(self.history, n_rel)
                                           if self.model.config.has_relative else None)
        self.t_q = int(self.history[:, 3].max())
        self.interactions = interaction_sets(self.history)
        facts = self.history if self.known is None else np.concatenate([self.history, self.known])
        self._facts = {tuple(int(x) for x in row) for row in facts}
        types = np.asarray([EntityType.parse(t).value for t in self.entity_types])
        self._by_type = {v: np.flatnonzero(types == v) for v in np.unique(types)}
        self._types = types

    def candidates(self, query: Query, eval_quads: np.ndarray | None = None) -> np.ndarray:
        if query.kind == "link":
            return self._by_type[self._types[query.truth]]
        return candidates_time(eval_quads)

    @torch.no_grad()
    def distances(self, query: Query, candidates: np.ndarray) -> np.ndarray:
        s, r, o, t = query.completions(candidates)
        d = self.model.score_quads(s, r, o, t, np.full(len(candidates), self.t_q), self.index)
        return d.double().numpy()

    def rank(self, query: Query, candidates: np.ndarray, rng: np.random.Generator | None = None) -> int:
        dist = self.distances(query, candidates)
        pushed = removed = None
        if query.kind == "link" and self.options.rerank == "push":
            partners = self.interactions.get(query.fixed_entity, set())
            pushed = np.isin(candidates, np.fromiter(partners, np.int64, len(partners)))
            pushed &= candidates != query.truth
        elif query.kind == "link" and self.options.rerank == "filter":
            s, r, o, t = query.completions(candidates)
            removed = np.fromiter(((a, b, c, d) in self._facts for a, b, c, d in zip(s, r, o, t)),
                                  bool, len(candidates))
            removed &= candidates != query.truth
        return rank_of_truth(candidates, dist, query.truth, pushed, removed, self.options.tie, rng)

    def evaluate(self, eval_quads: np.ndarray, queries: list[Query] | None = None) -> RankingResult:
        eval_quads = np.asarray(eval_quads, dtype=np.int64).reshape(-1, 4)
        if queries is None:
            queries = build_queries(eval_quads, self.options.kind, self.options.relations, self.options.slot)
        if not queries:
            raise ValueError("no queries to evaluate")
        rng = np.random.default_rng(self.options.seed)
        time_cands = candidates_time(eval_quads) if any(q.kind == "time" for q in queries) else None
        ranks = []
        for q in queries:
            cands = time_cands if q.kind == "time" else self.candidates(q)
            ranks.append(self.rank(q, cands, rng))
        result = aggregate(ranks)
        result.queries = queries
        return result


def evaluate(model: TemporalKGE, entity_types: Sequence[EntityType], history: np.ndarray,
             eval_quads: np.ndarray, options: EvalOptions | None = None,
             known: np.ndarray | None = None) -> RankingResult:
    return Evaluator(model, entity_types, history, options or EvalOptions(), known).evaluate(eval_quads)


# -- output -----------------------------------------------------------------------------------

def format_query_tsv(result: RankingResult, queries: Sequence[Query], header: str) -> str:
    lines = [f"# {header}", "query_id\tkind\ts\tr\to\tt\tslot\trank"]
    for i, (q, rank) in enumerate(zip(queries, result.ranks)):
        lines.append(f"{i}\t{q.kind}\t{q.s}\t{q.r}\t{q.o}\t{q.t}\t{q.slot}\t{int(rank)}")
    return "\n".join(lines) + "\n"


def format_aggregate_tsv(result: RankingResult, header: str, name: str = "model") -> str:
    cols = [f"HITS@{k}" for k in HITS_AT] + ["MR", "MRR"]
    metrics, se, ci = result.metrics(), result.stderr, result.ci95()
    lines = [f"# {header}", "\t".join(["model", "stat", "n"] + cols)]
    for stat, values in (("value", metrics), ("stderr", se), ("ci95", ci)):
        lines.append("\t".join([name, stat, str(result.n)] + [f"{values[c]:.6f}" for c in cols]))
    return "\n".join(lines) + "\n"
