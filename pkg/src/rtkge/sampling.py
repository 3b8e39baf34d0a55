"""Down-sampling of large temporal KGs: degree-driven snowball and repository popularity."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .kg import EntityType, TemporalKG, degrees


@dataclass
class SamplerConfig:
    N: int
    S: int = 1
    K: int = 1
    W1: float = 1.0
    W2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.N <= 0 or self.S < 1 or self.K < 1:
            raise ValueError(f"need N > 0, S >= 1, K >= 1; got {self}")
        if self.W1 <= 0 or self.W2 <= 0:
            raise ValueError("W1 and W2 must be positive")


class SamplingError(RuntimeError):
    pass


@dataclass
class SampleResult:
    nodes: frozenset[int]
    quads: np.ndarray
    # provenance: repository popularity table for temporal sampling, pop order for snowball
    table: list[tuple] = field(default_factory=list)


def induced_quads(kg: TemporalKG, nodes) -> np.ndarray:
    mask = np.zeros(kg.n_entities, dtype=bool)
    mask[list(nodes)] = True
    keep = mask[kg.quads[:, 0]] & mask[kg.quads[:, 2]]
    return kg.quads[keep]


def neighbor_lists(kg: TemporalKG) -> list[np.ndarray]:
    """Sorted distinct neighbours of every entity."""
    pairs = np.concatenate([kg.quads[:, [0, 2]], kg.quads[:, [2, 0]]])
    pairs = np.unique(pairs, axis=0)
    splits = np.searchsorted(pairs[:, 0], np.arange(kg.n_entities + 1))
    return [pairs[splits[i]:splits[i + 1], 1] for i in range(kg.n_entities)]


def snowball_sample(kg: TemporalKG, config: SamplerConfig) -> SampleResult:
    """Max-degree priority snowball.

    Seeds the queue with the ``K`` highest-degree nodes, then repeatedly pops the
    highest-degree node, keeps it and pushes ``S`` of its neighbours drawn without
    replacement.  Duplicates may sit in the queue; already-kept nodes are skipped
    when popped.  Degree ties pop the lower entity id first.
    """
    n = kg.n_entities
    if n == 0:
        raise SamplingError("cannot sample an empty graph")
    if config.N > n:
        raise SamplingError(f"sample size N={config.N} exceeds |V|={n}")
    if config.K > n:
        raise SamplingError(f"seed count K={config.K} exceeds |V|={n}")
    rng = np.random.default_rng(config.seed)
    deg = degrees(kg)
    nbrs = neighbor_lists(kg)
    order = sorted(range(n), key=lambda v: (-deg[v], v))
    queue = [(-int(deg[v]), v) for v in order[:config.K]]
    heapq.heapify(queue)
    chosen: list[int] = []
    kept: set[int] = set()
    while len(kept) < config.N:
        if not queue:
            raise SamplingError(f"queue exhausted after {len(kept)} nodes (N={config.N})")
        _, v = heapq.heappop(queue)
        if v in kept:
            continue
        kept.add(v)
        chosen.append(v)
        candidates = nbrs[v]
        take = min(config.S, len(candidates))
        if take:
            for u in rng.choice(candidates, size=take, replace=False):
                heapq.heappush(queue, (-int(deg[u]), int(u)))
    return SampleResult(frozenset(kept), induced_quads(kg, kept), [(v, int(deg[v])) for v in chosen])


def popularity(quads: np.ndarray, W1: float, W2: float) -> float:
    """``W1 * size + W2 * time span`` of a (non-empty) tuple set."""
    quads = np.asarray(quads).reshape(-1, 4)
    if not len(quads):
        raise ValueError("popularity of an empty subgraph is undefined")
    size = len(quads)
    span = int(quads[:, 3].max() - quads[:, 3].min() + 1)
    return W1 * size + W2 * span


_ARTIFACTS = (EntityType.ISSUE, EntityType.PULL_REQUEST)


def related_nodes(kg: TemporalKG, repo: int, nbrs: list[np.ndarray] | None = None) -> set[int]:
    """The repository, its direct neighbours, and neighbours of its issue/PR neighbours."""
    nbrs = nbrs if nbrs is not None else neighbor_lists(kg)
    related = {repo}
    for u in nbrs[repo]:
        u = int(u)
        related.add(u)
        if kg.entity_types[u] in _ARTIFACTS:
            related.update(int(w) for w in nbrs[u])
    return related


def temporal_sample(kg: TemporalKG, W1: float, W2: float, N: int) -> SampleResult:
    """Greedy union of repository subgraphs in decreasing popularity until ``N`` nodes."""
    repos = [i for i, et in enumerate(kg.entity_types) if et == EntityType.REPOSITORY]
    if not repos:
        raise SamplingError("graph has no Repository nodes")
    nbrs = neighbor_lists(kg)
    scored = []
    for repo in repos:
        nodes = related_nodes(kg, repo, nbrs)
        sub = induced_quads(kg, nodes)
        if not len(sub):
            continue
        scored.append((popularity(sub, W1, W2), kg.entities.label(repo), repo, nodes))
    scored.sort(key=lambda x: (-x[0], x[1]))
    kept: set[int] = set()
    table = []
    for score, label, repo, nodes in scored:
        chosen = len(kept) < N
        if chosen:
            kept |= nodes
        table.append((label, score, len(nodes), chosen))
    return SampleResult(frozenset(kept), induced_quads(kg, kept), table)
