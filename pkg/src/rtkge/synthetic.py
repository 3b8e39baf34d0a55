"""Small generated datasets with known temporal structure."""

from __future__ import annotations

import numpy as np

from .kg import EntityType, TemporalKG, build_graph


def lag_dataset(n_issues: int = 300, n_users: int = 20, span: int = 60, lag: int = 7,
                seed: int = 0, n_closers: int | None = None) -> TemporalKG:
    """Issues opened on a random day and closed exactly ``lag`` days later.

    Each issue contributes ``(reporter, open, issue, t0)`` and
    ``(maintainer, close, issue, t0 + lag)``.  Reporters (``u*``) and
    maintainers (``m*``) are disjoint user pools; ``n_closers`` defaults to
    ``n_users // 4``.
    """
    if span <= lag:
        raise ValueError("span must exceed the lag")
    n_closers = n_closers or max(1, n_users // 4)
    rng = np.random.default_rng(seed)
    opens = rng.integers(0, span - lag, size=n_issues)
    openers = rng.integers(0, n_users, size=n_issues)
    closers = rng.integers(0, n_closers, size=n_issues)
    rows = []
    for i, (t0, a, b) in enumerate(zip(opens, openers, closers)):
        rows.append((f"u{a}", "open", f"i{i}", int(t0)))
        rows.append((f"m{b}", "close", f"i{i}", int(t0 + lag)))
    rows.sort(key=lambda x: x[3])
    types = {f"u{k}": EntityType.USER for k in range(n_users)}
    types.update({f"m{k}": EntityType.USER for k in range(n_closers)})
    types.update({f"i{k}": EntityType.ISSUE for k in range(n_issues)})
    return build_graph(rows, types, relations=("open", "close"))


def random_kg(n_entities: int = 20, n_relations: int = 4, n_timestamps: int = 30, n_quads: int = 200,
              n_types: int = 2, seed: int = 0) -> TemporalKG:
    """Uniformly random typed temporal KG.

    Every entity appears at least once when ``n_quads >= n_entities``.
    """
    rng = np.random.default_rng(seed)
    kinds = list(EntityType)[:n_types]
    labels = [f"e{i}" for i in range(n_entities)]
    types = {lab: kinds[i % n_types] for i, lab in enumerate(labels)}
    s = rng.integers(0, n_entities, size=n_quads)
    o = rng.integers(0, n_entities, size=n_quads)
    k = min(n_entities, n_quads)
    s[:k] = np.arange(k)
    r = rng.integers(0, n_relations, size=n_quads)
    t = rng.integers(0, n_timestamps, size=n_quads)
    t[0], t[-1] = 0, n_timestamps - 1
    rows = [(labels[a], f"r{b}", labels[c], int(d)) for a, b, c, d in zip(s, r, o, t)]
    return build_graph(rows, types, relations=[f"r{k}" for k in range(n_relations)])
