"""Hyperparameter sweeps: the optimisation grid and the embedding-size grid."""

from __future__ import annotations

import itertools

TUNING_RANGES = {
    "dropout": (0.0, 0.2, 0.4),
    "eta": (0.5, 1.0),
    "margin": (3.0, 6.0, 9.0),
    "lr": (1e-3, 1e-4, 3e-5, 1e-5),
}
L3_RANGE = (1e-3, 5e-4, 1e-4)
BASE_DIM = 128
STATIC_DIMS = (128, 96, 64, 32, 0)
DIACHRONIC_DIMS = (128, 96, 64, 32, 0)
RELATIVE_DIMS = (128, 64, 32, 0)


def tuning_grid() -> list[dict]:
    """Every combination of dropout, eta, margin and learning rate (72 runs)."""
    keys = list(TUNING_RANGES)
    return [dict(zip(keys, values)) for values in itertools.product(*TUNING_RANGES.values())]


def dimension_grid() -> list[dict]:
    """Embedding-size runs with ``d_s + d_t = 128`` (17 runs).

    The purely static split is RotatE; every split with a diachronic part is
    run as DE-RotatE (``d_r = 0``) and as RT-DE-RotatE for each positive ``d_r``.
    """
    runs = []
    for d_s in STATIC_DIMS:
        d_t = BASE_DIM - d_s
        if d_t not in DIACHRONIC_DIMS:
            continue
        if d_t == 0:
            runs.append({"model": "rotate", "d_s": d_s, "d_t": 0, "d_r": 0})
            continue
        for d_r in RELATIVE_DIMS:
            runs.append({"model": "rt" if d_r else "de", "d_s": d_s, "d_t": d_t, "d_r": d_r})
    return runs
