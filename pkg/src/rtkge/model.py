"""Embedding tables and the RotatE / DE-RotatE / RT-DE-RotatE scoring functions.

Complex vectors use the interleaved ``(re, im)`` layout: component ``k`` of a
``D``-dimensional real vector pair ``(2k, 2k+1)``.  Relations are stored as
phase angles, so rotations have unit modulus by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

KINDS = ("rotate", "de", "rt")
CHECKPOINT_FORMAT = 1


@dataclass
class ModelConfig:
    n_entities: int
    n_relations: int
    kind: str = "rt"
    d_s: int = 64
    d_t: int = 64
    d_r: int = 32
    norm: str = "l1"
    bilinear: bool = False
    init_range: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        for name in ("d_s", "d_t", "d_r"):
            v = getattr(self, name)
            if v < 0 or v % 2:
                raise ValueError(f"{name} must be even and non-negative, got {v}")
        if self.d_s + self.d_t == 0:
            raise ValueError("d_s + d_t must be positive")
        if self.kind == "rotate" and (self.d_t or self.d_r):
            raise ValueError("rotate model needs d_t = d_r = 0")
        if self.kind == "de" and self.d_r:
            raise ValueError("de model needs d_r = 0")
        if self.bilinear and self.kind != "rt":
            raise ValueError("bilinear mode requires kind='rt'")
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"norm must be 'l1' or 'l2', got {self.norm!r}")
        if self.n_entities < 0 or self.n_relations < 0:
            raise ValueError("negative vocabulary size")

    @property
    def dim(self) -> int:
        return self.d_s + self.d_t

    @property
    def has_relative(self) -> bool:
        return self.kind == "rt" and self.d_r > 0

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)


def table_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every learnable table allocated for ``config``."""
    V, R, D = config.n_entities, config.n_relations, config.dim
    shapes = {"E": (V, config.d_s)}
    if config.d_t:
        shapes.update(E_A=(V, config.d_t), E_F=(V, config.d_t), E_PHI=(V, config.d_t))
    shapes["E_R"] = (R, D // 2)
    if config.has_relative:
        shapes.update(W_E=(config.d_s, config.d_r), W_P=(R, R))
        if config.bilinear:
            shapes.update(W_rel=(R, D, D), W_bil=(config.d_r, config.d_r))
    return shapes


def param_count(config: ModelConfig) -> int:
    """Exact number of learnable scalars.

    ``|V|(d_s + 3 d_t) + |R|(d_s + d_t)/2 + d_s d_r + |R|^2`` for the translational
    relative-time model; the last two terms vanish when ``d_r = 0`` and the
    diachronic ones when ``d_t = 0``.
    """
    V, R = config.n_entities, config.n_relations
    count = V * (config.d_s + 3 * config.d_t) + R * config.dim // 2
    if config.has_relative:
        count += config.d_s * config.d_r + R * R
        if config.bilinear:
            count += R * config.dim ** 2 + config.d_r ** 2
    return count


# -- relative temporal context -------------------------------------------------

class ContextIndex:
    """Per (entity, relation) sorted event times, built from training tuples only.

    Stored as one flat sorted key array ``pair * M + (t - base)`` so that
    "latest time strictly before t" is a single vectorised ``searchsorted``.
    """

    def __init__(self, quads: np.ndarray, n_relations: int):
        quads = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
        self.n_relations = n_relations
        if len(quads):
            self.base = int(quads[:, 3].min()) - 1
            self.M = int(quads[:, 3].max()) - self.base + 2
        else:
            self.base, self.M = 0, 2
        ents = np.concatenate([quads[:, 0], quads[:, 2]])
        rels = np.concatenate([quads[:, 1], quads[:, 1]])
        times = np.concatenate([quads[:, 3], quads[:, 3]])
        keys = (ents * n_relations + rels) * self.M + (times - self.base)
        self.keys = np.unique(keys)

    def __getitem__(self, key: tuple[int, int]) -> list[int]:
        e, r = key
        pair = e * self.n_relations + r
        lo, hi = np.searchsorted(self.keys, [pair * self.M, (pair + 1) * self.M])
        return [int(k % self.M + self.base) for k in self.keys[lo:hi]]

    def pairs(self) -> dict[tuple[int, int], list[int]]:
        out: dict[tuple[int, int], list[int]] = {}
        for k in self.keys:
            pair, rel_t = divmod(int(k), self.M)
            out.setdefault(divmod(pair, self.n_relations), []).append(rel_t + self.base)
        return out

    def last_before(self, entities, t_q) -> tuple[np.ndarray, np.ndarray]:
        """Latest indexed time ``< t_q`` for every relation.

        Returns ``(last, valid)`` both shaped ``(n, |R|)``; ``last`` is 0 where
        ``valid`` is False.
        """
        e = np.asarray(entities, dtype=np.int64).reshape(-1, 1)
        tq = np.broadcast_to(np.asarray(t_q, dtype=np.int64).reshape(-1, 1), e.shape)
        pairs = e * self.n_relations + np.arange(self.n_relations, dtype=np.int64)
        rel = np.clip(tq - self.base, 0, self.M - 1)
        query = pairs * self.M + rel
        pos = np.searchsorted(self.keys, query, side="left") - 1
        found = self.keys[np.maximum(pos, 0)] if len(self.keys) else np.zeros_like(query)
        valid = (pos >= 0) & (found // self.M == pairs)
        last = np.where(valid, found % self.M + self.base, 0)
        return last, valid


def build_context_index(train_quads: np.ndarray, n_relations: int) -> ContextIndex:
    return ContextIndex(train_quads, n_relations)


def relative_delta(index: ContextIndex, e: int, r: int, t: int) -> int | None:
    """Elapsed time since the latest indexed (e, r) event strictly before ``t``."""
    last, valid = index.last_before([e], [t])
    if not valid[0, r]:
        return None
    return int(t - last[0, r])


def positional_row(i, d_r: int):
    """Sinusoidal encoding: ``sin(i / 10000**(j//2 / d))`` at even j, ``cos`` at odd j.

    Works elementwise on numpy arrays and torch tensors (new trailing axis).
    """
    if d_r == 0:
        shape = np.shape(i) + (0,)
        return torch.zeros(shape) if torch.is_tensor(i) else np.zeros(shape)
    j = np.arange(d_r)
    inv = 1.0 / np.power(10000.0, (j // 2) / d_r)
    even = (j % 2 == 0)
    if torch.is_tensor(i):
        angle = i.unsqueeze(-1) * torch.as_tensor(inv, dtype=i.dtype if i.is_floating_point() else torch.float64)
        return torch.where(torch.as_tensor(even), torch.sin(angle), torch.cos(angle))
    angle = np.asarray(i, dtype=np.float64)[..., None] * inv
    return np.where(even, np.sin(angle), np.cos(angle))


def context_encoding(index: ContextIndex, entities, t, t_q, d_r: int, dtype=torch.float32) -> torch.Tensor:
    """The ``(n, |R|, d_r)`` stack of positional rows ``rho(t - t_q + delta)``.

    ``t - t_q + delta`` simplifies to ``t - last``.  Relations without history
    before ``t_q`` get an all-zero row.
    """
    last, valid = index.last_before(entities, t_q)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1, 1), last.shape)
    # lags are integers: encode each distinct lag once
    lags, inverse = np.unique(t - last, return_inverse=True)
    enc = positional_row(lags.astype(np.float64), d_r)[inverse.reshape(last.shape)]
    enc[~valid] = 0.0
    return torch.as_tensor(enc, dtype=dtype)


# -- complex helpers -----------------------------------------------------------

def _pairs(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return x[..., 0::2], x[..., 1::2]


def rotate(x: torch.Tensor, phase: torch.Tensor) -> torch.Tensor:
    re, im = _pairs(x)
    c, s = torch.cos(phase), torch.sin(phase)
    out = torch.stack([re * c - im * s, re * s + im * c], dim=-1)
    return out.flatten(-2)


def _sqrt0(sq: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite derivative at 0; use the zero subgradient there
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def complex_distance(diff: torch.Tensor, norm: str = "l1") -> torch.Tensor:
    """Sum of complex moduli (``l1``) or Euclidean norm (``l2``) of interleaved pairs."""
    re, im = _pairs(diff)
    sq = re * re + im * im
    if norm == "l1":
        return _sqrt0(sq).sum(-1)
    return _sqrt0(sq.sum(-1))


def real_distance(diff: torch.Tensor, norm: str = "l1") -> torch.Tensor:
    if norm == "l1":
        return diff.abs().sum(-1)
    return _sqrt0((diff * diff).sum(-1))


# -- the model -------------------------------------------------------------------

def _as_long(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.long).reshape(-1) if not torch.is_tensor(x) else x.long().reshape(-1)


class TemporalKGE(nn.Module):
    """All learnable tables plus scoring.  Lower distance = more plausible."""

    def __init__(self, config: ModelConfig, seed: int | None = 0):
        super().__init__()
        self.config = config
        dtype = config.torch_dtype
        for name, shape in table_shapes(config).items():
            setattr(self, name, nn.Parameter(torch.zeros(shape, dtype=dtype)))
        self.reset_parameters(seed)

    @property
    def tables(self) -> dict[str, nn.Parameter]:
        return dict(self.named_parameters())

    def reset_parameters(self, seed: int | None = 0):
        gen = torch.Generator()
        if seed is not None:
            gen.manual_seed(seed)
        else:
            gen.seed()
        c = self.config
        a = c.init_range if c.init_range is not None else 16.0 / c.dim

        def uniform(p, lo, hi):
            with torch.no_grad():
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * (hi - lo) + lo)

        uniform(self.E, -a, a)
        if c.d_t:
            uniform(self.E_A, -a, a)
            uniform(self.E_F, -a, a)
            uniform(self.E_PHI, -math.pi, math.pi)
        uniform(self.E_R, -math.pi, math.pi)
        if c.has_relative:
            uniform(self.W_E, -a, a)
            with torch.no_grad():
                self.W_P.zero_()
            if c.bilinear:
                uniform(self.W_rel, -a, a)
                uniform(self.W_bil, -a, a)

    # -- embeddings --------------------------------------------------------------
    def static(self, e) -> torch.Tensor:
        return self.E[_as_long(e)]

    def diachronic(self, e, t) -> torch.Tensor:
        e = _as_long(e)
        static = self.E[e]
        if not self.config.d_t:
            return static
        t = torch.as_tensor(np.asarray(t) if not torch.is_tensor(t) else t, dtype=self.E.dtype).reshape(-1, 1)
        dia = self.E_A[e] + torch.sin(t * self.E_F[e] + self.E_PHI[e])
        return torch.cat([static, dia], dim=-1)

    def gamma(self, r, enc: torch.Tensor) -> torch.Tensor:
        """``W_P(r) @ P`` for a batch: ``(n, |R|) x (n, |R|, d_r) -> (n, d_r)``."""
        w = self.W_P[_as_long(r)]
        return torch.einsum("nk,nkd->nd", w, enc.to(w.dtype))

    # -- scores ----------------------------------------------------------------------
    def distance(self, s, r, o, t, enc_s: torch.Tensor | None = None, enc_o: torch.Tensor | None = None,
                 dropout: float = 0.0) -> torch.Tensor:
        """Distance of each tuple; ``enc_*`` are context encodings for RT models.

        ``dropout`` > 0 (training only) drops entries of both diachronic
        embeddings and of both gamma vectors.
        """
        c = self.config
        s, r, o = _as_long(s), _as_long(r), _as_long(o)
        n = max(len(s), len(r), len(o))
        s, r, o = (x.expand(n) if len(x) == 1 else x for x in (s, r, o))
        if not torch.is_tensor(t):
            t = torch.as_tensor(np.broadcast_to(np.asarray(t), (n,)).copy())
        elif t.numel() == 1:
            t = t.reshape(1).expand(n)
        p = dropout
        ds, do = self.diachronic(s, t), self.diachronic(o, t)
        if p:
            ds, do = F.dropout(ds, p, True), F.dropout(do, p, True)
        if c.bilinear:
            return -self._bilinear(s, r, o, ds, do, enc_s, enc_o, p)
        dist = complex_distance(rotate(ds, self.E_R[r]) - do, c.norm)
        if not c.has_relative:
            return dist
        if enc_s is None or enc_o is None:
            raise ValueError("relative-time model needs context encodings")
        gs, go = self.gamma(r, enc_s), self.gamma(r, enc_o)
        if p:
            gs, go = F.dropout(gs, p, True), F.dropout(go, p, True)
        proj_s, proj_o = self.E[s] @ self.W_E, self.E[o] @ self.W_E
        return dist + real_distance(proj_s - go, c.norm) + real_distance(gs - proj_o, c.norm)

    def _bilinear(self, s, r, o, ds, do, enc_s, enc_o, p):
        gs, go = self.gamma(r, enc_s), self.gamma(r, enc_o)
        if p:
            gs, go = F.dropout(gs, p, True), F.dropout(go, p, True)
        a = torch.einsum("ni,nij,nj->n", ds, self.W_rel[r], do)
        d = torch.einsum("ni,ij,nj->n", gs, self.W_bil, go)
        b = ((self.E[s] @ self.W_E) * go).sum(-1)
        cc = (gs * (self.E[o] @ self.W_E)).sum(-1)
        return a + d + b + cc

    def encodings(self, index: ContextIndex | None, s, o, t, t_q):
        if not self.config.has_relative:
            return None, None
        if index is None:
            raise ValueError("relative-time model needs a context index")
        dtype = self.config.torch_dtype
        d_r = self.config.d_r
        return (context_encoding(index, s, t, t_q, d_r, dtype),
                context_encoding(index, o, t, t_q, d_r, dtype))

    def score_quads(self, s, r, o, t, t_q=None, index: ContextIndex | None = None,
                    dropout: float = 0.0) -> torch.Tensor:
        """Distances with context encodings computed from ``index`` at ``t_q``."""
        if t_q is None:
            t_q = t
        s_np, o_np = np.asarray(s).reshape(-1), np.asarray(o).reshape(-1)
        n = max(len(s_np), len(o_np), np.size(r), np.size(t))
        s_np, o_np = np.broadcast_to(s_np, (n,)), np.broadcast_to(o_np, (n,))
        t_np = np.broadcast_to(np.asarray(t).reshape(-1), (n,))
        tq_np = np.broadcast_to(np.asarray(t_q).reshape(-1), (n,))
        enc_s, enc_o = self.encodings(index, s_np, o_np, t_np, tq_np)
        return self.distance(s_np.copy(), r, o_np.copy(), t_np.copy(), enc_s, enc_o, dropout=dropout)

    # -- checkpoints -------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                p.copy_(torch.as_tensor(arrays[name]))


# -- functional views over a model ----------------------------------------------------

@torch.no_grad()
def diachronic_embed(params: TemporalKGE, e: int, t: int) -> torch.Tensor:
    return params.diachronic([e], [t])[0]


@torch.no_grad()
def rotate_score(params: TemporalKGE, s: int, r: int, o: int) -> float:
    """Static rotation distance over the first ``d_s`` dims (phases of the static part)."""
    d_s = params.config.d_s
    h, tail = params.static([s]), params.static([o])
    phase = params.E_R[_as_long([r])][:, : d_s // 2]
    return float(complex_distance(rotate(h, phase) - tail, params.config.norm)[0])


@torch.no_grad()
def de_rotate_score(params: TemporalKGE, s: int, r: int, o: int, t: int) -> float:
    c = params.config
    ds, do = params.diachronic([s], [t]), params.diachronic([o], [t])
    return float(complex_distance(rotate(ds, params.E_R[_as_long([r])]) - do, c.norm)[0])


@torch.no_grad()
def gamma(params: TemporalKGE, index: ContextIndex, r: int, e: int, t: int, t_q: int) -> torch.Tensor:
    enc = context_encoding(index, [e], [t], [t_q], params.config.d_r, params.config.torch_dtype)
    return params.gamma([r], enc)[0]


@torch.no_grad()
def rt_de_rotate_score(params: TemporalKGE, index: ContextIndex, s: int, r: int, o: int, t: int, t_q: int) -> float:
    if params.config.bilinear:
        raise ValueError("model is in bilinear mode")
    return float(params.score_quads([s], [r], [o], [t], [t_q], index)[0])


@torch.no_grad()
def rt_bilinear_score(params: TemporalKGE, index: ContextIndex, s: int, r: int, o: int, t: int, t_q: int) -> float:
    if not params.config.bilinear:
        raise ValueError("bilinear mode is not enabled for this model")
    return -float(params.score_quads([s], [r], [o], [t], [t_q], index)[0])


# -- checkpoint container ----------------------------------------------------------------

def save_checkpoint(path: str | Path, model: TemporalKGE, meta: dict[str, Any] | None = None,
                    rng_state: dict | None = None) -> None:
    """Write an ``.npz`` holding every table plus a JSON ``__meta__`` record.

    ``__meta__`` carries the format version, the model config, caller metadata
    (vocabularies, training config, ...) and the numpy bit-generator state.
    """
    record = {
        "format": CHECKPOINT_FORMAT,
        "model": asdict(model.config),
        "meta": meta or {},
        "rng_state": rng_state,
    }
    arrays = {f"table/{k}": v for k, v in model.state_arrays().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(record, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[TemporalKGE, dict[str, Any]]:
    with np.load(path, allow_pickle=False) as data:
        record = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if record.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {record.get('format')!r}")
        arrays = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("table/")}
    model = TemporalKGE(ModelConfig(**record["model"]), seed=None)
    model.load_arrays(arrays)
    return model, record
