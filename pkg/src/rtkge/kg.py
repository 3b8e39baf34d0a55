"""Typed temporal knowledge graphs, dataset splits and summary statistics."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)


class EntityType(str, enum.Enum):
    USER = "User"
    REPOSITORY = "Repository"
    ISSUE = "Issue"
    PULL_REQUEST = "PullRequest"
    ISSUE_COMMENT = "IssueComment"
    PULL_REQUEST_REVIEW = "PullRequestReview"
    PULL_REQUEST_REVIEW_COMMENT = "PullRequestReviewComment"
    COMMIT_COMMENT = "CommitComment"

    @property
    def code(self) -> str:
        return _TYPE_CODES[self]

    @classmethod
    def parse(cls, value: str | EntityType) -> EntityType:
        """Accept the enum itself, its name, its value or its relation-code abbreviation."""
        if isinstance(value, EntityType):
            return value
        if value in _CODE_TYPES:
            return _CODE_TYPES[value]
        for member in cls:
            if value == member.value or value == member.name:
                return member
        raise ValueError(f"unknown entity type {value!r}")


# Abbreviations used as the first/last component of relation codes.
_TYPE_CODES = {
    EntityType.USER: "U",
    EntityType.REPOSITORY: "R",
    EntityType.ISSUE: "I",
    EntityType.PULL_REQUEST: "P",
    EntityType.ISSUE_COMMENT: "IC",
    EntityType.PULL_REQUEST_REVIEW: "PR",
    EntityType.PULL_REQUEST_REVIEW_COMMENT: "PRC",
    EntityType.COMMIT_COMMENT: "CC",
}
_CODE_TYPES = {v: k for k, v in _TYPE_CODES.items()}


class Quadruple(NamedTuple):
    s: int
    r: int
    o: int
    t: int


class Vocab:
    """Dense label <-> id bijection in first-appearance order."""

    def __init__(self, labels: Iterable[str] = ()):
        self._labels: list[str] = []
        self._index: dict[str, int] = {}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        idx = self._index.get(label)
        if idx is None:
            idx = len(self._labels)
            self._labels.append(label)
            self._index[label] = idx
        return idx

    def id(self, label: str) -> int:
        return self._index[label]

    def label(self, idx: int) -> str:
        return self._labels[idx]

    def get(self, label: str, default: int | None = None) -> int | None:
        return self._index.get(label, default)

    @property
    def labels(self) -> list[str]:
        return list(self._labels)

    def __contains__(self, label: object) -> bool:
        return label in self._index

    def __len__(self) -> int:
        return len(self._labels)

    def __iter__(self):
        return iter(self._labels)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self._labels == other._labels


@dataclass(frozen=True, eq=False)
class TemporalKG:
    """Immutable typed multigraph with timestamped edges.

    ``quads`` is an ``(n, 4)`` int64 array of ``(s, r, o, t)`` rows.
    """

    quads: np.ndarray
    entities: Vocab
    relations: Vocab
    entity_types: tuple[EntityType, ...]

    def __post_init__(self):
        self.quads.setflags(write=False)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def tmin(self) -> int | None:
        return int(self.quads[:, 3].min()) if len(self.quads) else None

    @property
    def tmax(self) -> int | None:
        return int(self.quads[:, 3].max()) if len(self.quads) else None

    @property
    def n_timestamps(self) -> int:
        if not len(self.quads):
            return 0
        return self.tmax - self.tmin + 1

    def __len__(self) -> int:
        return len(self.quads)

    def __iter__(self):
        for row in self.quads:
            yield Quadruple(*(int(x) for x in row))

    def etype(self, entity: int) -> EntityType:
        return self.entity_types[entity]

    def entities_of_type(self, etype: EntityType) -> np.ndarray:
        return np.array([i for i, et in enumerate(self.entity_types) if et == etype], dtype=np.int64)

    def with_quads(self, quads: np.ndarray) -> TemporalKG:
        """Same vocabularies, different edge set."""
        return TemporalKG(np.asarray(quads, dtype=np.int64).reshape(-1, 4).copy(),
                          self.entities, self.relations, self.entity_types)

    def to_labels(self, quads: np.ndarray | None = None) -> list[tuple[str, str, str, int]]:
        quads = self.quads if quads is None else quads
        return [(self.entities.label(s), self.relations.label(r), self.entities.label(o), int(t))
                for s, r, o, t in quads]


class GraphConstructionError(ValueError):
    pass


def build_graph(quadruples: Iterable[Sequence], entity_types: Mapping[str, str | EntityType],
                relations: Sequence[str] = ()) -> TemporalKG:
    """Build a KG from ``(s_label, r_label, o_label, t)`` tuples.

    Ids are assigned in first-appearance order; ``relations`` may pre-seed the
    relation vocabulary so that ids stay aligned across splits.  Exact duplicate
    tuples are dropped (the count is logged).
    """
    entities = Vocab()
    rel_vocab = Vocab(relations)
    types: list[EntityType] = []
    seen: set[tuple[int, int, int, int]] = set()
    rows: list[tuple[int, int, int, int]] = []
    dropped = 0
    parsed_types: dict[str, EntityType] = {}
    for quad in quadruples:
        s_label, r_label, o_label, t = quad
        for label in (s_label, o_label):
            if label in entities:
                continue
            if label not in entity_types:
                raise GraphConstructionError(f"entity {label!r} in tuple {tuple(quad)!r} has no type")
            try:
                etype = parsed_types[label] = EntityType.parse(entity_types[label])
            except ValueError as exc:
                raise GraphConstructionError(f"tuple {tuple(quad)!r}: {exc}") from None
            entities.add(label)
            types.append(etype)
        row = (entities.id(s_label), rel_vocab.add(r_label), entities.id(o_label), int(t))
        if row in seen:
            dropped += 1
            continue
        seen.add(row)
        rows.append(row)
    if dropped:
        log.info("dropped %d duplicate tuples", dropped)
    quads = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return TemporalKG(quads, entities, rel_vocab, tuple(types))


@dataclass
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    mode: str  # "interpolated" | "extrapolated"

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def _split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    # small epsilon guards against 0.05 * 100 = 5.000000000000001 style noise
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split_random(kg: TemporalKG, ratios: Sequence[float] = (0.9, 0.05, 0.05), seed: int = 0) -> DatasetSplit:
    n = len(kg)
    if n < 3:
        raise ValueError(f"need at least 3 tuples to split, got {n}")
    n_train, n_val, _ = _split_counts(n, ratios)
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.split(perm, [n_train, n_train + n_val])
    # keep source order inside each part
    train, val, test = (kg.quads[np.sort(p)] for p in parts)
    return DatasetSplit(train, val, test, "interpolated")


def split_temporal(kg: TemporalKG, ratios: Sequence[float] = (0.9, 0.05, 0.05)) -> DatasetSplit:
    """Contiguous split by timestamp; ties at a boundary go to the earlier part."""
    n = len(kg)
    n_train, n_val, _ = _split_counts(n, ratios)
    if n == 0 or kg.n_timestamps == 1:
        raise ValueError("all tuples share one timestamp; no temporal boundary exists")
    order = np.argsort(kg.quads[:, 3], kind="stable")
    quads = kg.quads[order]
    t = quads[:, 3]

    def advance(cut: int) -> int:
        while 0 < cut < n and t[cut] == t[cut - 1]:
            cut += 1
        return cut

    cut1 = advance(n_train)
    cut2 = advance(max(cut1, n_train + n_val))
    if cut1 == n or cut2 == n:
        log.warning("temporal split left an empty evaluation part (cuts %d, %d of %d)", cut1, cut2, n)
    return DatasetSplit(quads[:cut1], quads[cut1:cut2], quads[cut2:], "extrapolated")


@dataclass
class GraphStats:
    n_nodes: int
    n_edges: int
    n_relations: int
    n_timestamps: int
    max_degree: int
    median_degree: float
    degrees: np.ndarray = field(repr=False)

    def as_row(self) -> dict[str, float]:
        return {"|V|": self.n_nodes, "|E|": self.n_edges, "|R|": self.n_relations,
                "|T|": self.n_timestamps, "D_MAX": self.max_degree, "D_MED": self.median_degree}


def degrees(kg: TemporalKG) -> np.ndarray:
    deg = np.bincount(kg.quads[:, 0], minlength=kg.n_entities)
    deg += np.bincount(kg.quads[:, 2], minlength=kg.n_entities)
    return deg


def stats(kg: TemporalKG) -> GraphStats:
    if len(kg) == 0:
        raise ValueError("stats of an empty KG are undefined")
    deg = degrees(kg)
    # only nodes that some edge references
    present = deg[deg > 0]
    return GraphStats(
        n_nodes=int(len(present)),
        n_edges=len(kg),
        n_relations=int(len(np.unique(kg.quads[:, 1]))),
        n_timestamps=kg.n_timestamps,
        max_degree=int(present.max()),
        median_degree=float(np.median(present)),
        degrees=deg,
    )


# -- persistence -------------------------------------------------------------

def _data_lines(path: Path) -> Iterable[list[str]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            yield line.split("\t")


def read_tuples(path: str | Path) -> list[tuple[str, str, str, int]]:
    out = []
    for lineno, parts in enumerate(_data_lines(Path(path)), 1):
        if len(parts) != 4:
            raise ValueError(f"{path}: malformed tuple line {lineno}: {parts!r}")
        out.append((parts[0], parts[1], parts[2], int(parts[3])))
    return out


def read_types(path: str | Path) -> dict[str, EntityType]:
    types = {}
    for parts in _data_lines(Path(path)):
        if len(parts) != 2:
            raise ValueError(f"{path}: malformed type line {parts!r}")
        types[parts[0]] = EntityType.parse(parts[1])
    return types


def write_tuples(path: str | Path, rows: Iterable[tuple[str, str, str, int]], header: str | None = None) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for s, r, o, t in rows:
            fh.write(f"{s}\t{r}\t{o}\t{int(t)}\n")
            n += 1
    return n


def write_types(path: str | Path, types: Mapping[str, EntityType], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for label, etype in types.items():
            fh.write(f"{label}\t{EntityType.parse(etype).value}\n")


def load_graph(tuples_path: str | Path, types_path: str | Path) -> TemporalKG:
    return build_graph(read_tuples(tuples_path), read_types(types_path))


def save_graph(kg: TemporalKG, tuples_path: str | Path, types_path: str | Path,
               header: str | None = None) -> None:
    write_tuples(tuples_path, kg.to_labels(), header)
    used = np.unique(kg.quads[:, [0, 2]]) if len(kg) else np.array([], dtype=np.int64)
    write_types(types_path, {kg.entities.label(i): kg.entity_types[i] for i in used}, header)
