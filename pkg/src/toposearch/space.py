"""Combinatorics of the multi-resolution topology search space.

Resolution 0 is full resolution; resolution ``d`` is downsampled by ``2**d``.
Every super node receives ``E = 3D - 2`` candidate input edges between
adjacent resolutions. A connection pattern is a non-empty subset of those
edges, identified by the integer whose bit ``e`` marks edge ``e``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np

MAX_RESOLUTIONS = 4


class SpaceError(ValueError):
    """Invalid search-space configuration."""


@dataclass(frozen=True)
class SpaceConfig:
    L: int
    D: int
    N: int = 5

    def __post_init__(self):
        if not isinstance(self.L, int) or self.L < 1:
            raise SpaceError(f"L must be a positive integer, got {self.L!r}")
        if not isinstance(self.D, int) or not 2 <= self.D <= MAX_RESOLUTIONS:
            raise SpaceError(f"D must be an integer in [2, {MAX_RESOLUTIONS}], got {self.D!r}")
        if not isinstance(self.N, int) or self.N < 1:
            raise SpaceError(f"N must be a positive integer, got {self.N!r}")

    @property
    def E(self) -> int:
        return num_edges(self.D)

    @property
    def M(self) -> int:
        return num_patterns(self.D)

    @property
    def A(self) -> int:
        return 2**self.D - 1


def num_edges(D: int) -> int:
    return 3 * D - 2


def num_patterns(D: int) -> int:
    return 2 ** num_edges(D) - 1


@dataclass(frozen=True)
class EdgeId:
    index: int
    src_res: int
    dst_res: int

    @property
    def kind(self) -> str:
        if self.src_res == self.dst_res:
            return "same"
        return "down" if self.dst_res > self.src_res else "up"


@lru_cache(maxsize=None)
def edges(D: int) -> tuple[EdgeId, ...]:
    """Candidate input edges ordered by (dst_res, src_res)."""
    pairs = [(dst, src) for dst in range(D) for src in (dst - 1, dst, dst + 1) if 0 <= src < D]
    return tuple(EdgeId(i, src, dst) for i, (dst, src) in enumerate(sorted(pairs)))


@dataclass(frozen=True)
class ConnectionPattern:
    id: int
    bits: tuple[int, ...]

    @classmethod
    def from_id(cls, pid: int, E: int) -> "ConnectionPattern":
        if not 1 <= pid < 2**E:
            raise SpaceError(f"pattern id {pid} outside [1, {2**E - 1}]")
        return cls(pid, tuple((pid >> e) & 1 for e in range(E)))

    @classmethod
    def from_bits(cls, bits) -> "ConnectionPattern":
        bits = tuple(int(b) for b in bits)
        pid = sum(b << e for e, b in enumerate(bits))
        if pid == 0:
            raise SpaceError("empty connection pattern")
        return cls(pid, bits)

    @property
    def selected(self) -> tuple[int, ...]:
        return tuple(e for e, b in enumerate(self.bits) if b)


def enumerate_patterns(cfg: SpaceConfig) -> list[ConnectionPattern]:
    E = cfg.E
    return [ConnectionPattern.from_id(pid, E) for pid in range(1, 2**E)]


def activation_code(bits, D: int) -> int:
    """Integer code of an activation vector (bit d marks resolution d)."""
    code = sum(int(b) << d for d, b in enumerate(bits))
    if len(bits) != D:
        raise SpaceError(f"activation needs {D} entries, got {len(bits)}")
    return code


def activation_bits(code: int, D: int) -> tuple[int, ...]:
    return tuple((code >> d) & 1 for d in range(D))


def activation_of(cp: ConnectionPattern, cfg: SpaceConfig) -> tuple[int, ...]:
    a = [0] * cfg.D
    for e in cp.selected:
        a[edges(cfg.D)[e].dst_res] = 1
    return tuple(a)


def sources_of(cp: ConnectionPattern, cfg: SpaceConfig) -> tuple[int, ...]:
    s = [0] * cfg.D
    for e in cp.selected:
        s[edges(cfg.D)[e].src_res] = 1
    return tuple(s)


def is_feasible_pair(a, out_cp: ConnectionPattern, cfg: SpaceConfig) -> bool:
    """Every active node feeds some output edge and no inactive node does."""
    return tuple(int(x) for x in a) == sources_of(out_cp, cfg)


@dataclass(frozen=True)
class FeasibilitySets:
    """Feasibility lookup tables keyed by pattern id and activation code.

    ``F[j]`` holds output pattern ids allowed after input pattern ``j``;
    ``F_in[a]`` the patterns activating exactly ``a``; ``F_out[a]`` the
    patterns whose source nodes are exactly ``a``.
    """

    D: int
    F: dict[int, tuple[int, ...]]
    F_in: dict[int, tuple[int, ...]]
    F_out: dict[int, tuple[int, ...]]

    def to_json(self) -> dict:
        enc = lambda m: {str(k): list(v) for k, v in m.items()}
        return {"D": self.D, "F": enc(self.F), "F_in": enc(self.F_in), "F_out": enc(self.F_out)}

    @classmethod
    def from_json(cls, obj: dict) -> "FeasibilitySets":
        dec = lambda m: {int(k): tuple(v) for k, v in m.items()}
        return cls(int(obj["D"]), dec(obj["F"]), dec(obj["F_in"]), dec(obj["F_out"]))


def feasible_sets(cfg: SpaceConfig) -> FeasibilitySets:
    D, E = cfg.D, cfg.E
    dst_mask = np.zeros(E, dtype=np.int64)
    src_mask = np.zeros(E, dtype=np.int64)
    for ed in edges(D):
        dst_mask[ed.index] = 1 << ed.dst_res
        src_mask[ed.index] = 1 << ed.src_res
    ids = np.arange(1, 2**E)
    bits = (ids[:, None] >> np.arange(E)) & 1
    act = np.bitwise_or.reduce(bits * dst_mask, axis=1)
    src = np.bitwise_or.reduce(bits * src_mask, axis=1)
    F_in = {a: tuple(int(i) for i in ids[act == a]) for a in range(1, 2**D)}
    F_out = {a: tuple(int(i) for i in ids[src == a]) for a in range(1, 2**D)}
    F = {int(j): F_out[int(a)] for j, a in zip(ids, act)}
    return FeasibilitySets(D, F, F_in, F_out)


def load_or_build_sets(cfg: SpaceConfig, cache_dir: str | Path) -> FeasibilitySets:
    path = Path(cache_dir) / f"feasible_sets_D{cfg.D}.json"
    if path.exists():
        sets = FeasibilitySets.from_json(json.loads(path.read_text()))
        if sets.D == cfg.D:
            return sets
    sets = feasible_sets(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(sets.to_json()))
    return sets


@dataclass(frozen=True)
class SearchSpace:
    """A SpaceConfig bundled with its dense lookup matrices.

    Pattern id ``j`` lives at column ``j - 1`` of every per-pattern array.
    """

    cfg: SpaceConfig
    sets: FeasibilitySets = field(default=None, compare=False)

    def __post_init__(self):
        if self.sets is None:
            object.__setattr__(self, "sets", feasible_sets(self.cfg))

    @property
    def L(self) -> int:
        return self.cfg.L

    @property
    def D(self) -> int:
        return self.cfg.D

    @property
    def N(self) -> int:
        return self.cfg.N

    @property
    def E(self) -> int:
        return self.cfg.E

    @property
    def M(self) -> int:
        return self.cfg.M

    @cached_property
    def edges(self) -> tuple[EdgeId, ...]:
        return edges(self.D)

    @cached_property
    def pattern_matrix(self) -> np.ndarray:
        """[M, E] 0/1 matrix; row j-1 is the bit vector of pattern j."""
        ids = np.arange(1, self.M + 1)
        return ((ids[:, None] >> np.arange(self.E)) & 1).astype(np.float64)

    @cached_property
    def activation_ids(self) -> np.ndarray:
        """Activation code of every pattern, indexed by pattern id - 1."""
        out = np.zeros(self.M, dtype=np.int64)
        for a, ids in self.sets.F_in.items():
            out[np.asarray(ids) - 1] = a
        return out

    @cached_property
    def source_ids(self) -> np.ndarray:
        out = np.zeros(self.M, dtype=np.int64)
        for a, ids in self.sets.F_out.items():
            out[np.asarray(ids) - 1] = a
        return out

    @cached_property
    def f_in_matrix(self) -> np.ndarray:
        """[A, M] indicator; row a-1 marks F_in(a)."""
        return self._indicator(self.sets.F_in)

    @cached_property
    def f_out_matrix(self) -> np.ndarray:
        return self._indicator(self.sets.F_out)

    @cached_property
    def transition_matrix(self) -> np.ndarray:
        """[M, M] boolean; entry (j-1, k-1) is True iff k is in F(j)."""
        return self.activation_ids[:, None] == self.source_ids[None, :]

    def _indicator(self, table) -> np.ndarray:
        out = np.zeros((self.cfg.A, self.M))
        for a, ids in table.items():
            out[a - 1, np.asarray(ids) - 1] = 1.0
        return out

    def pattern(self, pid: int) -> ConnectionPattern:
        return ConnectionPattern.from_id(pid, self.E)

    def edges_into(self, d: int) -> tuple[int, ...]:
        return tuple(ed.index for ed in self.edges if ed.dst_res == d)

    def is_feasible_sequence(self, I) -> bool:
        return all(int(I[i + 1]) in self.sets.F[int(I[i])] for i in range(len(I) - 1))
