"""Sparse nonnegative count tensors and the family sufficient statistics.

Counts are stored in a dict keyed by index tuples; zeros are never stored.
Missing observations are flagged by an explicit mask, since an absent key
means an observed zero.
"""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import ModelSpec


class TensorFormatError(ValueError):
    """Malformed tensor text file."""

    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class StatsError(ValueError):
    """Inconsistent or underflowing sufficient statistics."""


class SparseCountTensor:
    """Index-tuple -> positive integer count, with an optional missing mask."""

    __slots__ = ("dims", "entries", "mask")

    def __init__(self, dims: Sequence[int], entries: Mapping[tuple, int] | None = None,
                 mask: Iterable[tuple] = ()):
        self.dims = tuple(int(d) for d in dims)
        self.entries: dict[tuple, int] = {}
        self.mask = frozenset(tuple(int(i) for i in m) for m in mask)
        for m in self.mask:
            self._check_index(m)
        for idx, count in (entries or {}).items():
            idx = tuple(int(i) for i in idx)
            count = int(count)
            if count < 0:
                raise ValueError(f"negative count at {idx}")
            self._check_index(idx)
            if count:
                self.entries[idx] = count
        if self.mask & self.entries.keys():
            raise ValueError("masked cells cannot carry counts")

    def _check_index(self, idx):
        if len(idx) != len(self.dims) or any(not 0 <= i < d for i, d in zip(idx, self.dims)):
            raise ValueError(f"index {idx} outside dims {self.dims}")

    @classmethod
    def from_dense(cls, array, mask=()) -> "SparseCountTensor":
        a = np.asarray(array)
        if np.any(a < 0) or np.any(a != np.round(a)):
            raise ValueError("dense array must hold nonnegative integers")
        entries = {tuple(int(i) for i in idx): int(a[idx]) for idx in zip(*np.nonzero(a))}
        return cls(a.shape, entries, mask)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dims, dtype=np.int64)
        for idx, c in self.entries.items():
            out[idx] = c
        return out

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def total(self) -> int:
        return sum(self.entries.values())

    @property
    def nnz(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx) -> int:
        return self.entries.get(tuple(idx), 0)

    def items(self):
        return sorted(self.entries.items())

    def __eq__(self, other):
        if not isinstance(other, SparseCountTensor):
            return NotImplemented
        return self.dims == other.dims and self.entries == other.entries and self.mask == other.mask

    def __add__(self, other: "SparseCountTensor") -> "SparseCountTensor":
        if self.dims != other.dims:
            raise ValueError("dims differ")
        out = dict(self.entries)
        for k, v in other.entries.items():
            out[k] = out.get(k, 0) + v
        return SparseCountTensor(self.dims, out)

    def __repr__(self):
        return f"SparseCountTensor(dims={self.dims}, nnz={self.nnz}, total={self.total})"

    def log_factorial_sum(self) -> float:
        return sum(math.lgamma(c + 1) for c in self.entries.values())


def contract(t: SparseCountTensor, keep: Sequence[int]) -> SparseCountTensor:
    """Sum ``t`` over every axis not in ``keep``; output axes follow ``keep``."""
    keep = tuple(keep)
    if len(set(keep)) != len(keep) or any(not 0 <= k < t.ndim for k in keep):
        raise ValueError(f"bad index set {keep} for a {t.ndim}-way tensor")
    out = defaultdict(int)
    for idx, c in t.entries.items():
        out[tuple(idx[k] for k in keep)] += c
    return SparseCountTensor(tuple(t.dims[k] for k in keep), out)


class FamilyStats:
    """Urn state: the family and parent marginals of an allocation tensor.

    ``fam[n]`` maps the family configuration ``(i_n, *i_pa(n))`` to its count,
    ``par[n]`` maps the parent configuration to its count (the empty tuple for
    roots), ``visible_recon`` is the contraction onto the visible nodes, and
    ``cells`` optionally keeps the full cell map needed for the reverse kernel
    and the factorial term of the marginal.
    """

    def __init__(self, spec: ModelSpec, track_cells: bool = True):
        self.spec = spec
        self.fam = [defaultdict(int) for _ in range(spec.n_nodes)]
        self.par = [defaultdict(int) for _ in range(spec.n_nodes)]
        self.visible_recon = defaultdict(int)
        self.total = 0
        self.cells = defaultdict(int) if track_cells else None
        self._fa = [spec.family(n) for n in range(spec.n_nodes)]
        self._pa = list(spec.parents)

    def copy(self) -> "FamilyStats":
        out = FamilyStats.__new__(FamilyStats)
        out.spec = self.spec
        out.fam = [defaultdict(int, f) for f in self.fam]
        out.par = [defaultdict(int, p) for p in self.par]
        out.visible_recon = defaultdict(int, self.visible_recon)
        out.total = self.total
        out.cells = None if self.cells is None else defaultdict(int, self.cells)
        out._fa, out._pa = self._fa, self._pa
        return out

    def increment(self, c: Sequence[int]) -> "FamilyStats":
        c = tuple(c)
        self._check_cell(c)
        for n in range(len(self.fam)):
            self.fam[n][tuple(c[m] for m in self._fa[n])] += 1
            self.par[n][tuple(c[m] for m in self._pa[n])] += 1
        self.visible_recon[tuple(c[v] for v in self.spec.visible)] += 1
        if self.cells is not None:
            self.cells[c] += 1
        self.total += 1
        return self

    def decrement(self, c: Sequence[int]) -> "FamilyStats":
        c = tuple(c)
        self._check_cell(c)
        keys = [
            (self.fam[n], tuple(c[m] for m in self._fa[n])) for n in range(len(self.fam))
        ] + [(self.par[n], tuple(c[m] for m in self._pa[n])) for n in range(len(self.fam))]
        keys.append((self.visible_recon, tuple(c[v] for v in self.spec.visible)))
        if self.cells is not None:
            keys.append((self.cells, c))
        if any(table.get(k, 0) < 1 for table, k in keys):
            raise StatsError(f"decrement underflow at cell {c}")
        for table, k in keys:
            table[k] -= 1
            if table[k] == 0:
                del table[k]
        self.total -= 1
        return self

    def _check_cell(self, c):
        cards = self.spec.cards
        if len(c) != len(cards) or any(not 0 <= i < d for i, d in zip(c, cards)):
            raise StatsError(f"cell {c} outside the index space {cards}")

    def cell_count(self, c) -> int:
        if self.cells is None:
            raise StatsError("full cell map not tracked")
        return self.cells.get(tuple(c), 0)

    def log_factorial_sum(self) -> float:
        if self.cells is None:
            raise StatsError("full cell map not tracked")
        return sum(math.lgamma(v + 1) for v in self.cells.values())

    def check_consistency(self) -> None:
        """Raise StatsError unless all marginal identities hold."""
        for n in range(len(self.fam)):
            sums = defaultdict(int)
            for key, v in self.fam[n].items():
                if v < 0:
                    raise StatsError("negative count")
                sums[key[1:]] += v
            if {k: v for k, v in sums.items() if v} != {k: v for k, v in self.par[n].items() if v}:
                raise StatsError(f"family/parent mismatch at node {n}")
            if sum(self.fam[n].values()) != self.total:
                raise StatsError(f"family {n} total differs from S+")
        if sum(self.visible_recon.values()) != self.total:
            raise StatsError("visible reconstruction total differs from S+")

    def __eq__(self, other):
        if not isinstance(other, FamilyStats):
            return NotImplemented

        def clean(d):
            return {k: v for k, v in d.items() if v}

        return (
            self.total == other.total
            and all(clean(a) == clean(b) for a, b in zip(self.fam, other.fam))
            and all(clean(a) == clean(b) for a, b in zip(self.par, other.par))
            and clean(self.visible_recon) == clean(other.visible_recon)
        )


def increment(stats: FamilyStats, c) -> FamilyStats:
    return stats.increment(c)


def decrement(stats: FamilyStats, c) -> FamilyStats:
    return stats.decrement(c)


def stats_from_tensor(spec: ModelSpec, S: SparseCountTensor, track_cells: bool = True) -> FamilyStats:
    if S.dims != spec.cards:
        raise StatsError(f"tensor dims {S.dims} do not match model cardinalities {spec.cards}")
    if S.mask:
        raise StatsError("allocation tensors cannot carry a missing mask")
    stats = FamilyStats(spec, track_cells)
    for n in range(spec.n_nodes):
        for k, v in contract(S, spec.family(n)).entries.items():
            stats.fam[n][k] = v
        for k, v in contract(S, spec.parents[n]).entries.items():
            stats.par[n][k] = v
    for k, v in contract(S, spec.visible).entries.items():
        stats.visible_recon[k] = v
    if track_cells:
        stats.cells.update(S.entries)
    stats.total = S.total
    return stats


def read_tensor(path) -> SparseCountTensor:
    """Parse the ``dims`` / ``i1 .. iN count`` / ``missing i1 .. iN`` text format."""
    dims = None
    entries = {}
    mask = set()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if dims is None:
            if fields[0] != "dims":
                raise TensorFormatError("first significant line must be 'dims I1 ... IN'", lineno)
            try:
                dims = tuple(int(f) for f in fields[1:])
            except ValueError:
                raise TensorFormatError("non-integer dimension", lineno)
            if not dims or any(d < 1 for d in dims):
                raise TensorFormatError("dimensions must be positive", lineno)
            continue
        missing = fields[0] == "missing"
        if missing:
            fields = fields[1:]
        try:
            values = [int(f) for f in fields]
        except ValueError:
            raise TensorFormatError(f"non-integer field in {raw.strip()!r}", lineno)
        n_idx = len(dims)
        if len(values) != (n_idx if missing else n_idx + 1):
            raise TensorFormatError(f"expected {n_idx} indices{'' if missing else ' and a count'}", lineno)
        idx = tuple(values[:n_idx])
        if any(not 0 <= i < d for i, d in zip(idx, dims)):
            raise TensorFormatError(f"index {idx} outside dims {dims}", lineno)
        if idx in entries or idx in mask:
            raise TensorFormatError(f"duplicate entry {idx}", lineno)
        if missing:
            mask.add(idx)
        else:
            if values[-1] < 1:
                raise TensorFormatError("counts must be positive integers", lineno)
            entries[idx] = values[-1]
    if dims is None:
        raise TensorFormatError("dims line missing")
    return SparseCountTensor(dims, entries, mask)


def write_tensor(t: SparseCountTensor, path) -> None:
    lines = ["dims " + " ".join(map(str, t.dims))]
    lines += [" ".join(map(str, idx)) + f" {c}" for idx, c in t.items()]
    lines += ["missing " + " ".join(map(str, idx)) for idx in sorted(t.mask)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
