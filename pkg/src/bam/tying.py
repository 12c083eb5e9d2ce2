"""Symmetric CP / sNMF: one latent root whose N children share a single table.

With the conditional table tied across child positions, the sufficient
statistics are the root counts ``S0(r)`` and the position-summed counts
``S_shared(i, r)``.  The N child draws of one token update the shared table
one after another, so the predictive ratios telescope into rising factorials.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .model import ModelError, ModelSpec, PriorSpec, Violation, require_valid, tied_pattern
from .tensor import SparseCountTensor, StatsError

lgamma = math.lgamma


def _pattern(spec: ModelSpec):
    require_valid(spec)
    pat = tied_pattern(spec)
    if pat is None:
        raise ModelError([Violation("unsupported-tying-pattern",
                                    "expected one latent root with all visible children tied")])
    root, children = pat
    return root, children, spec.nodes[root].card, spec.nodes[children[0]].card


@dataclass
class TiedStats:
    S0: dict = field(default_factory=lambda: defaultdict(int))
    S_shared: dict = field(default_factory=lambda: defaultdict(int))
    total: int = 0
    n_positions: int = 2

    def increment(self, r: int, i: tuple) -> "TiedStats":
        self.S0[r] += 1
        for v in i:
            self.S_shared[(v, r)] += 1
        self.total += 1
        return self

    def decrement(self, r: int, i: tuple) -> "TiedStats":
        need = defaultdict(int)
        for v in i:
            need[(v, r)] += 1
        if self.S0.get(r, 0) < 1 or any(self.S_shared.get(k, 0) < c for k, c in need.items()):
            raise StatsError(f"decrement underflow at ({r}, {tuple(i)})")
        self.S0[r] -= 1
        for k, c in need.items():
            self.S_shared[k] -= c
        self.total -= 1
        return self

    def check_consistency(self) -> None:
        if sum(self.S0.values()) != self.total:
            raise StatsError("root counts do not sum to S+")
        if sum(self.S_shared.values()) != self.n_positions * self.total:
            raise StatsError("shared counts do not sum to N * S+")


def tied_stats_from_tensor(spec: ModelSpec, S: SparseCountTensor) -> TiedStats:
    root, children, _, _ = _pattern(spec)
    st = TiedStats(n_positions=len(children))
    for cell, c in S.entries.items():
        r = cell[root]
        st.S0[r] += c
        for n in children:
            st.S_shared[(cell[n], r)] += c
        st.total += c
    return st


def tied_log_marginal_events(spec: ModelSpec, prior: PriorSpec, stats: TiedStats) -> float:
    """log probability of one token sequence with statistics ``stats``."""
    root, children, R, I = _pattern(spec)
    a, N = prior.a, len(children)
    a0, at = a / R, a / (R * I)
    out = sum(lgamma(a0 + v) - lgamma(a0) for v in stats.S0.values() if v)
    out -= lgamma(a + stats.total) - lgamma(a)
    out += sum(lgamma(at + v) - lgamma(at) for v in stats.S_shared.values() if v)
    out -= sum(lgamma(at * I + N * v) - lgamma(at * I) for v in stats.S0.values() if v)
    return out


def tied_log_marginal_allocation(spec: ModelSpec, prior: PriorSpec, S: SparseCountTensor) -> float:
    """log pi(S) under the tied model (count law, multinomial coefficient, event law)."""
    from .urn import log_prob_total

    st = tied_stats_from_tensor(spec, S)
    return (log_prob_total(prior, S.total) + lgamma(S.total + 1) - S.log_factorial_sum()
            + tied_log_marginal_events(spec, prior, st))


def tied_transition_logprob(spec: ModelSpec, prior: PriorSpec, stats: TiedStats, r: int, i) -> float:
    """log pi(s^tau | S^{tau-1}) for the event (r, i_1..i_N)."""
    root, children, R, I = _pattern(spec)
    a, N = prior.a, len(children)
    a0, at = a / R, a / (R * I)
    s0 = stats.S0.get(r, 0)
    out = math.log(a0 + s0) - math.log(a + stats.total)
    seen = defaultdict(int)
    for n, v in enumerate(i):
        out += math.log(at + stats.S_shared.get((v, r), 0) + seen[v]) - math.log(at * I + N * s0 + n)
        seen[v] += 1
    return out


def tied_propose_latent(spec: ModelSpec, prior: PriorSpec, stats: TiedStats, i, rng):
    """Sample r given the visible indices; returns (r, log p_{tau,V}(i))."""
    _, _, R, _ = _pattern(spec)
    joint = np.array([tied_transition_logprob(spec, prior, stats, r, i) for r in range(R)])
    lp = float(logsumexp(joint))
    return int(rng.choice(R, p=np.exp(joint - lp))), lp


@dataclass
class _TiedState:
    S0: np.ndarray  # (M, R)
    Ssh: np.ndarray  # (M, I, R)


class TiedKernel:
    """Particle-population kernel for the tied model, interchangeable with FamilyKernel."""

    def __init__(self, spec: ModelSpec, prior: PriorSpec, X: SparseCountTensor):
        self.spec, self.prior = spec, prior
        self.root, self.children, self.R, self.I = _pattern(spec)
        if X.dims != tuple(spec.nodes[v].card for v in spec.visible):
            raise ValueError("tensor dims do not match the visible cardinalities")
        items = X.items()
        self.cells = np.array([idx for idx, _ in items], dtype=np.int64).reshape(len(items), len(X.dims))
        self.counts = np.array([c for _, c in items], dtype=np.int64)
        self.n_cells, self.n_latent = len(items), self.R
        N = len(self.children)
        self.N = N
        # number of earlier positions in the same token holding the same index
        dup = np.zeros_like(self.cells)
        for n in range(N):
            for m in range(n):
                dup[:, n] += self.cells[:, m] == self.cells[:, n]
        self.dup = dup
        a = prior.a
        self.a0, self.at = a / self.R, a / (self.R * self.I)
        # visible axis k is node spec.visible[k]
        self._vis_pos = [spec.visible.index(c) for c in self.children]

    def init(self, M: int) -> _TiedState:
        return _TiedState(np.zeros((M, self.R)), np.zeros((M, self.I, self.R)))

    def joint(self, state: _TiedState, cell: np.ndarray, step: int) -> np.ndarray:
        M = len(cell)
        rows = np.arange(M)[:, None]
        rr = np.arange(self.R)[None, :]
        s0 = state.S0
        out = np.log(self.a0 + s0) - math.log(self.prior.a + step)
        denom = self.at * self.I + self.N * s0
        for n, k in enumerate(self._vis_pos):
            i_n = self.cells[cell, k][:, None]
            g = state.Ssh[rows, i_n, rr] + self.dup[cell, k][:, None]
            out += np.log(self.at + g) - np.log(denom + n)
        return out

    def commit(self, state: _TiedState, cell: np.ndarray, ell: np.ndarray) -> None:
        rows = np.arange(len(cell))
        state.S0[rows, ell] += 1
        for k in self._vis_pos:
            state.Ssh[rows, self.cells[cell, k], ell] += 1

    def take(self, state: _TiedState, anc: np.ndarray) -> _TiedState:
        return _TiedState(state.S0[anc], state.Ssh[anc])

    def full_cell(self, cell: int, ell: int) -> tuple:
        c = [0] * self.spec.n_nodes
        for k, v in enumerate(self.spec.visible):
            c[v] = int(self.cells[cell, k])
        c[self.root] = int(ell)
        return tuple(c)

    def tables(self, state: _TiedState) -> list[np.ndarray]:
        T = float(self.counts.sum())
        root = (self.a0 + state.S0) / (self.prior.a + T)
        shared = (self.at + state.Ssh) / (self.at * self.I + self.N * state.S0)[:, None, :]
        return [root if n == self.root else shared for n in range(self.spec.n_nodes)]


def tied_smc_adapters(spec: ModelSpec, prior: PriorSpec, X: SparseCountTensor) -> TiedKernel:
    """Kernel consumed by the SMC engine for tied models."""
    return TiedKernel(spec, prior, X)
