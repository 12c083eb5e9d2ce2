"""Exhaustive enumeration of allocation tensors compatible with an observation.

Every visible cell ``X(i_V)`` is split over the latent block in all possible
ways.  States are decoded in chunks from a mixed-radix index (first nonzero
cell most significant, compositions in colex order), scored in bulk and
folded into a streaming log-sum-exp, so memory stays bounded by the chunk
size.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import comb, gammaln, logsumexp

from .layout import Layout
from .model import ModelSpec, PriorSpec, require_valid, tied_pattern
from .tensor import SparseCountTensor
from .urn import log_prob_total

DEFAULT_CAP = 10**8
CHUNK = 1 << 15


class SearchSpaceTooLarge(ValueError):
    pass


def compositions(x: int, parts: int) -> np.ndarray:
    """All vectors of ``parts`` nonnegative ints summing to ``x``, in colex order."""
    if parts == 1:
        return np.array([[x]], dtype=np.int64)
    out = []
    # stars and bars: choose divider positions, ascending bars give colex order
    for bars in itertools.combinations(range(x + parts - 1), parts - 1):
        b = (-1,) + bars + (x + parts - 1,)
        out.append([b[k + 1] - b[k] - 1 for k in range(parts)])
    out = np.array(out, dtype=np.int64)
    # colex: compare from the last coordinate
    order = np.lexsort(out.T)
    return out[order]


def count_compatible(X: SparseCountTensor, spec: ModelSpec) -> int:
    L = math.prod(spec.nodes[m].card for m in spec.latent)
    return math.prod(math.comb(c + L - 1, L - 1) for _, c in X.items())


class _Enumerator:
    def __init__(self, X: SparseCountTensor, spec: ModelSpec, prior: PriorSpec, cap: int):
        require_valid(spec)
        total = count_compatible(X, spec)
        if total > cap:
            raise SearchSpaceTooLarge(f"{total} compatible allocation tensors exceed the cap {cap}")
        self.spec, self.prior, self.X = spec, prior, X
        self.total_states = total
        self.lay = lay = Layout(spec, prior, X, latent_cap=max(cap, 1))
        self.comps = [compositions(int(c), lay.n_latent) for c in lay.counts]
        self.radix = np.array([len(c) for c in self.comps], dtype=np.int64)
        self.T = lay.total
        NL = lay.n_cells * lay.n_latent
        rows = np.arange(NL)

        def onehot(idx, size):
            if NL * size <= 4_000_000:
                m = np.zeros((NL, size))
                m[rows, idx.ravel()] = 1.0
                return m
            return sparse.csr_matrix((np.ones(NL), (rows, idx.ravel())), shape=(NL, size))

        self.fam_onehot = [onehot(fi, size) for fi, size in zip(lay.fam_idx, lay.fam_size)]
        self.par_onehot = [onehot(pi, size) for pi, size in zip(lay.par_idx, lay.par_size)]
        self.tied = tied_pattern(spec) if spec.is_tied else None
        self.const = log_prob_total(prior, self.T) + math.lgamma(self.T + 1)
        # log-gamma tables over integer counts 0..N*T
        ks = np.arange(self.T * max(spec.n_nodes, 1) + 1, dtype=float)
        self.lfact = gammaln(ks + 1.0)
        self.fam_table = [gammaln(al.value + ks) - math.lgamma(al.value) for al in lay.alpha]
        self.par_table = [gammaln(al.parent_value + ks) - math.lgamma(al.parent_value) for al in lay.alpha]

    def states(self, start: int, stop: int) -> np.ndarray:
        """Decode states ``start..stop-1`` into (B, nnz, L) count arrays."""
        idx = np.arange(start, stop, dtype=np.int64)
        lay = self.lay
        out = np.empty((len(idx), lay.n_cells, lay.n_latent), dtype=np.int64)
        for v in range(lay.n_cells - 1, -1, -1):
            out[:, v, :] = self.comps[v][idx % self.radix[v]]
            idx //= self.radix[v]
        return out

    def family_counts(self, S: np.ndarray):
        flat = S.reshape(len(S), -1).astype(float)

        def mult(oh):
            out = flat @ oh
            return np.rint(np.asarray(out)).astype(np.int64)

        return [mult(oh) for oh in self.fam_onehot], [mult(oh) for oh in self.par_onehot]

    def score(self, S: np.ndarray) -> np.ndarray:
        """log pi(S) for a batch of allocation tensors."""
        fam, par = self.family_counts(S)
        out = self.const - self.lfact[S].sum(axis=(1, 2))
        if self.tied is not None:
            return out + self._tied_events(fam)
        for n in range(len(fam)):
            out += self.fam_table[n][fam[n]].sum(axis=1)
            out -= self.par_table[n][par[n]].sum(axis=1)
        return out

    def _tied_events(self, fam):
        root, children = self.tied
        spec, a = self.spec, self.prior.a
        R, I, N = spec.nodes[root].card, spec.nodes[children[0]].card, len(children)
        a0, at = a / R, a / (R * I)
        s0 = fam[root]
        shared = sum(fam[c] for c in children)  # (B, I*R), flat order (i, r)
        out = (gammaln(a0 + s0) - math.lgamma(a0)).sum(axis=1) - (math.lgamma(a + self.T) - math.lgamma(a))
        out += (gammaln(at + shared) - math.lgamma(at)).sum(axis=1)
        out -= (gammaln(at * I + N * s0) - math.lgamma(at * I)).sum(axis=1)
        return out

    def chunks(self, chunk: int = CHUNK):
        for start in range(0, self.total_states, chunk):
            yield start, min(start + chunk, self.total_states)


def _stream_lse(values_iter) -> float:
    acc = -math.inf
    for v in values_iter:
        if len(v):
            acc = float(np.logaddexp(acc, logsumexp(v)))
    return acc


def enumerate_compatible(X: SparseCountTensor, spec: ModelSpec, cap: int = DEFAULT_CAP):
    """Yield every allocation tensor S with S_V = X exactly once."""
    en = _Enumerator(X, spec, PriorSpec(), cap)
    lay = en.lay
    for start, stop in en.chunks():
        for S in en.states(start, stop):
            entries = {}
            for v in range(lay.n_cells):
                for ell in range(lay.n_latent):
                    if S[v, ell]:
                        entries[lay.full_cell(v, ell)] = int(S[v, ell])
            yield SparseCountTensor(spec.cards, entries)


def exact_log_marginal(X: SparseCountTensor, spec: ModelSpec, prior: PriorSpec,
                       cap: int = DEFAULT_CAP) -> float:
    """log of the marginal likelihood of X (sum of pi(S) over compatible S)."""
    if X.mask:
        raise ValueError("masked tensor: use exact_missing_posterior")
    en = _Enumerator(X, spec, prior, cap)
    if en.T == 0:
        return log_prob_total(prior, 0)
    return _stream_lse(en.score(en.states(s, e)) for s, e in en.chunks())


def exact_log_marginal_twopass(X, spec, prior, cap: int = DEFAULT_CAP) -> float:
    """Same quantity with all scores held in memory (reference for the streaming sum)."""
    en = _Enumerator(X, spec, prior, cap)
    vals = np.concatenate([en.score(en.states(s, e)) for s, e in en.chunks()])
    m = vals.max()
    return float(m + math.log(np.sum(np.exp(vals - m))))


def complete_graph_log_marginal(X: SparseCountTensor, prior: PriorSpec) -> float:
    """Closed form for a model where every node is observed and the joint table is flat."""
    a, T = prior.a, X.total
    c = a / math.prod(X.dims)
    out = log_prob_total(prior, T) + math.lgamma(T + 1) - X.log_factorial_sum()
    out += sum(math.lgamma(c + v) - math.lgamma(c) for v in X.entries.values())
    return out - (math.lgamma(a + T) - math.lgamma(a))


def exact_missing_posterior(X: SparseCountTensor, spec: ModelSpec, prior: PriorSpec,
                            T_range, cap: int = DEFAULT_CAP) -> dict[int, float]:
    """log Pr(S+ = T, observed X) for every T in ``T_range``."""
    masked = sorted(X.mask)
    T_obs = X.total
    out = {}
    for T in T_range:
        extra = T - T_obs
        if extra < 0:
            out[T] = -math.inf
            continue
        if not masked:
            out[T] = exact_log_marginal(SparseCountTensor(X.dims, X.entries), spec, prior, cap) if extra == 0 else -math.inf
            continue
        terms = []
        for comp in compositions(extra, len(masked)):
            entries = dict(X.entries)
            for cell, v in zip(masked, comp):
                if v:
                    entries[cell] = int(v)
            terms.append(exact_log_marginal(SparseCountTensor(X.dims, entries), spec, prior, cap))
        out[T] = float(logsumexp(terms))
    return out


@dataclass
class Histogram:
    edges: np.ndarray
    log_mass: np.ndarray  # log of the summed pi(S) in each bin (-inf when empty)
    counts: np.ndarray  # number of tensors per bin
    dep_values: np.ndarray
    dep_counts: np.ndarray
    log_total: float


def scores_and_dep(X: SparseCountTensor, spec: ModelSpec, prior: PriorSpec, cap: int = DEFAULT_CAP):
    """log pi(S) and d_EP(S) for every compatible S, in enumeration order."""
    en = _Enumerator(X, spec, prior, cap)
    scores, deps = [], []
    for s, e in en.chunks():
        S = en.states(s, e)
        scores.append(en.score(S))
        fam, par = en.family_counts(S)
        deps.append(sum((f > 0).sum(axis=1) - (p > 0).sum(axis=1) for f, p in zip(fam, par)))
    return np.concatenate(scores), np.concatenate(deps).astype(np.int64)


def marginal_histogram(X: SparseCountTensor, spec: ModelSpec, prior: PriorSpec, bins: int = 100,
                       cap: int = DEFAULT_CAP) -> Histogram:
    scores, deps = scores_and_dep(X, spec, prior, cap)
    lo, hi = float(scores.min()), float(scores.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    which = np.clip(np.searchsorted(edges, scores, side="right") - 1, 0, bins - 1)
    counts = np.bincount(which, minlength=bins)
    log_mass = np.full(bins, -math.inf)
    for b in np.unique(which):
        log_mass[b] = logsumexp(scores[which == b])
    dv, dc = np.unique(deps, return_counts=True)
    return Histogram(edges, log_mass, counts, dv, dc, float(logsumexp(scores)))


def histogram_modes(hist: Histogram) -> np.ndarray:
    """Centres of bins that hold more tensors than both neighbours."""
    c = hist.counts
    centres = 0.5 * (hist.edges[1:] + hist.edges[:-1])
    padded = np.concatenate([[0], c, [0]])
    peak = (c > padded[:-2]) & (c >= padded[2:]) & (c > 0)
    return centres[peak]


def composition_count(x: int, parts: int) -> int:
    return int(comb(x + parts - 1, parts - 1, exact=True))
