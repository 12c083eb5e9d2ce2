"""Closed-form marginals and kernels of the Polya urn on a Bayesian network.

All probabilities are natural logs.  With flat family pseudo-counts the
multivariate Beta ratio of a family only involves the cells it touches:
untouched cells contribute ``lgamma(c) - lgamma(c) = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import ModelSpec, PriorSpec, alpha_family
from .tensor import FamilyStats, StatsError

lgamma = math.lgamma


@dataclass
class PosteriorFactors:
    """Gamma posterior of the intensity and Dirichlet posteriors of the tables.

    ``tables[n]`` maps each touched family configuration to its Dirichlet
    parameter; untouched configurations keep the flat ``alpha[n].value``.
    """

    lambda_shape: float
    lambda_rate: float
    alpha: list
    tables: list[dict]

    def dirichlet(self, n: int, parent_config: tuple) -> np.ndarray:
        """Full Dirichlet parameter vector of node ``n`` given its parents."""
        al = self.alpha[n]
        vec = np.full(al.shape[0], al.value)
        for key, v in self.tables[n].items():
            if key[1:] == tuple(parent_config):
                vec[key[0]] = v
        return vec


def log_beta_ratio(spec: ModelSpec, prior: PriorSpec, stats: FamilyStats, n: int) -> float:
    """log B_n(alpha_fa + S_fa) - log B_n(alpha_fa) over touched cells."""
    al = alpha_family(spec, prior, n)
    c, cp = al.value, al.parent_value
    lc, lcp = lgamma(c), lgamma(cp)
    out = 0.0
    for v in stats.fam[n].values():
        if v:
            out += lgamma(c + v) - lc
    for v in stats.par[n].values():
        if v:
            out -= lgamma(cp + v) - lcp
    return out


def log_prob_total(prior: PriorSpec, T: int) -> float:
    """Negative-binomial log probability of observing T tokens."""
    if T < 0:
        return -math.inf
    a, b = prior.a, prior.b
    return (
        lgamma(a + T) - lgamma(a) - lgamma(T + 1)
        + a * (math.log(b) - math.log1p(b)) - T * math.log1p(b)
    )


def _log_factorials(stats, log_factorial_term):
    if log_factorial_term is not None:
        return log_factorial_term
    if stats.cells is None:
        raise StatsError("log_factorial_term required when cells are not tracked")
    return stats.log_factorial_sum()


def log_marginal_given_total(spec: ModelSpec, prior: PriorSpec, stats: FamilyStats,
                             log_factorial_term: float | None = None) -> float:
    """log pi_{S+}(S): Bayesian-network score times the multinomial coefficient."""
    score = sum(log_beta_ratio(spec, prior, stats, n) for n in range(spec.n_nodes))
    return score + lgamma(stats.total + 1) - _log_factorials(stats, log_factorial_term)


def log_marginal_allocation(spec: ModelSpec, prior: PriorSpec, stats: FamilyStats,
                            log_factorial_term: float | None = None) -> float:
    """log pi(S), the marginal probability of the allocation tensor."""
    return log_prob_total(prior, stats.total) + log_marginal_given_total(
        spec, prior, stats, log_factorial_term
    )


def log_sequence_prob(spec: ModelSpec, prior: PriorSpec, stats: FamilyStats) -> float:
    """Probability of any one token ordering that ends in ``stats``."""
    return sum(log_beta_ratio(spec, prior, stats, n) for n in range(spec.n_nodes))


def transition_logprob(spec: ModelSpec, prior: PriorSpec, stats: FamilyStats, c) -> float:
    """log f(S + e_c | S): product of family predictive ratios."""
    out = 0.0
    for n in range(spec.n_nodes):
        al = alpha_family(spec, prior, n)
        fa = tuple(c[m] for m in spec.family(n))
        pa = fa[1:]
        out += math.log(al.value + stats.fam[n].get(fa, 0))
        out -= math.log(al.parent_value + stats.par[n].get(pa, 0))
    return out


def sample_transition(spec: ModelSpec, prior: PriorSpec, stats: FamilyStats, rng) -> tuple:
    """Draw the next cell node by node in topological order."""
    c = [0] * spec.n_nodes
    for n in spec.topological_order():
        al = alpha_family(spec, prior, n)
        pa = tuple(c[m] for m in spec.parents[n])
        table = stats.fam[n]
        w = np.array([al.value + table.get((i,) + pa, 0) for i in range(spec.nodes[n].card)])
        c[n] = int(rng.choice(len(w), p=w / w.sum()))
    return tuple(c)


def reverse_transition_logprob(stats: FamilyStats, c) -> float:
    """log of removing one token from cell ``c`` uniformly at random."""
    k = stats.cell_count(c)
    if k < 1:
        raise StatsError(f"cell {tuple(c)} is empty")
    return math.log(k) - math.log(stats.total)


def effective_parameters(spec: ModelSpec, stats: FamilyStats) -> int:
    """Active family configurations minus active parent configurations."""
    return sum(
        sum(1 for v in stats.fam[n].values() if v > 0) - sum(1 for v in stats.par[n].values() if v > 0)
        for n in range(spec.n_nodes)
    )


def posterior_factors(spec: ModelSpec, prior: PriorSpec, stats: FamilyStats) -> PosteriorFactors:
    alpha = [alpha_family(spec, prior, n) for n in range(spec.n_nodes)]
    tables = [
        {k: alpha[n].value + v for k, v in stats.fam[n].items() if v}
        for n in range(spec.n_nodes)
    ]
    return PosteriorFactors(prior.a + stats.total, prior.b + 1.0, alpha, tables)


def all_cells(spec: ModelSpec):
    """Iterate over the full index space (small models only)."""
    return np.ndindex(*spec.cards)


def transition_table(spec: ModelSpec, prior: PriorSpec, stats: FamilyStats) -> np.ndarray:
    """Dense array of transition log-probabilities over every cell."""
    out = np.empty(spec.cards)
    for c in all_cells(spec):
        out[c] = transition_logprob(spec, prior, stats, c)
    return out


def log_normalizer(spec: ModelSpec, prior: PriorSpec, stats: FamilyStats) -> float:
    return float(logsumexp(transition_table(spec, prior, stats)))


def simulate(spec: ModelSpec, prior: PriorSpec, rng, tokens: int | None = None):
    """Draw (S, X) from the generative model with explicit tables.

    Tables come from the flat Dirichlet priors (one shared table for tied
    children), the token count from Poisson(lambda) with lambda ~ Gamma(a, b)
    unless ``tokens`` is given.  Returns the full allocation tensor and its
    visible contraction.
    """
    from .model import tied_pattern
    from .tensor import SparseCountTensor, contract

    if tokens is None:
        lam = rng.gamma(prior.a, 1.0 / prior.b)
        tokens = int(rng.poisson(lam))
    tied = tied_pattern(spec) if spec.is_tied else None
    tables = {}
    for n in range(spec.n_nodes):
        al = alpha_family(spec, prior, n)
        tables[n] = rng.dirichlet(np.full(al.shape[0], al.value), size=al.shape[1:])
    if tied is not None:
        root, children = tied
        R, I = spec.nodes[root].card, spec.nodes[children[0]].card
        tables[root] = rng.dirichlet(np.full(R, prior.a / R))
        shared = rng.dirichlet(np.full(I, prior.a / (R * I)), size=R)
        for c in children:
            tables[c] = shared
    idx = np.zeros((tokens, spec.n_nodes), dtype=np.int64)
    for n in spec.topological_order():
        # conditional row of each token, looked up by its parent configuration
        p = tables[n].reshape(-1, spec.nodes[n].card)
        flat = np.zeros(tokens, dtype=np.int64)
        for m in spec.parents[n]:
            flat = flat * spec.nodes[m].card + idx[:, m]
        rows = p[flat] if spec.parents[n] else np.broadcast_to(p[0], (tokens, p.shape[1]))
        u = rng.random(tokens)[:, None]
        idx[:, n] = np.minimum((np.cumsum(rows, axis=1) < u).sum(axis=1), spec.nodes[n].card - 1)
    cells, counts = np.unique(idx, axis=0, return_counts=True) if tokens else (np.zeros((0, spec.n_nodes)), [])
    S = SparseCountTensor(spec.cards, {tuple(int(v) for v in c): int(k) for c, k in zip(cells, counts)})
    return S, contract(S, spec.visible)
