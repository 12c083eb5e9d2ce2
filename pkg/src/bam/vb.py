"""Mean-field variational Bayes for the allocation model.

The variational posterior over allocations keeps, for every nonzero visible
cell, a distribution ``phi`` over the latent block.  Given ``phi`` the
optimal Dirichlet and Gamma factors are available in closed form, so the
bound is evaluated as a function of ``phi`` alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .layout import DEFAULT_LATENT_CAP, Layout
from .model import ModelError, ModelSpec, PriorSpec, Violation, require_valid
from .tensor import SparseCountTensor


@dataclass
class VBState:
    phi: np.ndarray  # (nnz, L), rows sum to one
    expected_fam: list  # per node, dense over the family cells
    expected_par: list
    alpha_hat: list
    a_hat: float
    expected_total: float
    elbo: float
    trace: list = field(default_factory=list)
    iterations: int = 0


class VBProblem:
    """Precomputed index maps for one (X, spec, prior) triple."""

    def __init__(self, X: SparseCountTensor, spec: ModelSpec, prior: PriorSpec,
                 latent_cap: int = DEFAULT_LATENT_CAP):
        require_valid(spec)
        if spec.is_tied:
            raise ModelError([Violation("unsupported-tying-pattern", "VB supports untied models only")])
        if X.mask:
            raise ValueError("VB needs a fully observed tensor")
        self.X, self.spec, self.prior = X, spec, prior
        self.lay = Layout(spec, prior, X, latent_cap)
        self.x = self.lay.counts.astype(float)
        self.T = float(self.x.sum())
        self.log_fact_x = float(gammaln(self.x + 1).sum())

    def expected(self, phi: np.ndarray):
        lay = self.lay
        E = self.x[:, None] * phi
        fam = [np.bincount(fi.ravel(), E.ravel(), minlength=s) for fi, s in zip(lay.fam_idx, lay.fam_size)]
        par = [np.bincount(pi.ravel(), E.ravel(), minlength=s) for pi, s in zip(lay.par_idx, lay.par_size)]
        return E, fam, par

    def state_from_phi(self, phi: np.ndarray, trace=None, iterations=0) -> VBState:
        E, fam, par = self.expected(phi)
        alpha_hat = [al.value + f for al, f in zip(self.lay.alpha, fam)]
        st = VBState(phi, fam, par, alpha_hat, self.prior.a + self.T, self.T, 0.0,
                     list(trace or []), iterations)
        st.elbo = self.elbo(st, E)
        st.trace.append(st.elbo)
        return st

    def elbo(self, st: VBState, E=None) -> float:
        a, b, T = self.prior.a, self.prior.b, st.expected_total
        if E is None:
            E = self.x[:, None] * st.phi
        out = a * math.log(b) - (a + T) * math.log1p(b) + math.lgamma(a + T) - math.lgamma(a)
        for al, f, p in zip(self.lay.alpha, st.expected_fam, st.expected_par):
            out += float(np.sum(gammaln(al.value + f)) - f.size * math.lgamma(al.value))
            out -= float(np.sum(gammaln(al.parent_value + p)) - p.size * math.lgamma(al.parent_value))
        out -= self.log_fact_x
        pos = E > 0
        out -= float(np.sum(E[pos] * np.log(st.phi[pos])))
        return out

    def update(self, st: VBState) -> VBState:
        lay = self.lay
        logits = np.zeros((lay.n_cells, lay.n_latent))
        for n, al in enumerate(lay.alpha):
            logits += digamma(st.alpha_hat[n])[lay.fam_idx[n]]
            logits -= digamma(al.parent_value + st.expected_par[n])[lay.par_idx[n]]
        phi = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        return self.state_from_phi(phi, st.trace, st.iterations + 1)

    def init(self, rng) -> VBState:
        phi = rng.dirichlet(np.ones(self.lay.n_latent), size=self.lay.n_cells)
        return self.state_from_phi(phi)


def vb_update(X, spec, prior, state: VBState) -> VBState:
    return VBProblem(X, spec, prior).update(state)


def elbo(X, spec, prior, state: VBState) -> float:
    return VBProblem(X, spec, prior).elbo(state)


def run_vb(X: SparseCountTensor, spec: ModelSpec, prior: PriorSpec, restarts: int = 1,
           max_iters: int = 2000, tol: float = 1e-8, seed: int = 0,
           latent_cap: int = DEFAULT_LATENT_CAP) -> VBState:
    """Best state over ``restarts`` random initializations."""
    prob = VBProblem(X, spec, prior, latent_cap)
    best = None
    for ss in np.random.SeedSequence(seed).spawn(max(restarts, 1)):
        st = prob.update(prob.init(np.random.default_rng(ss)))
        while st.iterations < max_iters and not abs(st.trace[-1] - st.trace[-2]) < tol:
            st = prob.update(st)
        if best is None or st.elbo > best.elbo:
            best = st
    return best
