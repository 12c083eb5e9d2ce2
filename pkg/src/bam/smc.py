"""Sequential importance sampling for the allocation model, with and without resampling.

Visible indices are proposed by drawing the remaining tokens of X uniformly
without replacement; latent indices are drawn from the exact urn conditional
by enumerating the latent block.  The particle population is held in dense
per-family count arrays so that one step is a handful of numpy operations
over all particles.

A scalar reference path over :class:`FamilyStats` (``propose_visible``,
``propose_latent``, ``sis_step``) is kept for testing and small problems.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .layout import DEFAULT_LATENT_CAP, Layout, LatentSpaceTooLarge
from .model import ModelSpec, PriorSpec, alpha_family, require_valid
from .tensor import FamilyStats, SparseCountTensor
from .urn import log_prob_total, transition_logprob

SCHEMES = ("multinomial", "residual", "stratified", "systematic")
SCHEDULES = ("always", "adaptive", "never")


class AllWeightsZero(RuntimeError):
    """Every particle has zero weight: X is impossible under the model."""


class ExhaustedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SmcConfig:
    particles: int = 1000
    seed: int = 0
    resampling: str = "systematic"
    schedule: str = "adaptive"
    threshold: float = 0.5
    latent_cap: int = DEFAULT_LATENT_CAP

    def __post_init__(self):
        if self.particles < 1:
            raise ValueError("need at least one particle")
        if self.resampling not in SCHEMES:
            raise ValueError(f"unknown resampling scheme {self.resampling!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 < self.threshold <= 1:
            raise ValueError("ESS threshold must lie in (0, 1]")


@dataclass
class ParticleSet:
    """Final particle population: kernel-owned count arrays plus weights."""

    kernel: object
    state: object
    log_weights: np.ndarray  # normalized, logsumexp == 0

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


@dataclass
class SmcEstimate:
    log_Z: float
    log_Z0: float
    ess_trace: np.ndarray
    resample_steps: list[int]
    particles: ParticleSet | None = None
    trajectory: dict | None = None


# --- resampling ----------------------------------------------------------


def normalized_weights(log_w: np.ndarray) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    m = np.max(log_w)
    if not np.isfinite(m):
        raise AllWeightsZero("all particle weights are zero")
    w = np.exp(log_w - m)
    return w / w.sum()


def ess(log_w: np.ndarray) -> float:
    """(sum w)^2 / sum w^2, computed from log weights."""
    w = normalized_weights(log_w)
    return float(1.0 / np.sum(w * w))


def _search(cum, u, M):
    return np.minimum(np.searchsorted(cum, u, side="right"), M - 1)


def resample_indices(w: np.ndarray, scheme: str, rng: np.random.Generator, M: int | None = None) -> np.ndarray:
    """Ancestor indices (sorted) of ``M`` offspring drawn from normalized weights ``w``."""
    w = np.asarray(w, dtype=float)
    n = len(w)
    M = n if M is None else M
    cum = np.cumsum(w)
    cum[-1] = 1.0
    if scheme == "multinomial":
        return _search(cum, np.sort(rng.random(M)), n)
    if scheme == "stratified":
        return _search(cum, (np.arange(M) + rng.random(M)) / M, n)
    if scheme == "systematic":
        return _search(cum, (np.arange(M) + rng.random()) / M, n)
    if scheme == "residual":
        base = np.floor(M * w).astype(np.int64)
        k = M - int(base.sum())
        idx = np.repeat(np.arange(n), base)
        if k > 0:
            res = M * w - base
            res_cum = np.cumsum(res / res.sum())
            res_cum[-1] = 1.0
            idx = np.concatenate([idx, _search(res_cum, rng.random(k), n)])
        return np.sort(idx)
    raise ValueError(f"unknown resampling scheme {scheme!r}")


def log_z0(prior: PriorSpec, T: int) -> float:
    return log_prob_total(prior, T)


# --- vectorized kernel for untied models ----------------------------------


@dataclass
class _FamilyState:
    fam: list
    par: list


class FamilyKernel:
    """Urn transition kernel over a particle population for an untied DAG."""

    def __init__(self, spec: ModelSpec, prior: PriorSpec, X: SparseCountTensor,
                 latent_cap: int = DEFAULT_LATENT_CAP):
        self.spec, self.prior = spec, prior
        self.layout = lay = Layout(spec, prior, X, latent_cap)
        self.n_cells, self.n_latent, self.counts = lay.n_cells, lay.n_latent, lay.counts
        self._c = [al.value for al in lay.alpha]
        self._cp = [al.parent_value for al in lay.alpha]
        self._fam_idx = [fi if lat else fi[:, :1] for fi, lat in zip(lay.fam_idx, lay.fam_latent)]
        self._par_idx = [pi if lat else pi[:, :1] for pi, lat in zip(lay.par_idx, lay.par_latent)]

    def init(self, M: int) -> _FamilyState:
        lay = self.layout
        return _FamilyState(
            [np.zeros((M, s)) for s in lay.fam_size],
            [np.zeros((M, s)) for s in lay.par_size],
        )

    def joint(self, state: _FamilyState, cell: np.ndarray, step: int) -> np.ndarray:
        """(M, L) log transition probability of each latent completion."""
        M = len(cell)
        rows = np.arange(M)[:, None]
        out = np.zeros((M, self.n_latent))
        for n in range(len(self._c)):
            out += np.log(self._c[n] + state.fam[n][rows, self._fam_idx[n][cell]])
            if state.par[n].shape[1] == 1:
                out -= math.log(self._cp[n] + step)
            else:
                out -= np.log(self._cp[n] + state.par[n][rows, self._par_idx[n][cell]])
        return out

    def commit(self, state: _FamilyState, cell: np.ndarray, ell: np.ndarray) -> None:
        rows = np.arange(len(cell))
        lay = self.layout
        for n in range(len(self._c)):
            state.fam[n][rows, lay.fam_idx[n][cell, ell]] += 1
            state.par[n][rows, lay.par_idx[n][cell, ell]] += 1

    def take(self, state: _FamilyState, anc: np.ndarray) -> _FamilyState:
        return _FamilyState([f[anc] for f in state.fam], [p[anc] for p in state.par])

    def full_cell(self, cell: int, ell: int) -> tuple:
        return self.layout.full_cell(cell, ell)

    def tables(self, state: _FamilyState) -> list[np.ndarray]:
        """Posterior-mean conditional tables per particle, shaped (M, I_n, *parent cards)."""
        out = []
        for n in range(len(self._c)):
            shape = self.spec.family_shape(n)
            fam = (self._c[n] + state.fam[n]).reshape((-1,) + shape)
            par = (self._cp[n] + state.par[n]).reshape((-1, 1) + shape[1:])
            out.append(fam / par)
        return out


def make_kernel(spec: ModelSpec, prior: PriorSpec, X: SparseCountTensor,
                latent_cap: int = DEFAULT_LATENT_CAP):
    require_valid(spec)
    if X.mask:
        raise ValueError("SMC needs a fully observed tensor; use the exact module for missing entries")
    if spec.is_tied:
        from .tying import TiedKernel

        return TiedKernel(spec, prior, X)
    return FamilyKernel(spec, prior, X, latent_cap)


# --- engine ---------------------------------------------------------------


def _logmeanexp(log_w: np.ndarray) -> float:
    return float(logsumexp(log_w) - math.log(len(log_w)))


def _run(kernel, prior: PriorSpec, config: SmcConfig, seed_seq: np.random.SeedSequence,
         record: bool = False) -> SmcEstimate:
    M = config.particles
    counts = kernel.counts
    T = int(counts.sum())
    prop_ss, res_ss = seed_seq.spawn(2)
    rng = np.random.default_rng(prop_ss)
    res_rng = np.random.default_rng(res_ss)

    state = kernel.init(M)
    rows = np.arange(M)
    tokens = np.tile(np.repeat(np.arange(kernel.n_cells), counts), (M, 1))
    remaining = np.tile(counts, (M, 1))
    log_w = np.zeros(M)
    log_Z = log_z0(prior, T)
    log_Z0 = log_Z
    ess_trace = np.empty(T)
    resample_steps = []
    rec = None
    if record:
        rec = {"cell": np.empty((T, M), dtype=np.int64), "latent": np.empty((T, M), dtype=np.int64),
               "log_u": np.empty((T, M))}

    for tau in range(1, T + 1):
        k = T - tau + 1
        j = np.minimum((rng.random(M) * k).astype(np.int64), k - 1)
        cell = tokens[rows, j]
        tokens[rows, j] = tokens[rows, k - 1]
        r = remaining[rows, cell]

        joint = kernel.joint(state, cell, tau - 1)
        lp = logsumexp(joint, axis=1)
        if not np.isfinite(np.max(log_w + lp)):
            raise AllWeightsZero(f"all particle weights vanished at step {tau}")
        with np.errstate(invalid="ignore"):
            cdf = np.cumsum(np.exp(joint - lp[:, None]), axis=1)
        ell = np.minimum((cdf < rng.random(M)[:, None]).sum(axis=1), kernel.n_latent - 1)

        log_u = lp + math.log(k) - np.log(r)
        log_w += log_u
        kernel.commit(state, cell, ell)
        remaining[rows, cell] -= 1
        if rec is not None:
            rec["cell"][tau - 1], rec["latent"][tau - 1], rec["log_u"][tau - 1] = cell, ell, log_u

        ess_trace[tau - 1] = ess(log_w)
        fire = config.schedule == "always" or (
            config.schedule == "adaptive" and ess_trace[tau - 1] < config.threshold * M
        )
        if fire and tau < T:
            log_Z += _logmeanexp(log_w)
            anc = resample_indices(normalized_weights(log_w), config.resampling, res_rng)
            state = kernel.take(state, anc)
            tokens, remaining = tokens[anc], remaining[anc]
            log_w = np.zeros(M)
            resample_steps.append(tau)

    if np.any(remaining):
        raise RuntimeError("particle did not hit the observed tensor")
    log_Z += _logmeanexp(log_w) if T else 0.0
    particles = ParticleSet(kernel, state, log_w - logsumexp(log_w))
    return SmcEstimate(float(log_Z), float(log_Z0), ess_trace, resample_steps, particles, rec)


def run_sis_r(X: SparseCountTensor, spec: ModelSpec, prior: PriorSpec,
              config: SmcConfig = SmcConfig(), record: bool = False) -> SmcEstimate:
    """Particle propagation with resampling according to ``config.schedule``."""
    kernel = make_kernel(spec, prior, X, config.latent_cap)
    return _run(kernel, prior, config, np.random.SeedSequence(config.seed), record)


def run_sis(X: SparseCountTensor, spec: ModelSpec, prior: PriorSpec,
            config: SmcConfig = SmcConfig(), record: bool = False) -> SmcEstimate:
    """M independent importance-sampling trajectories (no resampling)."""
    cfg = SmcConfig(config.particles, config.seed, config.resampling, "never",
                    config.threshold, config.latent_cap)
    return run_sis_r(X, spec, prior, cfg, record)


@dataclass
class RunSummary:
    log_Z: np.ndarray
    mean_log_Z: float
    log_mean_Z: float
    se_log_Z: float
    log_se_Z: float  # log of the standard error of the linear-scale mean
    mean_ess: float
    min_ess: float
    resample_events: float
    estimates: list = field(default_factory=list, repr=False)


def summarize(estimates: list[SmcEstimate]) -> RunSummary:
    lz = np.array([e.log_Z for e in estimates])
    R = len(lz)
    lme = float(logsumexp(lz) - math.log(R))
    if R > 1:
        # sample variance of exp(lz) in log space
        d = np.exp(lz - lme)
        var = np.sum((d - 1.0) ** 2) / (R - 1)
        log_se = lme + 0.5 * math.log(var / R) if var > 0 else -math.inf
        se = float(np.std(lz, ddof=1) / math.sqrt(R))
    else:
        log_se, se = -math.inf, 0.0
    traces = np.concatenate([e.ess_trace for e in estimates]) if estimates else np.array([])
    return RunSummary(
        lz, float(lz.mean()), lme, se, log_se,
        float(traces.mean()) if traces.size else float("nan"),
        float(traces.min()) if traces.size else float("nan"),
        float(np.mean([len(e.resample_steps) for e in estimates])),
        list(estimates),
    )


def run_many(X: SparseCountTensor, spec: ModelSpec, prior: PriorSpec,
             config: SmcConfig = SmcConfig(), runs: int = 1, threads: int = 1,
             keep_particles: bool = False) -> list[SmcEstimate]:
    """Independent SIS-R runs; run ``r`` uses the r-th child of the seed.

    Results are identical for every ``threads`` value since each run owns its
    random streams and results are collected in run order.
    """
    kernel = make_kernel(spec, prior, X, config.latent_cap)
    children = np.random.SeedSequence(config.seed).spawn(runs)

    def one(ss):
        est = _run(kernel, prior, config, ss)
        if not keep_particles:
            est.particles = None
        return est

    if threads <= 1 or runs == 1:
        return [one(ss) for ss in children]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, children))


# --- decomposition --------------------------------------------------------


@dataclass
class Decomposition:
    names: tuple[str, ...]
    tables: list[np.ndarray]  # per node: (I_n, *parent cards), columns sum to 1
    lambda_mean: float


def _stats_tables(spec, prior, stats: FamilyStats):
    out = []
    for n in range(spec.n_nodes):
        al = alpha_family(spec, prior, n)
        fam = np.full(spec.family_shape(n), al.value)
        par = np.full(spec.parent_shape(n), al.parent_value)
        for key, v in stats.fam[n].items():
            fam[key] += v
        for key, v in stats.par[n].items():
            par[key] += v
        out.append(fam / par[None])
    return out


def extract_decomposition(spec: ModelSpec, prior: PriorSpec, source, which: str = "mean") -> Decomposition:
    """Posterior-mean conditional tables.

    ``source`` is a :class:`FamilyStats`, a :class:`ParticleSet` or an
    :class:`SmcEstimate`.  For particle sets ``which`` selects the
    weight-averaged tables (``"mean"``) or those of the heaviest particle
    (``"best"``).
    """
    if isinstance(source, SmcEstimate):
        source = source.particles
    if isinstance(source, FamilyStats):
        return Decomposition(spec.names, _stats_tables(spec, prior, source),
                             (prior.a + source.total) / (prior.b + 1.0))
    ps: ParticleSet = source
    per_particle = ps.kernel.tables(ps.state)
    w = ps.weights
    if which == "best":
        i = int(np.argmax(ps.log_weights))
        tables = [t[i] for t in per_particle]
    elif which == "mean":
        tables = [np.tensordot(w, t, axes=1) for t in per_particle]
    else:
        raise ValueError("which must be 'mean' or 'best'")
    T = int(ps.kernel.counts.sum())
    return Decomposition(spec.names, tables, (prior.a + T) / (prior.b + 1.0))


def klnmf_factors(spec: ModelSpec, dec: Decomposition, T: int):
    """W = theta_{i|k} and H = T * theta_{k|j} theta_j for the j -> k -> i chain."""
    i, k, j = spec.index("i"), spec.index("k"), spec.index("j")
    if spec.parents[i] != (k,) or spec.parents[k] != (j,) or spec.parents[j] != ():
        raise ValueError("expected the j -> k -> i chain")
    W = dec.tables[i]
    H = T * dec.tables[k] * dec.tables[j][None, :]
    return W, H


def hoyer_sparsity(x) -> float:
    x = np.abs(np.asarray(x, dtype=float)).ravel()
    n = x.size
    if n < 2:
        return 1.0
    l2 = math.sqrt(float(np.sum(x * x)))
    if l2 == 0:
        return 0.0
    return (math.sqrt(n) - float(x.sum()) / l2) / (math.sqrt(n) - 1)


# --- scalar reference path ------------------------------------------------


@dataclass
class Particle:
    stats: FamilyStats
    log_weight: float = 0.0
    rng_stream: int = 0


def propose_visible(X: SparseCountTensor, stats: FamilyStats, rng) -> tuple:
    """Draw i_V with probability proportional to the tokens of X not yet placed."""
    items = X.items()
    rem = np.array([c - stats.visible_recon.get(idx, 0) for idx, c in items], dtype=float)
    left = rem.sum()
    if left <= 0:
        raise ExhaustedError("no remaining tokens")
    return items[int(rng.choice(len(items), p=rem / left))][0]


def latent_configurations(spec: ModelSpec, cap: int = DEFAULT_LATENT_CAP):
    size = math.prod(spec.nodes[m].card for m in spec.latent)
    if size > cap:
        raise LatentSpaceTooLarge(f"latent block has {size} configurations (cap {cap})")
    return list(itertools.product(*(range(spec.nodes[m].card) for m in spec.latent)))


def _assemble(spec, i_V, i_L):
    c = [0] * spec.n_nodes
    for v, i in zip(spec.visible, i_V):
        c[v] = i
    for m, i in zip(spec.latent, i_L):
        c[m] = i
    return tuple(c)


def propose_latent(spec: ModelSpec, prior: PriorSpec, stats: FamilyStats, i_V, rng,
                   cap: int = DEFAULT_LATENT_CAP, force=None):
    """Sample i_Vbar from the urn conditional; returns (i_Vbar, log p_{tau,V}(i_V))."""
    configs = latent_configurations(spec, cap)
    joint = np.array([transition_logprob(spec, prior, stats, _assemble(spec, i_V, cfg)) for cfg in configs])
    lp = float(logsumexp(joint))
    if force is not None:
        return tuple(force), lp
    k = int(rng.choice(len(configs), p=np.exp(joint - lp)))
    return configs[k], lp


def sis_step(X: SparseCountTensor, spec: ModelSpec, prior: PriorSpec, particle: Particle, rng,
             force_latent=None) -> Particle:
    T = X.total
    tau = particle.stats.total + 1
    i_V = propose_visible(X, particle.stats, rng)
    i_L, lp = propose_latent(spec, prior, particle.stats, i_V, rng, force=force_latent)
    left = X[i_V] - particle.stats.visible_recon.get(tuple(i_V), 0)
    log_u = lp + math.log(T - tau + 1) - math.log(left)
    particle.stats.increment(_assemble(spec, i_V, i_L))
    particle.log_weight += log_u
    return particle


def resample(particles: list[Particle], scheme: str, rng) -> list[Particle]:
    """Offspring particles (deep copies) with weights reset to zero."""
    w = normalized_weights(np.array([p.log_weight for p in particles]))
    anc = resample_indices(w, scheme, rng)
    return [Particle(particles[a].stats.copy(), 0.0, particles[a].rng_stream) for a in anc]


def weight_closed_form(X: SparseCountTensor, log_p: np.ndarray) -> float:
    """log(T! / prod X!) + sum_tau log p_{tau,V}."""
    return math.lgamma(X.total + 1) - X.log_factorial_sum() + float(np.sum(log_p))


def replay_log_p(spec: ModelSpec, prior: PriorSpec, cells: list[tuple]) -> np.ndarray:
    """Visible-marginal transition log probabilities along a trajectory of full cells."""
    stats = FamilyStats(spec, track_cells=False)
    configs = latent_configurations(spec)
    out = []
    for c in cells:
        i_V = tuple(c[v] for v in spec.visible)
        out.append(float(logsumexp([transition_logprob(spec, prior, stats, _assemble(spec, i_V, g))
                                    for g in configs])))
        stats.increment(c)
    return np.array(out)


__all__ = [
    "AllWeightsZero", "Decomposition", "FamilyKernel", "Particle", "ParticleSet", "SmcConfig",
    "SmcEstimate", "ess", "extract_decomposition", "hoyer_sparsity", "klnmf_factors",
    "log_z0", "make_kernel", "normalized_weights", "propose_latent", "propose_visible",
    "resample", "resample_indices", "run_many", "run_sis", "run_sis_r", "sis_step",
    "summarize", "weight_closed_form",
]
