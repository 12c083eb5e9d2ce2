import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bam.exact import exact_log_marginal
from bam.layout import Layout, LatentSpaceTooLarge
from bam.model import PriorSpec, build_catalog_model
from bam.smc import (AllWeightsZero, Particle, SmcConfig, ess, extract_decomposition, hoyer_sparsity,
                     klnmf_factors, make_kernel, normalized_weights, propose_latent, replay_log_p,
                     resample_indices, run_many, run_sis, run_sis_r, sis_step, summarize, weight_closed_form)
from bam.tensor import FamilyStats, SparseCountTensor
from conftest import S_SMALL, X1, X2

KLNMF = lambda X, K: build_catalog_model("klnmf", (X.dims[0], K, X.dims[1]))  # noqa: E731
SCHEMES = ["multinomial", "stratified", "systematic", "residual"]
weights = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40).filter(lambda w: sum(w) > 1e-6)


class TestResampling:
    @given(weights, st.sampled_from(SCHEMES), st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_indices_valid(self, w, scheme, seed):
        w = np.array(w) / np.sum(w)
        anc = resample_indices(w, scheme, np.random.default_rng(seed))
        assert len(anc) == len(w)
        assert np.all((anc >= 0) & (anc < len(w)))
        assert np.all(np.diff(anc) >= 0)
        assert np.all(w[anc] > 0)

    @given(weights, st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_offspring_bounds(self, w, seed):
        w = np.array(w) / np.sum(w)
        M = len(w)
        counts = {s: np.bincount(resample_indices(w, s, np.random.default_rng(seed)), minlength=M)
                  for s in ("systematic", "stratified", "residual")}
        eps = 1e-9
        assert np.all(np.abs(counts["systematic"] - M * w) < 1 + eps)
        assert np.all(np.abs(counts["stratified"] - M * w) < 2 + eps)
        assert np.all(counts["residual"] >= np.floor(M * w - eps))

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_unbiased_offspring(self, scheme):
        w = np.array([0.5, 0.25, 0.15, 0.1])
        rng = np.random.default_rng(0)
        n = np.mean([np.bincount(resample_indices(w, scheme, rng), minlength=4) for _ in range(20000)], axis=0)
        np.testing.assert_allclose(n, 4 * w, atol=0.03)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            resample_indices(np.array([1.0]), "bogus", np.random.default_rng(0))


class TestWeights:
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=50))
    def test_ess_bounds(self, lw):
        e = ess(np.array(lw))
        assert 1.0 - 1e-9 <= e <= len(lw) + 1e-9

    def test_ess_uniform(self):
        assert ess(np.zeros(7)) == pytest.approx(7.0)

    def test_normalized(self):
        w = normalized_weights(np.array([0.0, math.log(3.0)]))
        np.testing.assert_allclose(w, [0.25, 0.75])


class TestEstimator:
    def test_single_latent_state_is_exact(self):
        spec, prior = KLNMF(X1, 1), PriorSpec(1.0, 1.0)
        est = run_sis(X1, spec, prior, SmcConfig(20, 1))
        assert est.log_Z == pytest.approx(exact_log_marginal(X1, spec, prior), abs=1e-10)

    def test_weight_identity(self):
        spec, prior = KLNMF(X2, 2), PriorSpec(0.4, 1.0)
        est = run_sis(X2, spec, prior, SmcConfig(30, 2), record=True)
        tr, kern = est.trajectory, est.particles.kernel
        for m in range(30):
            cells = [kern.full_cell(c, l) for c, l in zip(tr["cell"][:, m], tr["latent"][:, m])]
            assert tr["log_u"][:, m].sum() == pytest.approx(weight_closed_form(X2, replay_log_p(spec, prior, cells)),
                                                            abs=1e-10)

    @pytest.mark.parametrize("schedule", ["never", "always", "adaptive"])
    def test_agrees_with_exact(self, schedule):
        spec, prior = KLNMF(X2, 2), PriorSpec(1.0, 1.0)
        s = summarize(run_many(X2, spec, prior, SmcConfig(500, 3, schedule=schedule), runs=20))
        exact = exact_log_marginal(X2, spec, prior)
        assert abs(math.exp(s.log_mean_Z - exact) - 1) < 4 * math.exp(s.log_se_Z - exact) + 1e-3

    def test_resample_bookkeeping(self):
        est = run_sis_r(X1, KLNMF(X1, 3), PriorSpec(), SmcConfig(100, 0, schedule="always"))
        assert est.resample_steps == list(range(1, X1.total))
        assert len(est.ess_trace) == X1.total

    def test_log_z0(self):
        from bam.urn import log_prob_total
        est = run_sis(X1, KLNMF(X1, 2), PriorSpec(2.0, 0.5), SmcConfig(10, 0))
        assert est.log_Z0 == pytest.approx(log_prob_total(PriorSpec(2.0, 0.5), X1.total))

    def test_thread_count_invariance(self):
        spec, prior, cfg = KLNMF(X2, 3), PriorSpec(), SmcConfig(100, 9)
        one = [e.log_Z for e in run_many(X2, spec, prior, cfg, runs=6, threads=1)]
        many = [e.log_Z for e in run_many(X2, spec, prior, cfg, runs=6, threads=4)]
        assert one == many

    def test_seed_reproducible(self):
        cfg = SmcConfig(50, 4)
        a = run_sis_r(X1, KLNMF(X1, 2), PriorSpec(), cfg).log_Z
        b = run_sis_r(X1, KLNMF(X1, 2), PriorSpec(), cfg).log_Z
        assert a == b

    def test_all_weights_zero(self, monkeypatch):
        kernel = make_kernel(KLNMF(X1, 2), PriorSpec(), X1)
        monkeypatch.setattr(type(kernel), "joint", lambda self, s, c, t: np.full((len(c), self.n_latent), -np.inf))
        with pytest.raises(AllWeightsZero):
            run_sis(X1, KLNMF(X1, 2), PriorSpec(), SmcConfig(5, 0))

    def test_mask_rejected(self):
        X = SparseCountTensor((2, 2), {(0, 0): 1}, mask=[(1, 1)])
        with pytest.raises(ValueError):
            run_sis(X, KLNMF(X, 2), PriorSpec())


class TestScalarPath:
    def test_step_weight_matches_closed_form(self, rng):
        spec, prior = KLNMF(S_SMALL, 2), PriorSpec(1.0, 1.0)
        p = Particle(FamilyStats(spec))
        cells = []
        for _ in range(S_SMALL.total):
            before = dict(p.stats.cells)
            sis_step(S_SMALL, spec, prior, p, rng)
            cells += [c for c, v in p.stats.cells.items() if v > before.get(c, 0)]
        assert dict(p.stats.visible_recon) == S_SMALL.entries
        assert p.log_weight == pytest.approx(weight_closed_form(S_SMALL, replay_log_p(spec, prior, cells)), abs=1e-12)

    def test_propose_latent_marginal(self, rng):
        from scipy.special import logsumexp
        from bam.urn import transition_logprob
        spec, prior = KLNMF(S_SMALL, 3), PriorSpec(1.0, 1.0)
        stats = FamilyStats(spec).increment((0, 2, 1))
        _, lp = propose_latent(spec, prior, stats, (0, 1), rng)
        want = logsumexp([transition_logprob(spec, prior, stats, (0, k, 1)) for k in range(3)])
        assert lp == pytest.approx(want)


class TestLayout:
    def test_indices_point_to_families(self):
        spec = KLNMF(X1, 2)
        lay = Layout(spec, PriorSpec(), X1)
        for v in range(lay.n_cells):
            for ell in range(lay.n_latent):
                c = lay.full_cell(v, ell)
                for n in range(spec.n_nodes):
                    fam = tuple(c[m] for m in spec.family(n))
                    assert lay.fam_idx[n][v, ell] == np.ravel_multi_index(fam, spec.family_shape(n))

    def test_latent_cap(self):
        with pytest.raises(LatentSpaceTooLarge):
            Layout(KLNMF(X1, 50), PriorSpec(), X1, latent_cap=10)


class TestDecomposition:
    def test_rank_one_factors(self):
        spec, prior = KLNMF(X1, 1), PriorSpec(1e-6, 1.0)
        est = run_sis(X1, spec, prior, SmcConfig(10, 0))
        W, H = klnmf_factors(spec, extract_decomposition(spec, prior, est), X1.total)
        dense = X1.to_dense()
        np.testing.assert_allclose(W[:, 0], dense.sum(1) / X1.total, atol=1e-5)
        np.testing.assert_allclose(H[0], dense.sum(0), atol=1e-4)
        np.testing.assert_allclose((W @ H).sum(), X1.total)

    @pytest.mark.parametrize("which", ["mean", "best"])
    def test_tables_are_conditionals(self, which):
        spec, prior = KLNMF(X2, 3), PriorSpec()
        est = run_sis_r(X2, spec, prior, SmcConfig(50, 1))
        dec = extract_decomposition(spec, prior, est, which)
        for t in dec.tables:
            np.testing.assert_allclose(t.sum(axis=0), 1.0)

    def test_hoyer(self):
        assert hoyer_sparsity(np.eye(4)) == pytest.approx((4 - 4 / 2) / 3)
        assert hoyer_sparsity([0, 0, 5, 0]) == pytest.approx(1.0)
        assert hoyer_sparsity(np.ones(9)) == pytest.approx(0.0)
