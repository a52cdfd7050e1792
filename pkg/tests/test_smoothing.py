import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from skeladv.exceptions import ConfigError, ContractError
from skeladv.model import LinearClassifier, forward
from skeladv.skeleton import SkeletonSequence
from skeladv.smoothing import (ABSTAIN_RADIUS, SmoothedClassifier, SmoothingConfig,
                               TemporalGaussianFilter, certified_radius, certify, certify_counts,
                               chi2_1_quantile, filter_batch, gaussian_kernel,
                               gaussian_temporal_filter, goodman_bounds, inverse_normal_cdf,
                               noisy_logits, normal_cdf, smoothed_predict, vote_counts)


def erf_series_cdf(x, terms=80):
    """Phi(x) from the Maclaurin series of erf; accurate for |x| < 3."""
    z = x / math.sqrt(2.0)
    s = sum((-1) ** n * z ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1)) for n in range(terms))
    return 0.5 * (1.0 + 2.0 / math.sqrt(math.pi) * s)


def direct_filter(signal, kernel):
    """Explicit-index convolution with edge-repeating reflection."""
    n, r = len(signal), len(kernel) // 2
    out = []
    for t in range(n):
        acc = 0.0
        for j in range(-r, r + 1):
            u = t + j
            while u < 0 or u >= n:
                u = -u - 1 if u < 0 else 2 * n - 1 - u
            acc += kernel[j + r] * signal[u]
        out.append(acc)
    return np.array(out)


class TestFilter:
    def test_kernel_one_identity(self, chain_seq):
        assert gaussian_temporal_filter(chain_seq, 1) == chain_seq

    def test_constant_unchanged(self, rng):
        seq = SkeletonSequence(np.repeat(rng.normal(size=(1, 4, 3)), 9, axis=0))
        out = gaussian_temporal_filter(seq, 5)
        assert np.allclose(out.coords, seq.coords, atol=1e-15, rtol=0)

    def test_linear_interior(self, rng):
        T = 12
        slope, icpt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        c = icpt[None] + np.arange(T)[:, None, None] * slope[None]
        out = gaussian_temporal_filter(SkeletonSequence(c), 5).coords
        assert np.max(np.abs(out[2:-2] - c[2:-2])) <= 1e-12

    def test_kernel_normalized_symmetric(self):
        k = gaussian_kernel(7, 1.5)
        assert k.sum() == pytest.approx(1.0, abs=1e-15)
        assert np.array_equal(k, k[::-1])

    def test_bad_kernel(self):
        with pytest.raises(ContractError):
            gaussian_kernel(4)
        with pytest.raises(ContractError):
            gaussian_kernel(3, 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([3, 5, 7]), st.integers(2, 12))
    def test_matches_direct_convolution(self, seed, ks, T):
        rng = np.random.default_rng(seed)
        c = rng.normal(size=(T, 2, 3))
        out = gaussian_temporal_filter(SkeletonSequence(c), ks).coords
        k = gaussian_kernel(ks)
        for i in range(2):
            for d in range(3):
                assert np.max(np.abs(out[:, i, d] - direct_filter(c[:, i, d], k))) <= 1e-12

    def test_padding_separates_runs(self, rng):
        c = rng.normal(size=(8, 2, 3))
        mask = np.array([1, 1, 1, 0, 0, 1, 1, 1], bool)
        c[~mask] = 0
        out = gaussian_temporal_filter(SkeletonSequence(c, mask), 3).coords
        assert np.all(out[~mask] == 0)
        k = gaussian_kernel(3)
        assert np.allclose(out[:3, 0, 0], direct_filter(c[:3, 0, 0], k), atol=1e-14)
        assert np.allclose(out[5:, 1, 2], direct_filter(c[5:, 1, 2], k), atol=1e-14)

    def test_batch_and_transformer_agree(self, rng):
        c = rng.normal(size=(3, 6, 2, 3))
        mask = np.ones((3, 6), bool)
        mask[1, 4:] = False
        c[1, 4:] = 0
        batch = filter_batch(c, mask, 5)
        seqs = [SkeletonSequence(c[i], mask[i]) for i in range(3)]
        single = TemporalGaussianFilter(5).fit().transform(seqs)
        for i in range(3):
            assert np.array_equal(batch[i], single[i].coords)


class TestNormalQuantile:
    def test_half(self):
        assert inverse_normal_cdf(0.5) == 0.0

    def test_phi_one(self):
        p = erf_series_cdf(1.0)
        assert p == pytest.approx(0.8413447461, abs=1e-10)
        assert inverse_normal_cdf(0.8413447461) == pytest.approx(1.0, abs=1e-6)
        assert inverse_normal_cdf(p) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-12, 1 - 1e-12))
    def test_symmetry_and_scipy(self, p):
        x = inverse_normal_cdf(p)
        if 1 - (1 - p) == p:
            assert x == pytest.approx(-inverse_normal_cdf(1 - p), abs=1e-9 * max(1, abs(x)))
        assert x == pytest.approx(stats.norm.ppf(p), rel=1e-10, abs=1e-10)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-2.5, 2.5))
    def test_inverts_series_cdf(self, x):
        assert inverse_normal_cdf(erf_series_cdf(x)) == pytest.approx(x, abs=1e-9)

    def test_domain(self):
        for p in (0.0, 1.0, -0.1):
            with pytest.raises(ContractError):
                inverse_normal_cdf(p)

    def test_array(self):
        out = inverse_normal_cdf(np.array([[0.5, normal_cdf(1.0)]]))
        assert out.shape == (1, 2) and out[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_chi2(self):
        for q in (0.5, 0.95, 0.99, 0.9999):
            assert chi2_1_quantile(q) == pytest.approx(stats.chi2.ppf(q, 1), rel=1e-9)


def goodman_oracle(count, n, alpha, k):
    b = stats.chi2.ppf(1 - alpha / k, 1)
    lo = (b + 2 * count - math.sqrt(b * (b + 4 * count * (n - count) / n))) / (2 * (n + b))
    hi = (b + 2 * count + math.sqrt(b * (b + 4 * count * (n - count) / n))) / (2 * (n + b))
    return max(lo, 0.0), min(hi, 1.0)


class TestGoodman:
    def test_all_in_one_class(self):
        pA, pB = goodman_bounds([1000, 0, 0, 0], alpha=0.05)
        assert pA > 0.99
        assert pA == pytest.approx(goodman_oracle(1000, 1000, 0.05, 4)[0], rel=1e-9)
        assert pB == pytest.approx(goodman_oracle(0, 1000, 0.05, 4)[1], rel=1e-9)

    def test_single_sample(self):
        pA, pB = goodman_bounds([1, 0])
        assert 0 <= pA <= 1 and 0 <= pB <= 1

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 300), min_size=2, max_size=6).filter(lambda c: sum(c) > 0),
           st.floats(0.001, 0.2))
    def test_matches_formula(self, counts, alpha):
        n = sum(counts)
        order = sorted(range(len(counts)), key=lambda i: (-counts[i], i))
        pA, pB = goodman_bounds(counts, alpha=alpha)
        assert pA == pytest.approx(goodman_oracle(counts[order[0]], n, alpha, len(counts))[0],
                                   rel=1e-8, abs=1e-12)
        assert pB == pytest.approx(goodman_oracle(counts[order[1]], n, alpha, len(counts))[1],
                                   rel=1e-8, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ContractError):
            goodman_bounds([3, 2], n=6)
        with pytest.raises(ContractError):
            goodman_bounds([0, 0])
        with pytest.raises(ContractError):
            goodman_bounds([1, -1, 2])

    def test_tighter_with_more_samples(self):
        cfg = SmoothingConfig(sigma=0.02)
        radii = [certify_counts([n, 0, 0, 0], cfg, 0).radius for n in (100, 1000, 10000)]
        assert radii[0] > 0 and radii[0] < radii[1] < radii[2]

    def test_coverage(self):
        rng = np.random.default_rng(7)
        p = np.array([0.6, 0.25, 0.1, 0.05])
        hits = 0
        for _ in range(2000):
            counts = rng.multinomial(200, p)
            pA, pB = goodman_bounds(counts, alpha=0.05)
            a = int(np.argmax(counts))
            rest = counts.astype(float)
            rest[a] = -1
            b = int(np.argmax(rest))
            hits += pA <= p[a] and pB >= p[b]
        assert hits / 2000 >= 0.94


class TestRadius:
    def test_analytic(self):
        r = certified_radius(normal_cdf(1.0), normal_cdf(-1.0), 0.02)
        assert r == pytest.approx(0.02, abs=1e-14)
        assert certified_radius(0.8413447, 0.1586553, 0.02) == pytest.approx(0.02, abs=1e-8)

    def test_wrong_top_class_abstains(self):
        res = certify_counts([0, 1000, 0], SmoothingConfig(), true_label=0)
        assert res.radius == ABSTAIN_RADIUS and res.predicted == 1 and not res.abstained

    def test_tie_abstains(self):
        res = certify_counts([50, 50], SmoothingConfig(), true_label=0)
        assert res.abstained and res.radius == ABSTAIN_RADIUS


class TestNoisyInference:
    def test_tiny_sigma_matches_model(self, small_model, small_dataset):
        cfg = SmoothingConfig(sigma=1e-12, num_samples=3, kernel_size=1)
        for s in small_dataset.test[:5]:
            assert smoothed_predict(small_model, s, cfg)[0] == int(np.argmax(forward(small_model, s)))

    @pytest.mark.parametrize("sigma,n", [(0.01, 5), (1.0, 40)])
    def test_constant_model(self, chain_dataset, sigma, n):
        m = LinearClassifier.constant([0.0, 2.0], 6, 5)
        cfg = SmoothingConfig(sigma=sigma, num_samples=n)
        assert smoothed_predict(m, chain_dataset.test[0], cfg)[0] == 1
        assert vote_counts(m, chain_dataset.test[0], cfg).tolist() == [0, n]

    def test_substreams_deterministic(self, chain_model, chain_dataset):
        s = chain_dataset.test[0]
        cfg = SmoothingConfig(num_samples=150)
        a = noisy_logits(chain_model, s, cfg, key=(3,))
        b = noisy_logits(chain_model, s, cfg, key=(3,))
        assert np.array_equal(a, b)
        # a prefix of draws does not depend on how many are taken
        assert np.array_equal(noisy_logits(chain_model, s, cfg, 20, key=(3,)), a[:20])
        assert not np.array_equal(noisy_logits(chain_model, s, cfg, key=(4,)), a)

    def test_padding_stays_clean(self, chain_dataset):
        captured = []

        class Spy(LinearClassifier):
            def forward_batch(self, coords, frame_mask):
                captured.append(np.array(coords))
                return super().forward_batch(coords, frame_mask)

        m = Spy.constant([0.0, 1.0], 6, 5)
        s = chain_dataset.test[0]
        c = s.coords.copy()
        c[-2:] = 0
        mask = np.array([1, 1, 1, 1, 0, 0], bool)
        noisy_logits(m, SkeletonSequence(c, mask), SmoothingConfig(num_samples=4))
        assert np.all(captured[0][:, -2:] == 0)

    def test_certify_warns_on_small_n(self, chain_model, chain_dataset):
        with pytest.warns(UserWarning):
            certify(chain_model, chain_dataset.test[0], SmoothingConfig(num_samples=10))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SmoothingConfig(sigma=0)
        with pytest.raises(ConfigError):
            SmoothingConfig(kernel_size=4)
        with pytest.raises(ConfigError):
            SmoothingConfig(alpha=1.5)


class TestEstimator:
    def test_predict_and_certify(self, small_model, small_dataset):
        clf = SmoothedClassifier(small_model, n_samples=20).fit()
        X = small_dataset.test[:6]
        pred = clf.predict(X)
        assert pred.shape == (6,)
        assert clf.score(X, [s.label for s in X]) >= 0.5
        certs = clf.certify(X[:2], n_samples=200)
        assert len(certs) == 2 and all(c.to_dict()["counts"] for c in certs)

    def test_fit_requires_base(self):
        with pytest.raises(ConfigError):
            SmoothedClassifier().fit()
