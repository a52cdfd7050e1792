"""Randomized smoothing with temporal Gaussian filtering, and certification.

Inference averages the logits of the base model over ``N`` Gaussian-noised,
temporally filtered copies of the input. Certification counts the base
model's votes over such copies, bounds the top two class probabilities with
simultaneous multinomial intervals and converts them into a certified L2
radius ``sigma / 2 * (Phi^-1(pA_lower) - Phi^-1(pB_upper))``.
"""

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .exceptions import ConfigError, ContractError
from .skeleton import SkeletonSequence
from .validation import check_sequences

ABSTAIN_RADIUS = -1.0
CHUNK = 100  # fixed evaluation chunk; keeps reductions independent of worker count


# ---------------------------------------------------------------------------
# Temporal filtering


def gaussian_kernel(kernel_size: int, kernel_sigma: float = 1.0) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ContractError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if not kernel_sigma > 0:
        raise ContractError(f"kernel_sigma must be positive, got {kernel_sigma}")
    r = kernel_size // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / kernel_sigma) ** 2)
    return k / k.sum()


def _runs(mask):
    """Start/stop indices of the maximal runs of True in a 1-D mask."""
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(m))
    return list(zip(edges[::2], edges[1::2]))


def _filter_shared_mask(coords, mask, kernel):
    """Filter ``(n, T, ...)`` coordinates sharing one ``(T,)`` frame mask."""
    out = np.zeros_like(coords)
    r = len(kernel) // 2
    for start, stop in _runs(mask):
        seg = coords[:, start:stop]
        if r == 0:
            out[:, start:stop] = seg
            continue
        pad = [(0, 0)] * seg.ndim
        pad[1] = (r, r)
        # "symmetric" repeats the edge sample: (c b a | a b c | c b a)
        padded = np.pad(seg, pad, mode="symmetric")
        n = stop - start
        acc = kernel[0] * padded[:, 0:n]
        for j in range(1, len(kernel)):
            acc = acc + kernel[j] * padded[:, j:j + n]
        out[:, start:stop] = acc
    return out


def filter_batch(coords, frame_mask, kernel_size, kernel_sigma=1.0):
    """Temporal Gaussian filter of ``(n, T, I, 3)`` coordinates."""
    kernel = gaussian_kernel(kernel_size, kernel_sigma)
    coords = np.asarray(coords, dtype=np.float64)
    frame_mask = np.asarray(frame_mask, dtype=bool)
    if frame_mask.ndim == 1:
        return _filter_shared_mask(coords, frame_mask, kernel)
    out = np.empty_like(coords)
    uniq, inverse = np.unique(frame_mask, axis=0, return_inverse=True)
    inverse = np.ravel(inverse)
    for u, m in enumerate(uniq):
        idx = np.flatnonzero(inverse == u)
        out[idx] = _filter_shared_mask(coords[idx], m, kernel)
    return out


def gaussian_temporal_filter(seq: SkeletonSequence, kernel_size: int,
                             kernel_sigma: float = 1.0) -> SkeletonSequence:
    """Convolve every (joint, axis) channel along time with a normalized Gaussian.

    Sequence ends use symmetric (edge-repeating) reflection. Padding frames
    neither feed into nor receive filtered values; each run of real frames is
    filtered on its own.
    """
    out = _filter_shared_mask(seq.coords[None], seq.frame_mask,
                              gaussian_kernel(kernel_size, kernel_sigma))[0]
    return seq.with_coords(out)


class TemporalGaussianFilter(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapper around :func:`filter_batch`."""

    def __init__(self, kernel_size=5, kernel_sigma=1.0):
        self.kernel_size = kernel_size
        self.kernel_sigma = kernel_sigma

    def fit(self, X=None, y=None):
        gaussian_kernel(self.kernel_size, self.kernel_sigma)
        return self

    def transform(self, X):
        if isinstance(X, np.ndarray):
            coords, mask, _ = check_sequences(X)
            out = filter_batch(coords, mask, self.kernel_size, self.kernel_sigma)
            return out if X.ndim == 4 else out[0]
        return [gaussian_temporal_filter(s, self.kernel_size, self.kernel_sigma) for s in X]


# ---------------------------------------------------------------------------
# Normal distribution helpers

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _lower_half_ppf(p):
    # Rational approximation (rel. error ~1e-9) for p <= 0.5, then one Halley step.
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    else:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    e = normal_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def _ppf_scalar(p):
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ContractError(f"inverse normal CDF needs p in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        # 1 - p is exact here, so the upper half reuses the accurate lower tail.
        return -_lower_half_ppf(1.0 - p)
    return _lower_half_ppf(p)


def inverse_normal_cdf(p):
    """Standard normal quantile ``Phi^-1(p)`` for scalars or arrays."""
    if np.ndim(p) == 0:
        return _ppf_scalar(p)
    arr = np.asarray(p, dtype=np.float64)
    return np.array([_ppf_scalar(v) for v in arr.ravel()]).reshape(arr.shape)


def chi2_1_quantile(q: float) -> float:
    """Quantile of the chi-square distribution with one degree of freedom."""
    if not 0.0 < q < 1.0:
        raise ContractError(f"quantile level must be in (0, 1), got {q}")
    z = inverse_normal_cdf(0.5 + 0.5 * q)
    return z * z


def goodman_interval(count, n, b):
    """Goodman simultaneous interval for one multinomial cell; ``b`` is the chi-square quantile."""
    center = b + 2.0 * count
    half = math.sqrt(b * (b + 4.0 * count * (n - count) / n))
    den = 2.0 * (n + b)
    return max((center - half) / den, 0.0), min((center + half) / den, 1.0)


def goodman_bounds(counts, n=None, alpha=0.05, k=None):
    """Lower bound for the top class and upper bound for the runner-up.

    Parameters
    ----------
    counts : sequence of int
        Vote counts per class; must sum to ``n``.
    alpha : float
        Simultaneous miscoverage level.
    k : int, optional
        Number of cells the Bonferroni-type correction spans; defaults to
        ``len(counts)``.

    Returns
    -------
    pA_lower, pB_upper : float
    """
    counts = np.asarray(counts)
    if counts.ndim != 1 or counts.size < 1:
        raise ContractError("counts must be a non-empty 1-D array")
    if np.any(counts < 0) or np.any(counts != np.round(counts)):
        raise ContractError("counts must be nonnegative integers")
    total = int(counts.sum())
    n = total if n is None else int(n)
    if n < 1:
        raise ContractError("need at least one sample")
    if total != n:
        raise ContractError(f"counts sum to {total}, expected {n}")
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"alpha must be in (0, 1), got {alpha}")
    k = counts.size if k is None else int(k)
    b = chi2_1_quantile(1.0 - alpha / max(k, 1))
    a, second = top_two(counts)
    c_b = counts[second] if second is not None else 0
    return goodman_interval(counts[a], n, b)[0], goodman_interval(c_b, n, b)[1]


def top_two(counts):
    """Indices of the largest and second-largest counts, lowest index on ties."""
    counts = np.asarray(counts)
    a = int(np.argmax(counts))
    if counts.size < 2:
        return a, None
    rest = counts.astype(np.float64).copy()
    rest[a] = -np.inf
    return a, int(np.argmax(rest))


def certified_radius(pA_lower, pB_upper, sigma):
    return 0.5 * sigma * (inverse_normal_cdf(pA_lower) - inverse_normal_cdf(pB_upper))


# ---------------------------------------------------------------------------
# Noisy inference and certification


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.02
    num_samples: int = 50
    kernel_size: int = 5
    kernel_sigma: float = 1.0
    alpha: float = 0.05
    seed: int = 0
    goodman_k: str = "all"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if int(self.num_samples) != self.num_samples or self.num_samples < 1:
            raise ConfigError(f"num_samples must be a positive integer, got {self.num_samples}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if not self.kernel_sigma > 0:
            raise ConfigError("kernel_sigma must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.goodman_k not in ("all", "two"):
            raise ConfigError("goodman_k must be 'all' or 'two'")


@dataclass
class CertificationResult:
    predicted: int
    pA_lower: float
    pB_upper: float
    radius: float
    counts: np.ndarray
    abstained: bool
    raw_radius: Optional[float] = None
    true_label: Optional[int] = None

    @property
    def correct(self):
        return (not self.abstained) and (self.true_label is None or self.predicted == self.true_label)

    def to_dict(self):
        return {
            "predicted": int(self.predicted),
            "pA_lower": float(self.pA_lower),
            "pB_upper": float(self.pB_upper),
            "radius": float(self.radius),
            "raw_radius": None if self.raw_radius is None else float(self.raw_radius),
            "counts": [int(c) for c in self.counts],
            "abstained": bool(self.abstained),
            "true_label": None if self.true_label is None else int(self.true_label),
        }


def _draw_noise(seed, key, index, shape):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(key) + (int(index),))
    return np.random.Generator(np.random.PCG64(ss)).standard_normal(shape)


def noisy_logits(model, seq: SkeletonSequence, cfg: SmoothingConfig, num_samples=None,
                 key=()):
    """Logits of ``N`` noised and filtered copies of ``seq``, shape ``(N, L)``.

    Draw ``i`` uses its own random substream derived from ``(cfg.seed, *key, i)``.
    """
    n = cfg.num_samples if num_samples is None else int(num_samples)
    if n < 1:
        raise ContractError("need at least one noise sample")
    mask = seq.frame_mask
    out = []
    for start in range(0, n, CHUNK):
        idx = range(start, min(start + CHUNK, n))
        noise = np.stack([_draw_noise(cfg.seed, key, i, seq.coords.shape) for i in idx])
        noisy = seq.coords[None] + cfg.sigma * noise * mask[None, :, None, None]
        filt = _filter_shared_mask(noisy, mask, gaussian_kernel(cfg.kernel_size, cfg.kernel_sigma))
        out.append(model.forward_batch(filt, np.broadcast_to(mask, (len(idx), len(mask)))))
    return np.concatenate(out, axis=0)


def smoothed_predict(model, seq: SkeletonSequence, cfg: SmoothingConfig, key=()):
    """Noisy inference: argmax of the logits averaged over ``N`` draws.

    Returns
    -------
    label : int
    mean_logits : ndarray, shape (L,)
    """
    logits = noisy_logits(model, seq, cfg, key=key)
    mean = np.mean(logits, axis=0)
    return int(np.argmax(mean)), mean


def vote_counts(model, seq, cfg, num_samples=None, key=()):
    logits = noisy_logits(model, seq, cfg, num_samples=num_samples, key=key)
    votes = np.argmax(logits, axis=1)
    return np.bincount(votes, minlength=model.n_classes_)


def certify_counts(counts, cfg: SmoothingConfig, true_label=None) -> CertificationResult:
    """Turn vote counts into a certificate (shared by all filtering choices)."""
    counts = np.asarray(counts, dtype=np.int64)
    n = int(counts.sum())
    k = counts.size if cfg.goodman_k == "all" else 2
    pA, pB = goodman_bounds(counts, n, cfg.alpha, k)
    a, _ = top_two(counts)
    if pA <= pB:
        return CertificationResult(a, pA, pB, ABSTAIN_RADIUS, counts, True, None, true_label)
    raw = certified_radius(pA, pB, cfg.sigma)
    if true_label is not None and a != true_label:
        radius = ABSTAIN_RADIUS
    else:
        radius = max(raw, 0.0)
    return CertificationResult(a, pA, pB, radius, counts, False, raw, true_label)


def certify(model, seq: SkeletonSequence, cfg: SmoothingConfig, true_label=None,
            key=()) -> CertificationResult:
    """Certified L2 radius of the vote-smoothed classifier at ``seq``.

    ``radius`` is ``max(R, 0)`` when the top class equals ``true_label`` and
    ``-1`` when it differs or when the top-class lower bound does not exceed
    the runner-up upper bound (abstention).
    """
    if cfg.num_samples < 1:
        raise ContractError("num_samples must be at least 1")
    if cfg.num_samples < 100:
        warnings.warn(f"certifying with only {cfg.num_samples} samples; bounds will be loose",
                      stacklevel=2)
    counts = vote_counts(model, seq, cfg, key=key)
    return certify_counts(counts, cfg, true_label)


class SmoothedClassifier(ClassifierMixin, BaseEstimator):
    """Noisy-inference wrapper around a fitted base classifier.

    ``predict`` averages logits over noisy filtered copies; ``certify``
    returns per-sequence :class:`CertificationResult` objects. Sequence ``i``
    of ``X`` draws its noise from the substream ``(random_state, i)``.
    """

    def __init__(self, base_estimator=None, sigma=0.02, n_samples=50, kernel_size=5,
                 kernel_sigma=1.0, alpha=0.05, goodman_k="all", random_state=0):
        self.base_estimator = base_estimator
        self.sigma = sigma
        self.n_samples = n_samples
        self.kernel_size = kernel_size
        self.kernel_sigma = kernel_sigma
        self.alpha = alpha
        self.goodman_k = goodman_k
        self.random_state = random_state

    def _config(self, n_samples=None):
        return SmoothingConfig(self.sigma, self.n_samples if n_samples is None else n_samples,
                               self.kernel_size, self.kernel_sigma, self.alpha,
                               self.random_state, self.goodman_k)

    @property
    def classes_(self):
        return np.arange(self.base_estimator.n_classes_)

    def fit(self, X=None, y=None):
        """Fit the base estimator on ``X`` when given; otherwise it must
        already be fitted."""
        if self.base_estimator is None:
            raise ConfigError("a base estimator is required")
        if X is not None:
            self.base_estimator.fit(X, y)
        self._config()
        return self

    def _sequences(self, X):
        if isinstance(X, SkeletonSequence):
            return [X]
        if isinstance(X, np.ndarray):
            coords, mask, labels = check_sequences(X)
            return [SkeletonSequence(c, m, l) for c, m, l in zip(coords, mask, labels)]
        return list(X)

    def decision_function(self, X):
        cfg = self._config()
        return np.stack([smoothed_predict(self.base_estimator, s, cfg, key=(i,))[1]
                         for i, s in enumerate(self._sequences(X))])

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def certify(self, X, y=None, n_samples=None):
        seqs = self._sequences(X)
        labels = [s.label for s in seqs] if y is None else list(y)
        cfg = self._config(n_samples)
        return [certify(self.base_estimator, s, cfg, int(l), key=(i,))
                for i, (s, l) in enumerate(zip(seqs, labels))]
