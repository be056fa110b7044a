"""Multi-channel waveforms, objective metrics and reference construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, signal as sps

__all__ = [
    "DegenerateReferenceError",
    "MultiChannelSignal",
    "EstimateSet",
    "LossConfig",
    "thresholded_snr",
    "si_snr",
    "si_snr_improvement",
    "mixture_consistency_project",
    "estimate_reference_filter",
    "is_silent",
    "DEFAULT_FILTER_LEN",
]

DEFAULT_FILTER_LEN = 512
SILENCE_THRESHOLD = 1e-12  # energy per sample


class DegenerateReferenceError(ValueError):
    """Raised when a reference signal carries no energy."""


@dataclass(frozen=True)
class MultiChannelSignal:
    """A ``T x C`` waveform."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"samples must be T x C with T, C >= 1, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def num_channels(self) -> int:
        return self.samples.shape[1]

    def channel(self, c: int) -> np.ndarray:
        return self.samples[:, c]

    def select_channels(self, idx) -> "MultiChannelSignal":
        return MultiChannelSignal(self.samples[:, list(idx)], self.sample_rate)

    def __array__(self, dtype=None, copy=None):
        return self.samples if dtype is None else self.samples.astype(dtype)

    def _check_compatible(self, other: "MultiChannelSignal"):
        if self.samples.shape != other.samples.shape or self.sample_rate != other.sample_rate:
            raise ValueError(
                f"incompatible signals: {self.samples.shape}@{self.sample_rate} vs "
                f"{other.samples.shape}@{other.sample_rate}"
            )

    def __add__(self, other: "MultiChannelSignal") -> "MultiChannelSignal":
        self._check_compatible(other)
        return MultiChannelSignal(self.samples + other.samples, self.sample_rate)

    def __sub__(self, other: "MultiChannelSignal") -> "MultiChannelSignal":
        self._check_compatible(other)
        return MultiChannelSignal(self.samples - other.samples, self.sample_rate)


@dataclass(frozen=True)
class EstimateSet:
    """``M`` separated multi-channel estimates stored as a ``T x C x M`` array."""

    estimates: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        s = np.asarray(self.estimates, dtype=np.float64)
        if s.ndim != 3 or min(s.shape) < 1:
            raise ValueError(f"estimates must be T x C x M with all dims >= 1, got {s.shape}")
        object.__setattr__(self, "estimates", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def num_samples(self) -> int:
        return self.estimates.shape[0]

    @property
    def num_channels(self) -> int:
        return self.estimates.shape[1]

    @property
    def num_sources(self) -> int:
        return self.estimates.shape[2]

    def source(self, m: int) -> MultiChannelSignal:
        return MultiChannelSignal(self.estimates[:, :, m], self.sample_rate)

    def __array__(self, dtype=None, copy=None):
        return self.estimates if dtype is None else self.estimates.astype(dtype)


@dataclass(frozen=True)
class LossConfig:
    """``tau`` caps the thresholded SNR at ``10 log10(1 / tau)`` dB."""

    tau: float = 1e-3
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


_DEFAULT_LOSS = LossConfig()


def _pair(reference, estimate):
    y = np.asarray(reference, dtype=np.float64).ravel()
    yh = np.asarray(estimate, dtype=np.float64).ravel()
    if y.shape != yh.shape:
        raise ValueError(f"length mismatch: {y.shape[0]} vs {yh.shape[0]}")
    return y, yh


def is_silent(x: np.ndarray, axis=-1) -> np.ndarray:
    """True where the energy along ``axis`` is at most 1e-12 per sample."""
    x = np.asarray(x, dtype=np.float64)
    return np.sum(x * x, axis=axis) <= SILENCE_THRESHOLD * x.shape[axis]


def thresholded_snr(reference, estimate, config: LossConfig = _DEFAULT_LOSS) -> float:
    """SNR in dB with a soft ceiling of ``10 log10(1 / tau)``.

    Training losses use the negative of this value.
    """
    y, yh = _pair(reference, estimate)
    ref_energy = float(y @ y)
    if ref_energy <= 0.0:
        raise DegenerateReferenceError("degenerate reference: zero energy")
    err = yh - y
    return float(10.0 * np.log10(ref_energy / (err @ err + config.tau * ref_energy)))


def si_snr(reference, estimate, config: LossConfig = _DEFAULT_LOSS) -> float:
    """Scale-invariant SNR (dB) of zero-mean signals.

    The estimate is first rescaled to the reference energy so that the
    ``epsilon`` stabiliser does not break invariance to its gain.
    """
    y, yh = _pair(reference, estimate)
    y = y - y.mean()
    yh = yh - yh.mean()
    ref_energy = float(y @ y)
    if ref_energy <= 0.0:
        raise DegenerateReferenceError("degenerate reference: zero energy after mean removal")
    est_energy = float(yh @ yh)
    if est_energy == 0.0:
        return float("-inf")
    yh = yh * np.sqrt(ref_energy / est_energy)
    target = (yh @ y) / ref_energy * y
    noise = yh - target
    with np.errstate(divide="ignore"):
        return float(10.0 * np.log10((target @ target) / (noise @ noise + config.epsilon)))


def si_snr_improvement(reference, estimate, mixture, config: LossConfig = _DEFAULT_LOSS) -> float:
    return si_snr(reference, estimate, config) - si_snr(reference, mixture, config)


def mixture_consistency_project(estimates, mixture) -> EstimateSet:
    """Spread the residual ``x - sum_m s_m`` uniformly over the ``M`` estimates.

    Accepts an :class:`EstimateSet` (or ``T x C x M`` array) and a
    :class:`MultiChannelSignal` (or ``T x C`` array).
    """
    s = np.asarray(estimates, dtype=np.float64)
    x = np.asarray(mixture, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if s.ndim != 3 or s.shape[:2] != x.shape:
        raise ValueError(f"shape mismatch: estimates {s.shape} vs mixture {x.shape}")
    rate = getattr(estimates, "sample_rate", getattr(mixture, "sample_rate", 16000))
    residual = x - s.sum(axis=2)
    return EstimateSet(s + residual[:, :, None] / s.shape[2], rate)


def _lagged_products(x: np.ndarray, y: np.ndarray, n_lags: int) -> np.ndarray:
    """``out[k] = sum_t y[t] x[t - k]`` for ``k < n_lags``, over the full overlap."""
    corr = sps.correlate(y, x, mode="full", method="fft" if len(x) > 4096 else "direct")
    zero = len(x) - 1
    return corr[zero : zero + n_lags]


def _causal_gram(x: np.ndarray, n_taps: int) -> np.ndarray:
    """Exact ``X^T X`` for the causal convolution matrix of ``x`` truncated to ``len(x)``.

    ``G[i, j] = sum_{u=0}^{T-1-max(i,j)} x[u] x[u + |i - j|]``: the full-lag
    autocorrelation minus the products that fall off the end of the signal.
    """
    t = len(x)
    r = _lagged_products(x, x, n_taps)
    tail = x[max(0, t - 2 * n_taps) :]
    offset = t - len(tail)
    # drop[k][m] = sum of x[u] x[u+k] for u in [T-m, T-1-k]
    drop = np.zeros((n_taps, n_taps))
    for k in range(n_taps):
        prod = tail[: len(tail) - k] * tail[k:]
        # reverse cumulative sum indexed by the start position u
        rc = np.concatenate([np.cumsum(prod[::-1])[::-1], [0.0]])
        ms = np.arange(k + 1, n_taps)
        starts = t - ms - offset
        ok = (starts >= 0) & (starts < len(prod))
        drop[k, ms[ok]] = rc[starts[ok]]
    lags = np.abs(np.subtract.outer(np.arange(n_taps), np.arange(n_taps)))
    longest = np.maximum.outer(np.arange(n_taps), np.arange(n_taps))
    return r[lags] - drop[lags, longest]


def estimate_reference_filter(source, target, filter_len: int = DEFAULT_FILTER_LEN):
    """Least-squares causal FIR from a mono ``source`` to each channel of ``target``.

    Solves the regularised normal equations
    ``(X^T X + lam I) h_c = X^T target_c`` with
    ``lam = 1e-6 * trace(X^T X) / filter_len``.

    Returns ``(filtered, residual, taps)`` where ``filtered + residual``
    reproduces ``target`` and ``taps`` has shape ``(filter_len, C)``.
    """
    src = np.asarray(source, dtype=np.float64).ravel()
    tgt_sig = target if isinstance(target, MultiChannelSignal) else MultiChannelSignal(target)
    tgt = tgt_sig.samples
    t = len(src)
    if tgt.shape[0] != t:
        raise ValueError(f"duration mismatch: source {t} vs target {tgt.shape[0]}")
    if filter_len < 1:
        raise ValueError("filter_len must be positive")
    if filter_len > t:
        raise ValueError("filter_len exceeds the signal length")
    if is_silent(src):
        raise DegenerateReferenceError("degenerate source: zero energy")

    gram = _causal_gram(src, filter_len)
    lam = 1e-6 * np.trace(gram) / filter_len
    gram[np.diag_indices_from(gram)] += lam
    rhs = np.stack([_lagged_products(src, tgt[:, c], filter_len) for c in range(tgt.shape[1])], axis=1)
    taps = linalg.solve(gram, rhs, assume_a="pos")

    filtered = np.stack(
        [sps.oaconvolve(src, taps[:, c])[:t] if t > 4096 else np.convolve(src, taps[:, c])[:t]
         for c in range(tgt.shape[1])],
        axis=1,
    )
    residual = tgt - filtered
    rate = tgt_sig.sample_rate
    return MultiChannelSignal(filtered, rate), MultiChannelSignal(residual, rate), taps
