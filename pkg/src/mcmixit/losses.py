"""Assignment losses: MixIT, multi-channel MixIT and permutation invariant training.

All three search exhaustively over a finite set of assignment matrices and
score each candidate with the negative thresholded SNR, summed over
reference columns (and channels). Zero-energy (reference, channel) pairs
contribute no term.

Array orientation follows the waveform types: references are ``T x N`` or
``T x C x N``, estimates ``T x M`` or ``T x C x M``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .signal import DegenerateReferenceError, LossConfig, is_silent

__all__ = [
    "SearchSpaceTooLarge",
    "MixingMatrix",
    "Permutation",
    "AssignmentResult",
    "ENUMERATION_CAP",
    "enumerate_mixing_matrices",
    "enumerate_pit_assignments",
    "mixit_loss",
    "mc_mixit_loss",
    "pit_loss",
    "assignment_loss",
    "loss_tensor",
]

ENUMERATION_CAP = 10**6
_DEFAULT_LOSS = LossConfig()
# candidates whose Gram-based score is this close to the best are re-scored directly
_TIE_WINDOW_DB = 1e-6


class SearchSpaceTooLarge(ValueError):
    """The exhaustive search would exceed the enumeration cap."""


@dataclass(frozen=True)
class MixingMatrix:
    """Estimate ``m`` is summed into reference mixture ``assignment[m]``."""

    assignment: tuple
    num_references: int

    def __post_init__(self):
        a = tuple(int(v) for v in self.assignment)
        if not a or any(v < 0 or v >= self.num_references for v in a):
            raise ValueError(f"invalid assignment {a} for N={self.num_references}")
        object.__setattr__(self, "assignment", a)

    @property
    def num_estimates(self) -> int:
        return len(self.assignment)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.num_estimates, self.num_references))
        out[np.arange(self.num_estimates), self.assignment] = 1.0
        return out


@dataclass(frozen=True)
class Permutation:
    """Reference ``n`` is matched to estimate ``estimate_for[n]`` (-1: reference skipped)."""

    estimate_for: tuple
    num_estimates: int

    def dense(self) -> np.ndarray:
        out = np.zeros((self.num_estimates, len(self.estimate_for)))
        for n, m in enumerate(self.estimate_for):
            if m >= 0:
                out[m, n] = 1.0
        return out


@dataclass
class AssignmentResult:
    """Outcome of an assignment search.

    ``loss`` is the negated thresholded SNR summed over references and
    channels. ``per_reference_snr`` averages the active channels of each
    reference (NaN if none is active); ``per_channel_snr`` is ``C x N``.
    """

    matrix: MixingMatrix | Permutation
    loss: float
    per_reference_snr: np.ndarray
    per_channel_snr: np.ndarray
    num_candidates: int


def enumerate_mixing_matrices(num_estimates: int, num_references: int, cap: int = ENUMERATION_CAP):
    """All ``N**M`` binary matrices with unit row sums.

    Ordered by the assignment vector read as a base-``N`` integer, first
    estimate most significant.
    """
    m, n = int(num_estimates), int(num_references)
    if m < 1 or n < 1:
        raise ValueError("M and N must be positive")
    if n**m > cap:
        raise SearchSpaceTooLarge(f"search space too large: {n}**{m} > {cap}")
    return [MixingMatrix(a, n) for a in itertools.product(range(n), repeat=m)]


def enumerate_pit_assignments(num_estimates: int, num_references: int, cap: int = ENUMERATION_CAP):
    """Injective maps from ``N`` references to ``M`` estimates, lexicographic order."""
    m, n = int(num_estimates), int(num_references)
    if n > m:
        raise ValueError(f"PIT needs M >= N, got M={m}, N={n}")
    count = 1
    for i in range(n):
        count *= m - i
    if count > cap:
        raise SearchSpaceTooLarge(f"search space too large: {count} > {cap}")
    return list(itertools.permutations(range(m), n))


def _to_cnt(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3:
        raise ValueError(f"{name} must be T x C x K, got shape {x.shape}")
    return np.ascontiguousarray(np.transpose(x, (1, 2, 0)))


def _prepare(references, estimates):
    refs = _to_cnt(references, "references")
    ests = _to_cnt(estimates, "estimates")
    if refs.shape[2] != ests.shape[2]:
        raise ValueError(f"duration mismatch: references {refs.shape[2]} vs estimates {ests.shape[2]}")
    if refs.shape[0] != ests.shape[0]:
        raise ValueError(f"channel mismatch: references {refs.shape[0]} vs estimates {ests.shape[0]}")
    if not (np.all(np.isfinite(refs)) and np.all(np.isfinite(ests))):
        raise ValueError("references and estimates must be finite")
    return refs, ests


def _direct_snr(refs, ests, dense, active, config):
    """Per (channel, reference) thresholded SNR of one matrix; NaN where inactive."""
    mixed = np.einsum("cmt,mn->cnt", ests, dense)
    err = np.sum((mixed - refs) ** 2, axis=2)
    energy = np.sum(refs * refs, axis=2)
    safe = np.where(active, energy, 1.0)
    snr = 10.0 * np.log10(safe / (err + config.tau * safe))
    return np.where(active, snr, np.nan)


def _search(refs, ests, candidates, active, config):
    """Score all candidate matrices ``(K, M, N)``; return best index and its SNR table."""
    gss = np.einsum("cmt,cpt->cmp", ests, ests)
    gsx = np.einsum("cmt,cnt->cmn", ests, refs)
    energy = np.sum(refs * refs, axis=2)
    err = (
        np.einsum("kmn,cmp,kpn->kcn", candidates, gss, candidates)
        - 2.0 * np.einsum("kmn,cmn->kcn", candidates, gsx)
        + energy[None]
    )
    err = np.maximum(err, 0.0)
    safe = np.where(active, energy, 1.0)
    snr = 10.0 * np.log10(safe / (err + config.tau * safe))
    losses = -np.where(active[None], snr, 0.0).sum(axis=(1, 2))

    best = losses.min()
    near = np.flatnonzero(losses <= best + _TIE_WINDOW_DB + 1e-12 * abs(best))
    chosen, chosen_loss, chosen_snr = None, np.inf, None
    for k in near:
        table = _direct_snr(refs, ests, candidates[k], active, config)
        value = -np.nansum(table)
        if value < chosen_loss:
            chosen, chosen_loss, chosen_snr = int(k), value, table
    return chosen, float(chosen_loss), chosen_snr


def _summarise(table):
    with np.errstate(invalid="ignore"):
        counts = np.sum(~np.isnan(table), axis=0)
        per_ref = np.where(counts > 0, np.nansum(table, axis=0) / np.maximum(counts, 1), np.nan)
    return per_ref


def mc_mixit_loss(references, estimates, config: LossConfig = _DEFAULT_LOSS, cap: int = ENUMERATION_CAP):
    """Multi-channel MixIT: one mixing matrix shared by all channels.

    ``references`` is ``T x C x N`` (or ``T x N`` for one channel) and
    ``estimates`` ``T x C x M``.
    """
    refs, ests = _prepare(references, estimates)
    n, m = refs.shape[1], ests.shape[1]
    if m < n:
        raise ValueError(f"MixIT needs M >= N, got M={m}, N={n}")
    active = ~is_silent(refs, axis=2)
    if not active.any():
        raise DegenerateReferenceError("all references have zero energy")
    matrices = enumerate_mixing_matrices(m, n, cap)
    candidates = np.stack([mm.dense() for mm in matrices])
    k, loss, table = _search(refs, ests, candidates, active, config)
    return AssignmentResult(matrices[k], loss, _summarise(table), table, len(matrices))


def mixit_loss(references, estimates, config: LossConfig = _DEFAULT_LOSS, cap: int = ENUMERATION_CAP):
    """Single-channel MixIT over ``T x N`` references and ``T x M`` estimates."""
    refs = np.asarray(references, dtype=np.float64)
    ests = np.asarray(estimates, dtype=np.float64)
    if refs.ndim == 3:
        if refs.shape[1] != 1:
            raise ValueError("mixit_loss takes single-channel inputs; use mc_mixit_loss")
        refs = refs[:, 0]
    if ests.ndim == 3:
        if ests.shape[1] != 1:
            raise ValueError("mixit_loss takes single-channel inputs; use mc_mixit_loss")
        ests = ests[:, 0]
    if refs.ndim != 2 or ests.ndim != 2:
        raise ValueError("mixit_loss expects T x N references and T x M estimates")
    return mc_mixit_loss(refs, ests, config, cap)


def pit_loss(references, estimates, config: LossConfig = _DEFAULT_LOSS, cap: int = ENUMERATION_CAP):
    """Supervised permutation invariant loss.

    Each non-zero reference is matched to a distinct estimate; estimates left
    unmatched add nothing to the loss.
    """
    refs, ests = _prepare(references, estimates)
    n, m = refs.shape[1], ests.shape[1]
    if m < n:
        raise ValueError(f"PIT needs M >= N, got M={m}, N={n}")
    active = ~is_silent(refs, axis=2)
    live = np.flatnonzero(active.any(axis=0))
    if live.size == 0:
        raise DegenerateReferenceError("all references have zero energy")
    perms = enumerate_pit_assignments(m, live.size, cap)
    candidates = np.zeros((len(perms), m, n))
    for k, perm in enumerate(perms):
        candidates[k, list(perm), live] = 1.0
    k, loss, table = _search(refs, ests, candidates, active, config)
    estimate_for = [-1] * n
    for ref, est in zip(live, perms[k]):
        estimate_for[int(ref)] = int(est)
    return AssignmentResult(Permutation(tuple(estimate_for), m), loss, _summarise(table), table, len(perms))


def assignment_loss(references, estimates, matrix, config: LossConfig = _DEFAULT_LOSS):
    """Loss of a given assignment (a :class:`MixingMatrix`, :class:`Permutation` or dense ``M x N`` array)."""
    refs, ests = _prepare(references, estimates)
    dense = matrix.dense() if hasattr(matrix, "dense") else np.asarray(matrix, dtype=np.float64)
    active = ~is_silent(refs, axis=2)
    table = _direct_snr(refs, ests, dense, active, config)
    return float(-np.nansum(table))


def loss_tensor(estimates: ad.Tensor, references: np.ndarray, matrices: np.ndarray,
                config: LossConfig = _DEFAULT_LOSS) -> ad.Tensor:
    """Differentiable summed loss for a batch with fixed assignment matrices.

    ``estimates`` is a ``(B, C, M, T)`` tensor, ``references`` a
    ``(B, C, N, T)`` array and ``matrices`` ``(B, M, N)``. The matrices are
    constants: gradients flow only through the estimates.
    """
    dtype = estimates.dtype
    refs = np.asarray(references, dtype=np.float64)
    energy = np.sum(refs * refs, axis=-1)  # (B, C, N)
    active = ~is_silent(refs, axis=-1)
    safe = np.where(active, energy, 1.0)
    mix_t = np.swapaxes(np.asarray(matrices, dtype=dtype), -1, -2)[:, None]  # (B, 1, N, M)

    mixed = ad.matmul(ad.Tensor(mix_t), estimates)
    err = ad.sum(ad.square(ad.sub(mixed, refs.astype(dtype))), axis=-1)
    # inactive terms get a dummy offset so log10 stays finite, then are zeroed
    floor = (config.tau * safe + (~active)).astype(dtype)
    db = ad.scale(ad.log10(ad.add(err, floor)), 10.0)
    terms = ad.sub(db, (10.0 * np.log10(safe)).astype(dtype))
    return ad.sum(ad.mul(terms, active.astype(dtype)))
