"""Block-wise separation of long recordings."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import ModelConfig, forward_batch
from .signal import EstimateSet, MultiChannelSignal

__all__ = ["block_starts", "separate_long"]


def block_starts(length: int, block: int, overlap: int, hop: int):
    """``(start, end)`` spans covering ``[0, length)``.

    Starts are multiples of ``hop`` so every block sees the same frame grid
    as a single pass. Consecutive blocks share at least ``overlap`` samples
    (the block step is rounded down to a multiple of ``hop``); the last block
    runs to the end.
    """
    step = ((block - overlap) // hop) * hop
    if step < hop:
        raise ValueError("block must exceed overlap by at least one hop")
    spans = []
    start = 0
    while start + block < length:
        spans.append((start, start + block))
        start += step
    spans.append((start, length))
    return spans


def _align(prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """Order of ``cur`` sources (``C x M x T`` over a shared span) best matching ``prev``."""
    a = prev.reshape(prev.shape[0], prev.shape[1], -1).transpose(1, 0, 2).reshape(prev.shape[1], -1)
    b = cur.reshape(cur.shape[0], cur.shape[1], -1).transpose(1, 0, 2).reshape(cur.shape[1], -1)
    score = a @ b.T  # (M_prev, M_cur)
    _, order = linear_sum_assignment(-score)
    return order


def separate_long(signal: MultiChannelSignal, params: dict, config: ModelConfig,
                  block: int | None = None, overlap: int = 0) -> EstimateSet:
    """Separate ``signal`` in blocks of ``block`` samples, cross-fading ``overlap`` samples.

    Output order follows the first block; later blocks are permuted to match
    their predecessor on the shared span. The cross-fade weights sum to one,
    so the estimates still add up to the input. ``block=None`` runs a single
    pass.
    """
    x = signal.samples.T  # (C, T)
    c, t = x.shape
    if t < config.window:
        raise ValueError(f"input of {t} samples is shorter than one window ({config.window})")
    if block is None or block >= t:
        out = forward_batch(x[None], params, config).data[0]
        return EstimateSet(np.transpose(out, (2, 0, 1)), signal.sample_rate)
    if block < config.window:
        raise ValueError("block must be at least one window long")

    m = config.num_outputs
    acc = np.zeros((c, m, t))
    prev_span, prev_est = None, None
    for start, end in block_starts(t, block, overlap, config.hop):
        est = forward_batch(x[None, :, start:end], params, config).data[0].astype(np.float64)
        weight = np.ones(end - start)
        if prev_span is not None:
            shared = prev_span[1] - start
            if shared > 0:
                order = _align(prev_est[:, :, start - prev_span[0]:], est[:, :, :shared])
                est = est[:, order]
                ramp = (np.arange(shared) + 0.5) / shared
                weight[:shared] = ramp
                acc[:, :, start : start + shared] *= 1.0 - ramp
        acc[:, :, start:end] += est * weight
        prev_span, prev_est = (start, end), est
    return EstimateSet(np.transpose(acc, (2, 0, 1)), signal.sample_rate)
