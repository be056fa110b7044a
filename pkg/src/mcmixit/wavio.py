"""RIFF/WAVE reading and writing for 16-bit PCM and 32-bit float files."""

from __future__ import annotations

import os

import numpy as np
from scipy.io import wavfile

from .signal import MultiChannelSignal

__all__ = ["read_wav", "write_wav", "WavFormatError"]


class WavFormatError(ValueError):
    """Unsupported or malformed WAV data."""


def read_wav(path: str | os.PathLike) -> MultiChannelSignal:
    """Read a WAV file; channel ``c`` of the file becomes column ``c``.

    16-bit PCM is scaled to [-1, 1) by 1/32768; float files are returned as is.
    """
    try:
        rate, data = wavfile.read(os.fspath(path))
    except ValueError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample format {data.dtype}")
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] == 0:
        raise WavFormatError(f"{path}: no samples")
    return MultiChannelSignal(samples, int(rate))


def write_wav(path: str | os.PathLike, signal: MultiChannelSignal, encoding: str = "float32") -> None:
    """Write ``signal`` as ``"float32"`` (default) or ``"pcm16"``.

    PCM output is clipped to the representable range.
    """
    x = np.asarray(signal.samples)
    if encoding == "float32":
        data = x.astype("<f4")
    elif encoding == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    else:
        raise WavFormatError(f"unknown encoding {encoding!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(os.fspath(path), int(signal.sample_rate), data)
