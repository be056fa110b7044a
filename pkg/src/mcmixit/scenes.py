"""Seeded synthetic multi-channel scenes and training-example builders.

Scenes are spatialised with per-microphone fractional delays, a gain and an
optional short FIR; there is no room simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .signal import (
    DEFAULT_FILTER_LEN,
    DegenerateReferenceError,
    MultiChannelSignal,
    estimate_reference_filter,
    is_silent,
)

__all__ = [
    "SceneSource",
    "Scene",
    "TrainingExample",
    "fractional_delay",
    "circular_array_delays",
    "random_fir",
    "modulated_noise",
    "tone_complex",
    "wav_excerpt",
    "render_scene",
    "random_scene",
    "make_mom",
    "make_supervised_mixed",
    "make_supervised_filtered",
    "KINDS",
]

SPEED_OF_SOUND = 343.0
ARRAY_RADIUS = 0.10
SINC_TAPS = 16
# keeps every sinc tap causal for the default geometry
PROPAGATION_DELAY = SINC_TAPS // 2

KINDS = ("unsupervised_mom", "supervised_mixed", "supervised_filtered")


@dataclass
class SceneSource:
    signal: np.ndarray
    gain: float
    delays: np.ndarray
    fir: np.ndarray | None = None
    source_id: str = ""

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64).ravel()
        self.delays = np.atleast_1d(np.asarray(self.delays, dtype=np.float64))
        if not self.gain > 0:
            raise ValueError("source gain must be positive")
        if np.any(self.delays < 0):
            raise ValueError("delays must be non-negative")
        if self.fir is not None:
            self.fir = np.atleast_2d(np.asarray(self.fir, dtype=np.float64))
            if self.fir.shape[0] != len(self.delays):
                raise ValueError("need one FIR per microphone")


@dataclass
class Scene:
    sources: list
    noise_level: float = 0.0
    seed: int = 0

    @property
    def source_ids(self):
        return [s.source_id for s in self.sources]


@dataclass
class TrainingExample:
    """``references`` is ``T x C x N`` and always sums to ``input`` over its last axis."""

    kind: str
    input: MultiChannelSignal
    references: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def num_references(self) -> int:
        return self.references.shape[2]


# ---------------------------------------------------------------------------
# signals
# ---------------------------------------------------------------------------


def fractional_delay(x: np.ndarray, delay: float, length: int) -> np.ndarray:
    """Delay ``x`` by ``delay`` samples with a 16-tap Hann-windowed sinc.

    Integer delays reduce to a pure shift. Samples before the start of ``x``
    are zero.
    """
    x = np.asarray(x, dtype=np.float64)
    whole = int(np.floor(delay))
    frac = delay - whole
    out = np.zeros(length)
    half = SINC_TAPS // 2
    for j in range(-half + 1, half + 1):
        arg = j - frac
        if frac == 0.0:
            if j != 0:
                continue
            h = 1.0
        else:
            h = np.sinc(arg) * 0.5 * (1.0 + np.cos(np.pi * arg / half))
        lag = whole + j
        # out[t] += h * x[t - lag]
        lo = max(0, lag)
        hi = min(length, len(x) + lag)
        if hi > lo:
            out[lo:hi] += h * x[lo - lag : hi - lag]
    return out


def circular_array_delays(num_mics: int, azimuth: float, sample_rate: int = 16000,
                          radius: float = ARRAY_RADIUS, base_delay: float = PROPAGATION_DELAY) -> np.ndarray:
    """Far-field plane-wave delays (samples) for mics evenly spaced on a circle.

    Mic ``c`` sits at angle ``2 pi c / C``. All delays are at least ``base_delay``.
    """
    angles = 2.0 * np.pi * np.arange(num_mics) / num_mics
    lead = radius * np.cos(azimuth - angles) / SPEED_OF_SOUND * sample_rate
    return base_delay + radius / SPEED_OF_SOUND * sample_rate - lead


def random_fir(rng: np.random.Generator, num_mics: int, length: int = 64, decay: float = 8.0) -> np.ndarray:
    """Exponentially decaying random taps with a unit direct path, one row per mic."""
    if not 1 <= length <= 256:
        raise ValueError("FIR length must be in [1, 256]")
    env = np.exp(-np.arange(length) / decay) * 0.3
    taps = rng.standard_normal((num_mics, length)) * env
    taps[:, 0] = 1.0
    return taps


def _normalise(x):
    rms = np.sqrt(np.mean(x * x))
    return x / rms if rms > 0 else x


def modulated_noise(rng: np.random.Generator, length: int, sample_rate: int = 16000) -> np.ndarray:
    """Band-limited noise under a syllable-rate on/off envelope (unit RMS)."""
    lo = rng.uniform(150.0, 1000.0)
    hi = min(lo * rng.uniform(2.0, 6.0), 0.45 * sample_rate)
    sos = sps.butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
    noise = sps.sosfilt(sos, rng.standard_normal(length + 2048))[2048:]
    t = np.arange(length) / sample_rate
    rate = rng.uniform(2.5, 6.0)
    # bursts with a low floor, so short excerpts are never exactly silent
    env = 0.05 + 0.95 * np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)), 0.0, None) ** 0.5
    env *= 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t + rng.uniform(0, 2 * np.pi))
    return _normalise(noise * env)


def tone_complex(rng: np.random.Generator, length: int, sample_rate: int = 16000) -> np.ndarray:
    """Harmonic complex with slow vibrato and amplitude drift (unit RMS)."""
    f0 = rng.uniform(110.0, 360.0)
    n_harm = int(rng.integers(3, 8))
    t = np.arange(length) / sample_rate
    vib = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vib) / sample_rate
    x = np.zeros(length)
    for k in range(1, n_harm + 1):
        if k * f0 * 1.02 >= 0.45 * sample_rate:
            break
        x += rng.uniform(0.3, 1.0) / k * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    x *= 0.7 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 2 * np.pi))
    return _normalise(x)


def wav_excerpt(rng: np.random.Generator, path, length: int) -> np.ndarray:
    """Random excerpt of channel 0 of a WAV file, zero-padded if the file is short."""
    from .wavio import read_wav

    x = read_wav(path).channel(0)
    if len(x) <= length:
        return np.pad(x, (0, length - len(x)))
    start = int(rng.integers(0, len(x) - length + 1))
    return x[start : start + length].copy()


SOURCE_GENERATORS = {"modulated_noise": modulated_noise, "tone_complex": tone_complex}


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_scene(scene: Scene, num_mics: int, length: int, sample_rate: int = 16000):
    """Render to ``(mixture, images)`` with images of shape ``T x C x S``.

    Noise is white Gaussian, seeded by ``scene.seed``, with RMS
    ``noise_level`` times the RMS of the summed source images.
    """
    if not scene.sources:
        raise ValueError("scene has no sources")
    images = np.zeros((length, num_mics, len(scene.sources)))
    for s, src in enumerate(scene.sources):
        if len(src.delays) != num_mics:
            raise ValueError(f"source {s} has {len(src.delays)} delays for {num_mics} mics")
        if len(src.signal) < length:
            raise ValueError(f"source {s} is shorter than {length} samples")
        if np.any(src.delays >= length):
            raise ValueError(f"source {s} delay exceeds the scene length")
        for c in range(num_mics):
            y = src.gain * fractional_delay(src.signal, float(src.delays[c]), length)
            if src.fir is not None:
                y = sps.oaconvolve(y, src.fir[c])[:length] if length > 4096 else np.convolve(y, src.fir[c])[:length]
            images[:, c, s] = y
    clean = images.sum(axis=2)
    mixture = clean
    if scene.noise_level > 0:
        rms = np.sqrt(np.mean(clean * clean))
        noise = np.random.default_rng(scene.seed).standard_normal(clean.shape)
        mixture = clean + scene.noise_level * rms * noise
    return MultiChannelSignal(mixture, sample_rate), images


def random_scene(rng: np.random.Generator, num_mics: int, length: int, sample_rate: int = 16000,
                 kinds=("modulated_noise",), noise_level: float = 0.0, fir_len: int = 0,
                 id_prefix: str = "src", wav_paths=()) -> Scene:
    """One source per entry of ``kinds`` at random azimuths and gains.

    A kind may be ``"wav"`` to draw an excerpt from ``wav_paths``.
    """
    sources = []
    for i, kind in enumerate(kinds):
        if kind == "wav":
            if not wav_paths:
                raise ValueError("kind 'wav' needs wav_paths")
            sig = wav_excerpt(rng, wav_paths[int(rng.integers(len(wav_paths)))], length)
        else:
            sig = SOURCE_GENERATORS[kind](rng, length, sample_rate)
        delays = circular_array_delays(num_mics, rng.uniform(0, 2 * np.pi), sample_rate)
        fir = random_fir(rng, num_mics, fir_len) if fir_len else None
        gain = float(10 ** (rng.uniform(-5.0, 5.0) / 20.0))
        sources.append(SceneSource(sig, gain, delays, fir, f"{id_prefix}-{i}-{kind}"))
    return Scene(sources, noise_level, int(rng.integers(2**31)))


def _check_disjoint(scene_a: Scene, scene_b: Scene):
    overlap = set(scene_a.source_ids) & set(scene_b.source_ids)
    if overlap:
        raise ValueError(f"scenes share source ids: {sorted(overlap)}")


def _example(kind, refs, sample_rate, scenes, **meta):
    mixture = MultiChannelSignal(refs.sum(axis=2), sample_rate)
    ids = [sid for sc in scenes for sid in sc.source_ids]
    return TrainingExample(kind, mixture, refs, {"source_ids": ids, **meta})


def make_mom(scene_a: Scene, scene_b: Scene, num_mics: int, length: int, sample_rate: int = 16000):
    """Mixture of the two rendered scene mixtures; the mixtures are the references."""
    _check_disjoint(scene_a, scene_b)
    mix_a, _ = render_scene(scene_a, num_mics, length, sample_rate)
    mix_b, _ = render_scene(scene_b, num_mics, length, sample_rate)
    refs = np.stack([mix_a.samples, mix_b.samples], axis=2)
    return _example("unsupervised_mom", refs, sample_rate, (scene_a, scene_b))


def make_supervised_mixed(scene_a: Scene, scene_b: Scene, num_mics: int, length: int, sample_rate: int = 16000):
    """Two single-source scenes; each noisy rendered array signal is a reference."""
    for sc in (scene_a, scene_b):
        if len(sc.sources) != 1:
            raise ValueError("supervised scenes must hold exactly one source")
    ex = make_mom(scene_a, scene_b, num_mics, length, sample_rate)
    ex.kind = "supervised_mixed"
    return ex


def make_supervised_filtered(scene_a: Scene, scene_b: Scene, close_talk_b, num_mics: int, length: int,
                             filter_len: int = DEFAULT_FILTER_LEN, sample_rate: int = 16000):
    """Three targets: scene A's array signal, the filtered close-talk B, and B's residual."""
    _check_disjoint(scene_a, scene_b)
    close = np.asarray(close_talk_b, dtype=np.float64).ravel()[:length]
    if len(close) < length or is_silent(close):
        raise DegenerateReferenceError("degenerate close-talk signal")
    mix_a, _ = render_scene(scene_a, num_mics, length, sample_rate)
    mix_b, _ = render_scene(scene_b, num_mics, length, sample_rate)
    filtered, residual, _ = estimate_reference_filter(close, mix_b, filter_len)
    refs = np.stack([mix_a.samples, filtered.samples, residual.samples], axis=2)
    return _example("supervised_filtered", refs, sample_rate, (scene_a, scene_b))
