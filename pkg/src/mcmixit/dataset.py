"""Repeatable example streams and on-disk dataset shards."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .scenes import (
    TrainingExample,
    make_mom,
    make_supervised_filtered,
    make_supervised_mixed,
    random_scene,
)
from .signal import MultiChannelSignal
from .wavio import read_wav, write_wav

__all__ = [
    "DataConfig",
    "SPLITS",
    "example_seed",
    "make_example",
    "dataset_stream",
    "write_shards",
    "read_shards",
    "KIND_ALIASES",
]

# each split owns a disjoint block of example seeds
SPLITS = {"train": 0, "validation": 100_000_000, "test": 200_000_000}
SPLIT_SIZE = 100_000_000
KIND_ALIASES = {
    "mom": "unsupervised_mom",
    "unsupervised_mom": "unsupervised_mom",
    "supervised_mixed": "supervised_mixed",
    "supervised_filtered": "supervised_filtered",
}
MANIFEST = "manifest.jsonl"


@dataclass(frozen=True)
class DataConfig:
    """Synthetic data settings.

    ``pairing="contrast"`` gives the two scenes of an example different
    source kinds (one tone complex, one modulated noise); ``"random"`` draws
    each kind independently.
    """

    kind: str = "unsupervised_mom"
    num_mics: int = 2
    sample_rate: int = 16000
    unsup_seconds: float = 10.0
    sup_seconds: float = 5.0
    sources_per_scene: int = 1
    source_kinds: tuple = ("tone_complex", "modulated_noise")
    pairing: str = "contrast"
    noise_level: float = 0.0
    fir_len: int = 0
    filter_len: int = 512
    seed: int = 0
    wav_paths: tuple = ()

    def __post_init__(self):
        if self.kind not in KIND_ALIASES:
            raise ValueError(f"unknown example kind {self.kind!r}")
        object.__setattr__(self, "kind", KIND_ALIASES[self.kind])
        object.__setattr__(self, "source_kinds", tuple(self.source_kinds))
        object.__setattr__(self, "wav_paths", tuple(self.wav_paths))
        if self.num_mics < 1 or self.sample_rate < 1:
            raise ValueError("num_mics and sample_rate must be positive")
        if self.pairing not in ("contrast", "random"):
            raise ValueError(f"unknown pairing {self.pairing!r}")
        if self.pairing == "contrast" and len(self.source_kinds) < 2:
            raise ValueError("contrast pairing needs at least two source kinds")

    @property
    def num_samples(self) -> int:
        secs = self.unsup_seconds if self.kind == "unsupervised_mom" else self.sup_seconds
        return int(round(secs * self.sample_rate))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source_kinds"] = list(self.source_kinds)
        d["wav_paths"] = list(self.wav_paths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)


def example_seed(split: str, index: int) -> int:
    if split not in SPLITS:
        raise ValueError(f"invalid split {split!r}; expected one of {sorted(SPLITS)}")
    if not 0 <= index < SPLIT_SIZE:
        raise ValueError("example index out of range")
    return SPLITS[split] + index


def _scene_kinds(rng, config: DataConfig):
    k = config.sources_per_scene
    if config.pairing == "contrast":
        first, second = rng.permutation(len(config.source_kinds))[:2]
        return ([config.source_kinds[first]] * k, [config.source_kinds[second]] * k)
    pick = lambda: [config.source_kinds[i] for i in rng.integers(len(config.source_kinds), size=k)]  # noqa: E731
    return pick(), pick()


def make_example(config: DataConfig, split: str, index: int) -> TrainingExample:
    """Example ``index`` of ``split``; a pure function of its arguments."""
    seed = example_seed(split, index)
    rng = np.random.default_rng([config.seed, seed])
    length, c, sr = config.num_samples, config.num_mics, config.sample_rate
    kinds_a, kinds_b = _scene_kinds(rng, config)
    common = dict(noise_level=config.noise_level, fir_len=config.fir_len, wav_paths=config.wav_paths)
    scene_a = random_scene(rng, c, length, sr, kinds_a, id_prefix=f"{seed}a", **common)
    scene_b = random_scene(rng, c, length, sr, kinds_b, id_prefix=f"{seed}b", **common)
    if config.kind == "unsupervised_mom":
        ex = make_mom(scene_a, scene_b, c, length, sr)
    elif config.kind == "supervised_mixed":
        ex = make_supervised_mixed(scene_a, scene_b, c, length, sr)
    else:
        close = scene_b.sources[0].signal
        ex = make_supervised_filtered(scene_a, scene_b, close, c, length, config.filter_len, sr)
    ex.metadata.update(id=f"{split}-{index:06d}", seed=seed, split=split)
    return ex


def dataset_stream(config: DataConfig, split: str = "train", start: int = 0, count: int | None = None):
    """Yield examples ``start, start + 1, ...`` of ``split`` (forever if ``count`` is None)."""
    example_seed(split, start)
    i = start
    while count is None or i < start + count:
        yield make_example(config, split, i)
        i += 1


def write_shards(examples, out_dir) -> dict:
    """Write examples as WAV files plus ``manifest.jsonl``; return counts per kind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts: dict = {}
    lines = []
    for ex in examples:
        ex_id = ex.metadata["id"]
        input_name = f"{ex_id}_input.wav"
        write_wav(out / input_name, ex.input)
        ref_names = []
        for n in range(ex.num_references):
            name = f"{ex_id}_ref{n}.wav"
            write_wav(out / name, MultiChannelSignal(ex.references[:, :, n], ex.input.sample_rate))
            ref_names.append(name)
        record = {
            "id": ex_id,
            "kind": ex.kind,
            "input": input_name,
            "references": ref_names,
            "N": ex.num_references,
            "C": ex.input.num_channels,
            "seed": ex.metadata.get("seed"),
        }
        lines.append(json.dumps(record, sort_keys=True))
        counts[ex.kind] = counts.get(ex.kind, 0) + 1
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    os.replace(tmp, out / MANIFEST)
    return counts


def read_shards(directory, kind: str | None = None):
    """Yield :class:`TrainingExample` objects listed in a shard manifest."""
    root = Path(directory)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if kind is not None and rec["kind"] != KIND_ALIASES.get(kind, kind):
            continue
        mixture = read_wav(root / rec["input"])
        refs = np.stack([read_wav(root / r).samples for r in rec["references"]], axis=2)
        if refs.shape[:2] != mixture.samples.shape:
            raise ValueError(f"{rec['id']}: reference shape {refs.shape} does not match input")
        yield TrainingExample(rec["kind"], mixture, refs, {"id": rec["id"], "seed": rec["seed"]})
