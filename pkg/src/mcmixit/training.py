"""Supervised (PIT), unsupervised (MC-MixIT) and semi-supervised training and evaluation."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .losses import loss_tensor, mc_mixit_loss, mixit_loss, pit_loss
from .model import ModelConfig, as_tensors, forward_batch, init_params
from .signal import LossConfig, is_silent, si_snr

__all__ = [
    "TrainConfig",
    "AdamState",
    "NumericalError",
    "WarmStartError",
    "adam_init",
    "adam_update",
    "train_step",
    "warm_start",
    "ExampleSource",
    "ShardSource",
    "SyntheticSource",
    "batch_for_step",
    "train",
    "evaluate",
    "select_channels",
    "score_estimates",
    "EvalReport",
]

log = logging.getLogger(__name__)

SUPERVISED_KINDS = ("supervised_mixed", "supervised_filtered")


class NumericalError(FloatingPointError):
    """A non-finite loss or gradient was produced."""


class WarmStartError(ValueError):
    def __init__(self, offenders):
        self.offenders = list(offenders)
        super().__init__("warm start mismatch: " + "; ".join(self.offenders))


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings. Desk-scale defaults; large runs need far bigger batches and step counts."""

    mode: str = "unsupervised"
    learning_rate: float = 3e-4
    batch_size: int = 8
    steps: int = 10000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    semi_mix_ratio: float = 0.5
    warm_start_path: str = ""
    precision: int = 32
    seed: int = 0
    tau: float = 1e-3
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.mode not in ("supervised", "unsupervised", "semi"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.semi_mix_ratio <= 1.0:
            raise ValueError("semi_mix_ratio must be in [0, 1]")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def counts(self) -> tuple[int, int]:
        """(supervised, unsupervised) examples per batch."""
        if self.mode == "supervised":
            return self.batch_size, 0
        if self.mode == "unsupervised":
            return 0, self.batch_size
        n_sup = int(round(self.semi_mix_ratio * self.batch_size))
        return n_sup, self.batch_size - n_sup

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_update(params: dict, grads: dict, state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step. Returns new ``(params, state)``; inputs are untouched."""
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[name] = (p - step).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


def _group(examples):
    groups: dict = {}
    for ex in examples:
        key = (ex.kind in SUPERVISED_KINDS, ex.input.samples.shape, ex.num_references)
        groups.setdefault(key, []).append(ex)
    return groups


def batch_loss(params: dict, examples, model_config: ModelConfig, loss_config: LossConfig):
    """Differentiable mean loss over ``examples`` plus per-kind diagnostics.

    Assignments are solved on detached estimates and then held fixed.
    """
    total = None
    per_kind = {"supervised": [], "unsupervised": []}
    for (supervised, _, _), group in _group(examples).items():
        dtype = next(iter(params.values())).dtype
        x = np.stack([ex.input.samples.T for ex in group]).astype(dtype)  # (B, C, T)
        refs = np.stack([np.transpose(ex.references, (1, 2, 0)) for ex in group])  # (B, C, N, T)
        est = forward_batch(x, params, model_config)
        est_np = np.transpose(est.data.astype(np.float64), (0, 3, 1, 2))  # (B, T, C, M)
        if not np.all(np.isfinite(est_np)):
            ids = [ex.metadata.get("id") for ex in group]
            raise NumericalError(f"non-finite model output on examples {ids}")
        solver = pit_loss if supervised else mc_mixit_loss
        mats, values = [], []
        for b, ex in enumerate(group):
            res = solver(ex.references, est_np[b], loss_config)
            mats.append(res.matrix.dense())
            values.append(res.loss)
        part = loss_tensor(est, refs, np.stack(mats), loss_config)
        total = part if total is None else ad.add(total, part)
        per_kind["supervised" if supervised else "unsupervised"].extend(values)
    loss = ad.scale(total, 1.0 / len(examples))
    return loss, per_kind


def train_step(params: dict, state: AdamState, examples, model_config: ModelConfig,
               train_config: TrainConfig):
    """Forward, loss, backward and Adam update on one batch.

    Returns ``(params, state, metrics)``. Raises :class:`NumericalError` on a
    non-finite loss or gradient.
    """
    loss_config = LossConfig(tau=train_config.tau)
    tensors = as_tensors(params, requires_grad=True)
    loss, per_kind = batch_loss(tensors, examples, model_config, loss_config)
    value = float(loss.data)
    ids = [ex.metadata.get("id") for ex in examples]
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} on examples {ids}")
    # fixed name order keeps the norm's summation order independent of dict order
    names = sorted(tensors)
    grad_list = ad.backward(loss, [tensors[n] for n in names])
    grads = dict(zip(names, grad_list))
    gnorm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grad_list)))
    if not np.isfinite(gnorm):
        raise NumericalError(f"non-finite gradient on examples {ids}")
    new_params, new_state = adam_update(
        params, grads, state, train_config.learning_rate,
        train_config.adam_beta1, train_config.adam_beta2, train_config.adam_eps,
    )
    metrics = {"loss": value, "grad_norm": gnorm}
    for kind, vals in per_kind.items():
        metrics[f"loss_{kind}"] = float(np.mean(vals)) if vals else None
    return new_params, new_state, metrics


# ---------------------------------------------------------------------------
# warm start
# ---------------------------------------------------------------------------


def warm_start(params_target: dict, checkpoint_path) -> dict:
    """Load every named tensor of a checkpoint into a parameter set of the same layout.

    The channel count is not part of any weight shape, so a checkpoint
    trained on one microphone loads into a run on any number of them.
    """
    ckpt = load_checkpoint(checkpoint_path)
    offenders = []
    for name, value in params_target.items():
        if name not in ckpt.params:
            offenders.append(f"{name}: missing from checkpoint")
        elif ckpt.params[name].shape != np.shape(value):
            offenders.append(f"{name}: checkpoint {ckpt.params[name].shape} vs model {np.shape(value)}")
    for name in ckpt.params:
        if name not in params_target:
            offenders.append(f"{name}: not in model")
    if offenders:
        raise WarmStartError(offenders)
    return {k: ckpt.params[k].astype(np.asarray(v).dtype) for k, v in params_target.items()}


# ---------------------------------------------------------------------------
# example sources
# ---------------------------------------------------------------------------


class ExampleSource:
    """Indexable example provider."""

    def __getitem__(self, index: int):
        raise NotImplementedError


class SyntheticSource(ExampleSource):
    """On-the-fly examples of one split of a :class:`~mcmixit.dataset.DataConfig`."""

    def __init__(self, config, split: str = "train"):
        from .dataset import example_seed

        example_seed(split, 0)
        self.config, self.split = config, split

    def __getitem__(self, index):
        from .dataset import make_example

        return make_example(self.config, self.split, int(index))


class ShardSource(ExampleSource):
    """Examples read from a shard directory; cycles with a per-epoch seeded shuffle."""

    def __init__(self, directory, seed: int = 0, kind: str | None = None):
        from .dataset import read_shards

        self.examples = list(read_shards(directory, kind))
        if not self.examples:
            raise ValueError(f"no examples in {directory}")
        self.seed = seed

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, index):
        n = len(self.examples)
        epoch, pos = divmod(int(index), n)
        order = np.random.default_rng([self.seed, epoch]).permutation(n)
        return self.examples[order[pos]]


def batch_for_step(step: int, train_config: TrainConfig, supervised: ExampleSource | None,
                   unsupervised: ExampleSource | None):
    """The examples of batch ``step``; depends only on ``step`` so runs can resume."""
    n_sup, n_unsup = train_config.counts()
    batch = []
    if n_sup:
        if supervised is None:
            raise ValueError("configuration needs a supervised example source")
        batch += [supervised[step * n_sup + j] for j in range(n_sup)]
    if n_unsup:
        if unsupervised is None:
            raise ValueError("configuration needs an unsupervised example source")
        batch += [unsupervised[step * n_unsup + j] for j in range(n_unsup)]
    return batch


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _checkpoint(model_config, params, state, train_config, extra=None) -> Checkpoint:
    meta = {"step": state.step, "train_config": train_config.to_dict(),
            # example order and init are counter-based, so (seed, step) is the full RNG state
            "rng_state": {"seed": train_config.seed, "step": state.step}}
    if extra:
        meta.update(extra)
    return Checkpoint(model_config, params, state.m, state.v, meta)


class _RunLock:
    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def _stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip())
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except (ValueError, OSError):
            return False
        return False

    def __enter__(self):
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                break
            except FileExistsError:
                if not self._stale():
                    raise RuntimeError(f"{self.path} exists: another run is using this directory") from None
                log.warning("removing stale lock %s", self.path)
                self.path.unlink(missing_ok=True)
        else:
            raise RuntimeError(f"could not acquire {self.path}")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def train(model_config: ModelConfig, train_config: TrainConfig, out_dir,
          supervised: ExampleSource | None = None, unsupervised: ExampleSource | None = None,
          resume: bool = True, log_wall_time: bool = True, extra_meta: dict | None = None,
          progress=None):
    """Run the training loop, writing ``metrics.jsonl`` and checkpoints to ``out_dir``.

    Resumes from ``out_dir/latest.ckpt`` when present and ``resume`` is set.
    Returns the final parameters.
    """
    n_sup, n_unsup = train_config.counts()
    if n_sup and supervised is None:
        raise ValueError(f"mode {train_config.mode!r} needs a supervised example source")
    if n_unsup and unsupervised is None:
        raise ValueError(f"mode {train_config.mode!r} needs an unsupervised example source")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    latest = out / "latest.ckpt"
    log_path = out / "metrics.jsonl"

    with _RunLock(out):
        params = init_params(model_config, train_config.seed, train_config.dtype)
        state = adam_init(params)
        if resume and latest.exists():
            ck = load_checkpoint(latest)
            params = {k: v.astype(train_config.dtype) for k, v in ck.params.items()}
            state = AdamState(ck.adam_m, ck.adam_v, ck.step)
            log.info("resumed from %s at step %d", latest, ck.step)
        else:
            if train_config.warm_start_path:
                params = warm_start(params, train_config.warm_start_path)
            log_path.write_text("", encoding="utf-8")
        # drop log records past the resume point so the log matches an uninterrupted run
        if log_path.exists():
            kept = [ln for ln in log_path.read_text(encoding="utf-8").splitlines()
                    if ln and json.loads(ln)["step"] <= state.step]
            log_path.write_text("".join(ln + "\n" for ln in kept), encoding="utf-8")

        t0 = time.perf_counter()
        try:
            with open(log_path, "a", encoding="utf-8") as logf:
                while state.step < train_config.steps:
                    batch = batch_for_step(state.step, train_config, supervised, unsupervised)
                    params, state, metrics = train_step(params, state, batch, model_config, train_config)
                    record = {"step": state.step, **metrics}
                    if log_wall_time:
                        record["wall_time"] = round(time.perf_counter() - t0, 3)
                    logf.write(json.dumps(record, sort_keys=True) + "\n")
                    logf.flush()
                    if progress is not None:
                        progress(record)
                    if train_config.checkpoint_every and state.step % train_config.checkpoint_every == 0:
                        save_checkpoint(latest, _checkpoint(model_config, params, state, train_config, extra_meta))
        except KeyboardInterrupt:
            save_checkpoint(latest, _checkpoint(model_config, params, state, train_config, extra_meta))
            raise
        save_checkpoint(latest, _checkpoint(model_config, params, state, train_config, extra_meta))
        save_checkpoint(out / "final.ckpt", _checkpoint(model_config, params, state, train_config, extra_meta))
    return params


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def select_channels(total: int, wanted: int) -> list:
    """Evenly spaced channel indices, e.g. 2 of 4 mics -> [0, 2]."""
    if wanted < 1 or wanted > total:
        raise ValueError(f"cannot select {wanted} of {total} channels")
    if total % wanted == 0:
        return list(range(0, total, total // wanted))
    return list(range(wanted))


@dataclass
class EvalReport:
    mean_si_snri: float
    per_source_si_snri: list
    mean_oracle_loss: float
    num_examples: int
    num_skipped: int
    assignment: str
    per_example: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def score_estimates(estimates: np.ndarray, ex, assignment: str, loss_config: LossConfig):
    """SI-SNRi per reference on channel 0; ``None`` for silent references.

    ``estimates`` is ``T x C x M``.
    """
    mix0 = ex.input.samples[:, 0]
    refs0 = ex.references[:, 0, :]
    est0 = estimates[:, 0, :]
    scores = []
    live = ~is_silent(refs0, axis=0)
    if assignment == "oracle_mix" and live.any():
        res = mixit_loss(refs0[:, live], est0, loss_config)
        mixed = est0 @ res.matrix.dense()
    for n in range(refs0.shape[1]):
        if not live[n]:
            scores.append(None)
            continue
        ref = refs0[:, n]
        base = si_snr(ref, mix0, loss_config)
        if assignment == "oracle_mix":
            col = int(np.flatnonzero(live)[: n + 1].size - 1)
            best = si_snr(ref, mixed[:, col], loss_config)
        else:
            best = max(si_snr(ref, est0[:, m], loss_config) for m in range(est0.shape[1]))
        scores.append(best - base)
    return scores


def evaluate(params: dict, model_config: ModelConfig, examples, assignment: str = "best_single",
             loss_config: LossConfig = LossConfig(), channels: list | None = None,
             batch_size: int = 4) -> EvalReport:
    """SI-SNR improvement on channel 0 of the output, per reference source.

    ``assignment="best_single"`` scores each reference against its best
    single estimate; ``"oracle_mix"`` against the MixIT-optimal sum of
    estimates. ``channels`` restricts the input to a subset of mics.
    """
    if assignment not in ("best_single", "oracle_mix"):
        raise ValueError(f"unknown assignment {assignment!r}")
    examples = list(examples)
    per_example, oracle_losses, skipped = [], [], 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        for (_, _, _), group in _group(chunk).items():
            sel = channels if channels is not None else list(range(group[0].input.num_channels))
            x = np.stack([ex.input.samples[:, sel].T for ex in group])
            est = forward_batch(x, params, model_config).data.astype(np.float64)
            for b, ex in enumerate(group):
                sub = type(ex)(ex.kind, ex.input.select_channels(sel), ex.references[:, sel, :], ex.metadata)
                est_tcm = np.transpose(est[b], (2, 0, 1))
                scores = score_estimates(est_tcm, sub, assignment, loss_config)
                skipped += sum(s is None for s in scores)
                per_example.append({"id": ex.metadata.get("id"), "si_snri": scores})
                solver = pit_loss if ex.kind in SUPERVISED_KINDS else mc_mixit_loss
                try:
                    oracle_losses.append(solver(sub.references, est_tcm, loss_config).loss)
                except ValueError:
                    pass
    n_refs = max((len(e["si_snri"]) for e in per_example), default=0)
    per_source = []
    for n in range(n_refs):
        vals = [e["si_snri"][n] for e in per_example if n < len(e["si_snri"]) and e["si_snri"][n] is not None]
        per_source.append(float(np.mean(vals)) if vals else None)
    flat = [s for e in per_example for s in e["si_snri"] if s is not None]
    return EvalReport(
        mean_si_snri=float(np.mean(flat)) if flat else float("nan"),
        per_source_si_snri=per_source,
        mean_oracle_loss=float(np.mean(oracle_losses)) if oracle_losses else float("nan"),
        num_examples=len(per_example),
        num_skipped=skipped,
        assignment=assignment,
        per_example=per_example,
    )
