"""Command-line entry point: ``mcmixit {synth,train,eval,separate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import SEED_ENV, ConfigError, describe_keys, load_run_config
from .dataset import dataset_stream, read_shards, write_shards
from .inference import separate_long
from .signal import DegenerateReferenceError, LossConfig, MultiChannelSignal
from .training import (
    NumericalError,
    ShardSource,
    SyntheticSource,
    WarmStartError,
    evaluate,
    select_channels,
    train,
)
from .wavio import WavFormatError, read_wav, write_wav

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mcmixit")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="key = value config file with [model], [train], [data], [paths] sections")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--preset", choices=("tiny", "full"), default="tiny",
                   help="model size preset used for [model] defaults (default: tiny)")


def build_parser() -> argparse.ArgumentParser:
    epilog = (f"config keys and defaults (tiny preset):\n{describe_keys('tiny')}\n\n"
              f"{SEED_ENV} seeds [data] and [train] when neither the file nor a flag sets a seed.\n"
              "exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical failure")
    parser = _Parser(prog="mcmixit", description="Multi-channel mixture invariant training toolkit.",
                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic dataset shards", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    p.add_argument("--out", required=True, help="output shard directory")
    p.add_argument("--examples", type=int, default=100, help="number of examples (default: 100)")
    p.add_argument("--kind", help="mom, supervised_mixed or supervised_filtered (sets data.kind)")
    p.add_argument("--mics", type=int, help="number of microphones (sets data.num_mics)")
    p.add_argument("--seed", type=int, help="dataset seed (sets data.seed)")
    p.add_argument("--split", default="train", help="train, validation or test (default: train)")
    p.add_argument("--start", type=int, default=0, help="index of the first example (default: 0)")

    p = sub.add_parser("train", help="train a model", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    p.add_argument("--out", required=True, help="run directory (metrics.jsonl, checkpoints)")
    p.add_argument("--mode", help="supervised, unsupervised or semi (sets train.mode)")
    p.add_argument("--steps", type=int, help="sets train.steps")
    p.add_argument("--seed", type=int, help="sets train.seed and data.seed")
    p.add_argument("--mics", type=int, help="sets data.num_mics")
    p.add_argument("--warm-start", help="checkpoint to initialise from (sets train.warm_start_path)")
    p.add_argument("--no-resume", action="store_true", help="start over even if latest.ckpt exists")

    p = sub.add_parser("eval", help="evaluate a checkpoint", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shards", action="append", default=[], help="shard directory to evaluate (repeatable)")
    p.add_argument("--split", default="test",
                   help="comma-separated synthetic splits used when no --shards is given (default: test)")
    p.add_argument("--examples", type=int, default=32, help="synthetic examples per split (default: 32)")
    p.add_argument("--mics", default="", help="comma-separated mic counts for cross-evaluation, e.g. 1,2,4")
    p.add_argument("--assignment", choices=("best_single", "oracle_mix"), default="best_single")
    p.add_argument("--report", help="write the machine-readable report (JSON) here")

    p = sub.add_parser("separate", help="separate a WAV file", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input", help="input WAV file")
    p.add_argument("--out", required=True, help="directory for source_<m>.wav outputs")
    p.add_argument("--num-outputs", type=int, help="expected number of outputs (must match the model)")
    p.add_argument("--block-seconds", type=float, default=10.0, help="block length, 0 for one pass (default: 10)")
    p.add_argument("--overlap-seconds", type=float, default=1.0, help="block cross-fade (default: 1)")
    return parser


def _run_config(args, extra=()):
    return load_run_config(args.config, list(extra) + list(args.set), preset=args.preset)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    extra = []
    if args.kind:
        extra.append(f"data.kind={args.kind}")
    if args.mics is not None:
        extra.append(f"data.num_mics={args.mics}")
    if args.seed is not None:
        extra.append(f"data.seed={args.seed}")
    if args.examples < 0:
        raise ConfigError("--examples must be >= 0")
    run = _run_config(args, extra)
    try:
        stream = dataset_stream(run.data, args.split, args.start, args.examples)
        counts = write_shards(stream, args.out)
    except OSError as exc:
        raise DataError(f"cannot write shards to {args.out}: {exc}") from None
    if not counts:
        print("no examples written")
    for kind in sorted(counts):
        print(f"{kind}: {counts[kind]}")
    return EXIT_OK


def _sources(run):
    n_sup, n_unsup = run.train.counts()
    sup = unsup = None
    if n_sup:
        if run.paths.supervised_shards:
            sup = ShardSource(run.paths.supervised_shards, run.train.seed)
        elif run.paths.on_the_fly:
            sup = SyntheticSource(run.supervised_data())
        else:
            raise ConfigError(f"mode {run.train.mode!r} needs paths.supervised_shards or paths.on_the_fly")
    if n_unsup:
        if run.paths.unsupervised_shards:
            unsup = ShardSource(run.paths.unsupervised_shards, run.train.seed)
        elif run.paths.on_the_fly:
            unsup = SyntheticSource(run.unsupervised_data())
        else:
            raise ConfigError(f"mode {run.train.mode!r} needs paths.unsupervised_shards or paths.on_the_fly")
    return sup, unsup


def cmd_train(args) -> int:
    extra = []
    if args.mode:
        extra.append(f"train.mode={args.mode}")
    if args.steps is not None:
        extra.append(f"train.steps={args.steps}")
    if args.seed is not None:
        extra += [f"train.seed={args.seed}", f"data.seed={args.seed}"]
    if args.mics is not None:
        extra.append(f"data.num_mics={args.mics}")
    if args.warm_start:
        extra.append(f"train.warm_start_path={args.warm_start}")
    run = _run_config(args, extra)
    if run.train.warm_start_path and not Path(run.train.warm_start_path).exists():
        raise ConfigError(f"warm start checkpoint {run.train.warm_start_path} does not exist")
    try:
        sup, unsup = _sources(run)
    except (FileNotFoundError, OSError) as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True, default=list) + "\n",
                                         encoding="utf-8")

    def progress(record):
        if record["step"] % 100 == 0 or record["step"] == run.train.steps:
            log.info("step %d loss %.4f", record["step"], record["loss"])

    train(run.model, run.train, out, supervised=sup, unsupervised=unsup, resume=not args.no_resume,
          progress=progress)
    print(f"wrote {out / 'final.ckpt'}")
    return EXIT_OK


def _eval_sets(args, run):
    if args.shards:
        for d in args.shards:
            yield d, list(read_shards(d))
        return
    for split in [s.strip() for s in args.split.split(",") if s.strip()]:
        yield split, list(dataset_stream(run.data, split, 0, args.examples))


def cmd_eval(args) -> int:
    run = _run_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    params = {k: v.astype(np.float64) for k, v in ckpt.params.items()}
    mic_counts = [int(v) for v in args.mics.split(",") if v.strip()] if args.mics else []
    loss_config = LossConfig(tau=run.train.tau)
    report = {"checkpoint": str(args.checkpoint), "assignment": args.assignment, "sets": []}
    lines = [f"{'set':<24} {'mics':>4} {'SI-SNRi':>8} {'S1':>8} {'S2':>8} {'oracle':>9} {'n':>4}"]
    for name, examples in _eval_sets(args, run):
        if not examples:
            raise DataError(f"evaluation set {name} is empty")
        total = min(ex.input.num_channels for ex in examples)
        for k in mic_counts or [total]:
            if k > total:
                raise DataError(f"{name}: dataset has {total} mics, {k} requested")
            chans = select_channels(total, k)
            rep = evaluate(params, ckpt.model_config, examples, args.assignment, loss_config, chans)
            row = rep.to_dict()
            row.pop("per_example")
            row.update(set=name, mics=k, channels=chans)
            report["sets"].append(row)
            srcs = [f"{v:8.2f}" if v is not None else f"{'-':>8}" for v in (rep.per_source_si_snri + [None] * 2)[:2]]
            lines.append(f"{name:<24} {k:>4} {rep.mean_si_snri:8.2f} {srcs[0]} {srcs[1]} "
                         f"{rep.mean_oracle_loss:9.2f} {rep.num_examples:>4}")
    print("\n".join(lines))
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_separate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.model_config
    if args.num_outputs is not None and args.num_outputs != config.num_outputs:
        raise ConfigError(f"--num-outputs {args.num_outputs} does not match the model's {config.num_outputs}")
    signal = read_wav(args.input)
    if signal.num_samples < config.window:
        raise DataError(f"{args.input}: {signal.num_samples} samples is shorter than one window ({config.window})")
    rate = signal.sample_rate
    block = int(round(args.block_seconds * rate)) if args.block_seconds > 0 else None
    overlap = int(round(args.overlap_seconds * rate))
    params = {k: v.astype(np.float64) for k, v in ckpt.params.items()}
    est = separate_long(signal, params, config, block, overlap)
    if not np.all(np.isfinite(est.estimates)):
        raise NumericalError("separation produced non-finite samples")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for m in range(est.num_sources):
        write_wav(out / f"source_{m}.wav", MultiChannelSignal(est.estimates[:, :, m], rate))
    print(f"wrote {est.num_sources} sources to {out}")
    return EXIT_OK


VERBS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "separate": cmd_separate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mcmixit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return VERBS[args.verb](args)
    except NumericalError as exc:
        print(f"mcmixit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, WarmStartError, UsageError) as exc:
        print(f"mcmixit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, WavFormatError, CheckpointError, DegenerateReferenceError, FileNotFoundError) as exc:
        print(f"mcmixit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as exc:
        print(f"mcmixit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"mcmixit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
