import json

import numpy as np
import pytest

from mcmixit.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mcmixit.cli import main
from mcmixit.config import ConfigError, load_run_config
from mcmixit.inference import block_starts, separate_long
from mcmixit.model import ModelConfig, forward, init_params
from mcmixit.signal import MultiChannelSignal
from mcmixit.wavio import read_wav, write_wav

FAST = ["--set", "data.unsup_seconds=0.05", "--set", "data.sup_seconds=0.05", "--set", "data.filter_len=32",
        "--set", "train.batch_size=2"]
SMALL = ModelConfig(num_superblocks=1, blocks_per_superblock=3, bottleneck_dim=8, conv_channels=16, tac_dim=8,
                    num_outputs=3, encoder_bases=16)


def _checkpoint(path, config=SMALL, seed=0):
    save_checkpoint(path, Checkpoint(config, init_params(config, seed)))
    return str(path)


class TestConfig:
    def test_file_and_overrides(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[model]\nnum_outputs = 6\n[train]\nlearning_rate = 1e-3\nmode = semi\n"
                       "[data]\nsource_kinds = tone_complex, modulated_noise\n", encoding="utf-8")
        run = load_run_config(cfg, ["train.steps=5"], env={})
        assert run.model.num_outputs == 6 and run.model.bottleneck_dim == 32
        assert run.train.learning_rate == 1e-3 and run.train.mode == "semi" and run.train.steps == 5
        assert run.data.source_kinds == ("tone_complex", "modulated_noise")

    def test_full_preset(self):
        assert load_run_config(preset="full", env={}).model == ModelConfig()

    @pytest.mark.parametrize("text", ["[model]\nwidth = 3\n", "[extra]\na = 1\n", "[train]\nsteps = many\n",
                                      "[train]\nmode = sideways\n", "no section\n"])
    def test_rejects_bad_files(self, tmp_path, text):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(text, encoding="utf-8")
        with pytest.raises(ConfigError):
            load_run_config(cfg, env={})

    def test_seed_env_fallback(self):
        run = load_run_config(env={"MCMIXIT_SEED": "42"})
        assert run.data.seed == 42 and run.train.seed == 42
        run = load_run_config(overrides=["data.seed=3"], env={"MCMIXIT_SEED": "42"})
        assert run.data.seed == 3 and run.train.seed == 42


class TestHelpAndUsage:
    def test_help_lists_every_key(self, capsys):
        assert main(["train", "--help"]) == 0
        out = capsys.readouterr().out
        run = load_run_config(env={})
        for section, keys in run.to_dict().items():
            assert f"[{section}]" in out
            for key in keys:
                assert f"  {key} = " in out
        assert "learning_rate = 0.0003" in out and "MCMIXIT_SEED" in out

    def test_usage_error_exit_code(self, capsys):
        assert main(["frobnicate"]) == 1
        assert main(["synth"]) == 1
        assert main(["synth", "--out", "x", "--set", "model.nope=1"]) == 1


class TestSynth:
    def test_deterministic_manifest(self, tmp_path, capsys):
        args = ["synth", "--seed", "7", "--examples", "5", "--kind", "mom", "--mics", "4", *FAST]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert "unsupervised_mom: 5" in capsys.readouterr().out
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        manifest_a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        assert manifest_a == (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert (tmp_path / "a" / "train-000004_input.wav").read_bytes() == \
            (tmp_path / "b" / "train-000004_input.wav").read_bytes()
        assert read_wav(tmp_path / "a" / "train-000000_input.wav").num_channels == 4

    def test_filtered_has_three_references(self, tmp_path):
        assert main(["synth", "--examples", "2", "--kind", "supervised_filtered", "--out", str(tmp_path), *FAST]) == 0
        records = [json.loads(x) for x in (tmp_path / "manifest.jsonl").read_text().splitlines()]
        assert [r["N"] for r in records] == [3, 3]

    def test_zero_examples(self, tmp_path):
        assert main(["synth", "--examples", "0", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "manifest.jsonl").read_text() == ""

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["synth", "--examples", "1", "--out", str(blocker / "sub"), *FAST]) == 2


class TestTrain:
    def test_smoke_200_steps(self, tmp_path):
        out = tmp_path / "run"
        code = main(["train", "--out", str(out), "--steps", "200", "--set", "train.checkpoint_every=100",
                     "--set", "model.blocks_per_superblock=2", *FAST])
        assert code == 0
        records = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
        assert len(records) == 200
        assert all(np.isfinite(r["loss"]) for r in records)
        assert load_checkpoint(out / "final.ckpt").step == 200

    def test_resume_matches(self, tmp_path):
        common = ["--set", "train.precision=64", "--set", "model.blocks_per_superblock=2", *FAST]
        assert main(["train", "--out", str(tmp_path / "full"), "--steps", "6", *common]) == 0
        assert main(["train", "--out", str(tmp_path / "cut"), "--steps", "3", *common]) == 0
        assert main(["train", "--out", str(tmp_path / "cut"), "--steps", "6", *common]) == 0

        def strip(path):
            rows = [json.loads(x) for x in (path / "metrics.jsonl").read_text().splitlines()]
            return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]

        assert strip(tmp_path / "full") == strip(tmp_path / "cut")

    def test_warm_start_mismatch(self, tmp_path, capsys):
        ck = _checkpoint(tmp_path / "other.ckpt", ModelConfig.tiny(bottleneck_dim=16))
        code = main(["train", "--out", str(tmp_path / "r"), "--steps", "1", "--warm-start", ck, *FAST])
        assert code == 1
        err = capsys.readouterr().err
        assert "input.weight" in err and "tac.0.project.weight" in err

    def test_conflict_reported_before_compute(self, tmp_path):
        code = main(["train", "--out", str(tmp_path / "r"), "--mode", "semi", "--set", "paths.on_the_fly=false",
                     "--set", "paths.unsupervised_shards=" + str(tmp_path), *FAST])
        assert code == 1
        assert not (tmp_path / "r" / "metrics.jsonl").exists()

    def test_nan_exit_code(self, tmp_path):
        code = main(["train", "--out", str(tmp_path / "r"), "--steps", "3", "--set", "train.learning_rate=1e300",
                     "--set", "train.precision=64", *FAST])
        assert code == 3


class TestEval:
    def test_cross_eval_table(self, tmp_path, capsys):
        assert main(["synth", "--examples", "2", "--mics", "4", "--split", "test",
                     "--out", str(tmp_path / "d"), *FAST]) == 0
        ck = _checkpoint(tmp_path / "m.ckpt")
        capsys.readouterr()
        args = ["eval", "--checkpoint", ck, "--shards", str(tmp_path / "d"), "--mics", "1,2,4",
                "--report", str(tmp_path / "r.json")]
        assert main(args) == 0
        first = capsys.readouterr().out
        rows = [ln for ln in first.splitlines()[1:] if ln.strip()]
        assert [int(r.split()[1]) for r in rows] == [1, 2, 4]
        report = json.loads((tmp_path / "r.json").read_text())
        assert [s["channels"] for s in report["sets"]] == [[0], [0, 2], [0, 1, 2, 3]]
        assert main(args) == 0
        assert capsys.readouterr().out == first

    def test_train_and_test_splits(self, tmp_path, capsys):
        ck = _checkpoint(tmp_path / "m.ckpt")
        assert main(["eval", "--checkpoint", ck, "--split", "train,test", "--examples", "2", *FAST]) == 0
        names = [ln.split()[0] for ln in capsys.readouterr().out.splitlines()[1:]]
        assert names == ["train", "test"]

    def test_too_many_mics(self, tmp_path):
        ck = _checkpoint(tmp_path / "m.ckpt")
        assert main(["eval", "--checkpoint", ck, "--examples", "1", "--mics", "4", *FAST]) == 2

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--examples", "1", *FAST]) == 2


class TestSeparate:
    def test_outputs_sum_to_input(self, tmp_path, rng):
        ck = _checkpoint(tmp_path / "m.ckpt")
        x = MultiChannelSignal(rng.uniform(-0.5, 0.5, (3000, 2)))
        write_wav(tmp_path / "in.wav", x)
        assert main(["separate", "--checkpoint", ck, str(tmp_path / "in.wav"), "--out", str(tmp_path / "o"),
                     "--num-outputs", "3", "--block-seconds", "0.1", "--overlap-seconds", "0.02"]) == 0
        outs = [read_wav(tmp_path / "o" / f"source_{m}.wav") for m in range(3)]
        total = sum(o.samples for o in outs)
        ref = read_wav(tmp_path / "in.wav").samples
        assert np.max(np.abs(total - ref)) <= 1e-4 * np.max(np.abs(ref))

    def test_mono_input_to_multi_mic_model(self, tmp_path, rng):
        ck = _checkpoint(tmp_path / "m.ckpt")
        write_wav(tmp_path / "in.wav", MultiChannelSignal(rng.standard_normal((1000, 1)) * 0.1))
        assert main(["separate", "--checkpoint", ck, str(tmp_path / "in.wav"), "--out", str(tmp_path / "o")]) == 0
        assert read_wav(tmp_path / "o" / "source_0.wav").num_channels == 1

    def test_errors(self, tmp_path):
        ck = _checkpoint(tmp_path / "m.ckpt")
        write_wav(tmp_path / "short.wav", MultiChannelSignal(np.zeros((10, 1))))
        assert main(["separate", "--checkpoint", ck, str(tmp_path / "short.wav"), "--out", str(tmp_path)]) == 2
        (tmp_path / "bad.wav").write_bytes(b"RIFF0000WAVEjunk")
        assert main(["separate", "--checkpoint", ck, str(tmp_path / "bad.wav"), "--out", str(tmp_path)]) == 2
        write_wav(tmp_path / "ok.wav", MultiChannelSignal(np.zeros((100, 1))))
        assert main(["separate", "--checkpoint", ck, str(tmp_path / "ok.wav"), "--out", str(tmp_path),
                     "--num-outputs", "5"]) == 1


class TestBlockwise:
    def test_spans(self):
        spans = block_starts(1000, 300, 64, 32)
        assert spans[0] == (0, 300) and spans[-1][1] == 1000
        for (s0, e0), (s1, _) in zip(spans, spans[1:]):
            assert s1 % 32 == 0 and 64 <= e0 - s1 < 64 + 32

    def test_matches_single_pass_away_from_seams(self, rng):
        config = ModelConfig.tiny()
        params = init_params(config, 2)
        rate = 1000
        x = MultiChannelSignal(rng.standard_normal((60 * rate, 2)), rate)
        block, overlap = 10 * rate, 3 * rate
        whole = forward(x, params, config).estimates
        pieces = separate_long(x, params, config, block, overlap).estimates
        assert np.max(np.abs(pieces.sum(axis=2) - x.samples)) < 1e-9
        # block-edge context effects reach receptive_field frames; the cross-fade covers the overlap
        reach = (config.receptive_field() + 2) * config.hop
        keep = np.ones(x.num_samples, bool)
        spans = block_starts(x.num_samples, block, overlap, config.hop)
        for (_, prev_end), (start, _) in zip(spans, spans[1:]):
            keep[max(0, start - reach) : prev_end + reach] = False
        assert keep.sum() > 0.3 * x.num_samples
        err = np.max(np.abs(pieces[keep] - whole[keep]))
        assert err <= 1e-3 * np.max(np.abs(x.samples))
