"""Acceptance suite: one test class per criterion.

A PASS/FAIL line per criterion is printed at the end of the pytest run.
The two toy training runs (criteria 7 and 8) are cached under
``tests/.cache/acceptance`` keyed by their configuration and the library
source, so they only rerun when either changes.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

import mcmixit
from mcmixit import autodiff as ad
from mcmixit.checkpoint import load_checkpoint
from mcmixit.dataset import DataConfig, make_example
from mcmixit.losses import loss_tensor, mc_mixit_loss, mixit_loss, pit_loss
from mcmixit.model import ModelConfig, count_params, forward, forward_batch, init_params, remove_tac
from mcmixit.scenes import make_supervised_filtered, random_scene, render_scene
from mcmixit.signal import LossConfig, MultiChannelSignal, thresholded_snr
from mcmixit.training import SyntheticSource, TrainConfig, evaluate, select_channels, train, warm_start
from gradcases import CASES_PER_OP, OPS, check_op
from conftest import rel_error
from oracles import brute_mixit, brute_pit

CACHE = Path(__file__).parent / ".cache" / "acceptance"

# toy learning setup shared by criteria 7 and 8
TOY_MODEL = ModelConfig.tiny()
TOY_UNSUP = DataConfig(kind="mom", num_mics=2, unsup_seconds=0.25)
TOY_SUP = DataConfig(kind="supervised_filtered", num_mics=2, sup_seconds=0.25, noise_level=0.05, filter_len=128)
TOY_STEPS = 10_000
TOY_EVAL_EXAMPLES = 64
TOY_THRESHOLD_DB = 5.0


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(mcmixit.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _toy_run(mode: str):
    tc = TrainConfig(mode=mode, steps=TOY_STEPS, learning_rate=1e-3, batch_size=8, checkpoint_every=500)
    spec = json.dumps([mode, TOY_MODEL.to_dict(), tc.to_dict(), TOY_SUP.to_dict(), TOY_UNSUP.to_dict()],
                      sort_keys=True)
    key = hashlib.sha256((spec + _source_digest()).encode()).hexdigest()[:16]
    out = CACHE / f"{mode}-{key}"
    final = out / "final.ckpt"
    if not final.exists():
        t0 = time.perf_counter()
        train(TOY_MODEL, tc, out, supervised=SyntheticSource(TOY_SUP), unsupervised=SyntheticSource(TOY_UNSUP))
        (out / "runtime.txt").write_text(f"{time.perf_counter() - t0:.1f}\n")
    return load_checkpoint(final).params


def _toy_score(mode: str):
    params = {k: v.astype(np.float64) for k, v in _toy_run(mode).items()}
    held_out = [make_example(TOY_UNSUP, "test", i) for i in range(TOY_EVAL_EXAMPLES)]
    return evaluate(params, TOY_MODEL, held_out)


@pytest.fixture(scope="module")
def toy_reports():
    return {}


def _report(toy_reports, mode):
    if mode not in toy_reports:
        toy_reports[mode] = _toy_score(mode)
    return toy_reports[mode]


@pytest.mark.criterion(1, "MixIT matches an exhaustive oracle on 200 random instances")
class TestCriterion1:
    def test_mixit_oracle(self):
        t0 = time.perf_counter()
        checked = 0
        for m in (2, 3, 4, 8):
            for i in range(50):
                rng = np.random.default_rng([1, m, i])
                refs = rng.standard_normal((256, 2))
                ests = rng.standard_normal((256, m)) * rng.uniform(0.2, 2.0, size=m)
                res = mixit_loss(refs, ests)
                loss, assign = brute_mixit(refs[:, None], ests[:, None])
                assert abs(res.loss - loss) <= 1e-9, (m, i)
                assert res.matrix.assignment == assign, (m, i)
                checked += 1
        assert checked == 200
        assert time.perf_counter() - t0 < 30.0


@pytest.mark.criterion(2, "MC-MixIT and PIT match exhaustive oracles; C=1 reduces to MixIT")
class TestCriterion2:
    @pytest.mark.parametrize("c", [1, 2, 4])
    def test_mc_mixit_oracle(self, c):
        for m in (2, 3, 4):
            for i in range(10):
                rng = np.random.default_rng([2, c, m, i])
                refs = rng.standard_normal((256, c, 2))
                ests = rng.standard_normal((256, c, m))
                res = mc_mixit_loss(refs, ests)
                loss, assign = brute_mixit(refs, ests)
                assert abs(res.loss - loss) <= 1e-9
                assert res.matrix.assignment == assign

    def test_single_channel_equals_mixit(self):
        for i in range(50):
            rng = np.random.default_rng([3, i])
            refs = rng.standard_normal((256, 2))
            ests = rng.standard_normal((256, 4))
            a, b = mixit_loss(refs, ests), mc_mixit_loss(refs[:, None], ests[:, None])
            assert a.loss == b.loss and a.matrix == b.matrix

    @pytest.mark.parametrize("c", [1, 2, 4])
    def test_pit_oracle(self, c):
        for i in range(10):
            rng = np.random.default_rng([4, c, i])
            refs = rng.standard_normal((256, c, 2))
            ests = rng.standard_normal((256, c, 4))
            res = pit_loss(refs, ests)
            loss, chosen, _ = brute_pit(refs, ests)
            assert abs(res.loss - loss) <= 1e-9
            assert res.matrix.estimate_for == chosen

    def test_pit_three_of_eight(self):
        rng = np.random.default_rng(5)
        refs = rng.standard_normal((256, 2, 3))
        ests = rng.standard_normal((256, 2, 8))
        res = pit_loss(refs, ests)
        loss, chosen, count = brute_pit(refs, ests)
        assert res.num_candidates == count == 336
        assert abs(res.loss - loss) <= 1e-9 and res.matrix.estimate_for == chosen


@pytest.mark.criterion(3, "perfect estimates score exactly 30 dB at tau=0.001")
class TestCriterion3:
    def test_cap(self):
        for i in range(20):
            rng = np.random.default_rng([6, i])
            y = rng.standard_normal(int(rng.integers(16, 4000))) * rng.uniform(1e-3, 1e3)
            assert abs(thresholded_snr(y, y) - 30.0) <= 1e-9

    def test_cap_through_losses(self):
        rng = np.random.default_rng(7)
        refs = rng.standard_normal((256, 2, 2))
        ests = np.concatenate([refs, np.zeros((256, 2, 2))], axis=2)
        for res in (mc_mixit_loss(refs, ests), pit_loss(refs, ests)):
            np.testing.assert_allclose(res.per_channel_snr, 30.0, atol=1e-9)
            assert abs(res.loss + 120.0) <= 1e-9


@pytest.mark.criterion(4, "autodiff ops and end-to-end loss pass finite-difference checks")
class TestCriterion4:
    @pytest.mark.parametrize("op", OPS)
    def test_op(self, op):
        worst = max(check_op(op, seed, h=1e-5) for seed in range(CASES_PER_OP))
        assert worst <= 1e-4, worst

    def test_end_to_end_tiny_preset(self):
        config = ModelConfig.tiny()
        rng = np.random.default_rng(8)
        params = init_params(config, 8)
        for name, value in params.items():
            if name.endswith(".bias") or name.endswith(".scale"):
                params[name] = value + 0.3 * rng.standard_normal(value.shape)
        x = rng.standard_normal((1, 2, 160))
        refs = rng.standard_normal((1, 2, 2, 160))
        est0 = forward_batch(x, params, config).data
        res = mc_mixit_loss(np.transpose(refs[0], (2, 0, 1)), np.transpose(est0[0], (2, 0, 1)))
        mats = res.matrix.dense()[None]

        def value():
            return float(loss_tensor(forward_batch(x, params, config), refs, mats, LossConfig()).data)

        names = sorted(params)
        tensors = {k: ad.Tensor(params[k], requires_grad=True) for k in names}
        loss = loss_tensor(forward_batch(x, tensors, config), refs, mats, LossConfig())
        grads = dict(zip(names, ad.backward(loss, [tensors[k] for k in names])))

        h = 1e-5
        analytic, numeric = [], []
        for name in names:
            arr = params[name]
            for flat in rng.choice(arr.size, size=min(arr.size, 3), replace=False):
                idx = np.unravel_index(flat, arr.shape)
                orig = arr[idx]
                arr[idx] = orig + h
                up = value()
                arr[idx] = orig - h
                down = value()
                arr[idx] = orig
                numeric.append((up - down) / (2 * h))
                analytic.append(grads[name][idx])
        assert rel_error(analytic, numeric) <= 1e-3

        # one unit-norm random direction through every parameter at once
        direction = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        norm = np.sqrt(sum(float(np.sum(v**2)) for v in direction.values()))
        direction = {k: v / norm for k, v in direction.items()}
        base = {k: v.copy() for k, v in params.items()}
        for sign in (1, -1):
            for k in names:
                params[k] = base[k] + sign * h * direction[k]
            if sign == 1:
                up = value()
            else:
                down = value()
        params.update(base)
        fd = (up - down) / (2 * h)
        exact = sum(float(np.sum(grads[k] * direction[k])) for k in names)
        assert abs(fd - exact) <= 1e-3 * abs(exact)


def _random_params(config, seed):
    rng = np.random.default_rng(seed + 100)
    params = init_params(config, seed)
    for name, value in params.items():
        if name.endswith(".bias") or name.endswith(".scale"):
            params[name] = value + 0.3 * rng.standard_normal(value.shape)
    return params


@pytest.mark.criterion(5, "architecture invariants hold over 20 seeded cases each")
class TestCriterion5:
    config = ModelConfig.tiny()
    seeds = range(20)

    def test_channel_permutation_equivariance(self):
        for seed in self.seeds:
            rng = np.random.default_rng([9, seed])
            params = _random_params(self.config, seed)
            c = int(rng.integers(2, 6))
            x = rng.standard_normal((int(rng.integers(64, 400)), c))
            perm = rng.permutation(c)
            a = forward(MultiChannelSignal(x[:, perm]), params, self.config).estimates
            b = forward(MultiChannelSignal(x), params, self.config).estimates[:, perm]
            assert np.max(np.abs(a - b)) <= 1e-5, seed

    def test_identical_channel_collapse(self):
        for seed in self.seeds:
            rng = np.random.default_rng([10, seed])
            params = _random_params(self.config, seed)
            mono = rng.standard_normal((int(rng.integers(64, 400)), 1))
            c = int(rng.integers(2, 9))
            single = forward(MultiChannelSignal(mono), params, self.config).estimates
            multi = forward(MultiChannelSignal(np.repeat(mono, c, axis=1)), params, self.config).estimates
            for ch in range(c):
                assert np.max(np.abs(multi[:, ch] - single[:, 0])) <= 1e-10, seed

    def test_parameter_count_across_channels(self):
        for seed in self.seeds:
            rng = np.random.default_rng([11, seed])
            params = init_params(self.config, seed)
            n = count_params(params)
            for c in (1, 8):
                est = forward(MultiChannelSignal(rng.standard_normal((128, c))), params, self.config)
                assert est.num_channels == c and count_params(params) == n
        assert count_params(init_params(ModelConfig())) == 4_724_608

    def test_tac_bypass_equals_independent_runs(self):
        for seed in self.seeds:
            rng = np.random.default_rng([12, seed])
            params, bypass = remove_tac(_random_params(self.config, seed), self.config)
            c = int(rng.integers(2, 5))
            x = rng.standard_normal((int(rng.integers(64, 400)), c))
            joint = forward(MultiChannelSignal(x), params, bypass).estimates
            for ch in range(c):
                alone = forward(MultiChannelSignal(x[:, ch : ch + 1]), params, bypass).estimates
                assert np.max(np.abs(joint[:, ch] - alone[:, 0])) <= 1e-6, seed

    def test_mixture_consistency(self):
        for seed in self.seeds:
            rng = np.random.default_rng([13, seed])
            m = int(rng.integers(1, 9))
            config = ModelConfig.tiny(num_outputs=m)
            c = int(rng.integers(1, 9))
            x = rng.standard_normal((int(rng.integers(64, 2000)), c)) * rng.uniform(0.01, 10)
            est = forward(MultiChannelSignal(x), _random_params(config, seed), config).estimates
            assert np.max(np.abs(est.sum(axis=2) - x)) <= 1e-5, seed


@pytest.mark.criterion(6, "a single-mic checkpoint evaluates at 1, 2, 4 and 8 mics, deterministically")
class TestCriterion6:
    def test_cross_channel_evaluation(self, tmp_path):
        model = ModelConfig.tiny()
        one_mic = DataConfig(kind="mom", num_mics=1, unsup_seconds=0.1)
        tc = TrainConfig(steps=20, batch_size=4, learning_rate=1e-3)
        train(model, tc, tmp_path, unsupervised=SyntheticSource(one_mic), log_wall_time=False)
        params = warm_start(init_params(model, 1, np.float64), tmp_path / "final.ckpt")
        eight = [make_example(DataConfig(kind="mom", num_mics=8, unsup_seconds=0.1), "test", i) for i in range(4)]
        for k in (1, 2, 4, 8):
            chans = select_channels(8, k)
            first = evaluate(params, model, eight, channels=chans)
            again = evaluate(params, model, eight, channels=chans)
            assert first.num_examples == 4 and np.isfinite(first.mean_si_snri)
            assert first.to_dict() == again.to_dict()


@pytest.mark.criterion(7, "toy unsupervised MC-MixIT run reaches >= 5 dB held-out SI-SNRi")
class TestCriterion7:
    def test_toy_learning(self, toy_reports):
        report = _report(toy_reports, "unsupervised")
        print(f"unsupervised: mean SI-SNRi {report.mean_si_snri:.2f} dB, per source {report.per_source_si_snri}")
        assert report.num_examples == TOY_EVAL_EXAMPLES
        assert report.mean_si_snri >= TOY_THRESHOLD_DB


@pytest.mark.criterion(8, "semi-supervised toy run is no worse than unsupervised minus 0.5 dB")
class TestCriterion8:
    def test_semi_not_worse(self, toy_reports):
        unsup = _report(toy_reports, "unsupervised")
        semi = _report(toy_reports, "semi")
        print(f"semi: {semi.mean_si_snri:.2f} dB vs unsupervised {unsup.mean_si_snri:.2f} dB")
        assert semi.mean_si_snri >= unsup.mean_si_snri - 0.5


@pytest.mark.criterion(9, "filtered references recover noiseless FIR images and partition the input")
class TestCriterion9:
    @pytest.mark.parametrize("c", [1, 2, 4])
    def test_filter_recovers_image(self, c):
        t = 16000
        for i in range(3):
            rng = np.random.default_rng([14, c, i])
            a = random_scene(rng, c, t, id_prefix="a", noise_level=0.1)
            b = random_scene(rng, c, t, id_prefix="b", fir_len=64, kinds=("tone_complex",))
            ex = make_supervised_filtered(a, b, b.sources[0].signal, c, t, filter_len=512)
            image = render_scene(b, c, t)[0].samples
            assert np.sum(ex.references[:, :, 2] ** 2) / np.sum(image**2) < 1e-4
            assert np.array_equal(ex.input.samples, ex.references.sum(axis=2))
            assert np.max(np.abs(ex.input.samples - render_scene(a, c, t)[0].samples - image)) < 1e-10


@pytest.mark.criterion(10, "identical 500-step runs give identical logs; resume matches")
class TestCriterion10:
    model = ModelConfig.tiny()
    data = DataConfig(kind="mom", num_mics=2, unsup_seconds=0.05)

    def _train(self, out, steps):
        tc = TrainConfig(steps=steps, batch_size=4, learning_rate=1e-3, precision=64, checkpoint_every=100)
        params = train(self.model, tc, out, unsupervised=SyntheticSource(self.data), log_wall_time=False)
        return params, (out / "metrics.jsonl").read_text()

    def test_reproducible_and_resumable(self, tmp_path):
        a, log_a = self._train(tmp_path / "a", 500)
        b, log_b = self._train(tmp_path / "b", 500)
        assert len(log_a.splitlines()) == 500
        assert log_a == log_b
        self._train(tmp_path / "c", 250)
        c, log_c = self._train(tmp_path / "c", 500)
        assert log_c == log_a
        for k in a:
            assert np.array_equal(a[k], b[k]) and np.array_equal(a[k], c[k])
