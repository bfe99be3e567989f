import math

import numpy as np
import pytest

from heimdal import synth, trainer
from heimdal.errors import ConfigError
from heimdal.model import Model
from heimdal.trainer import (Adam, Dataset, LossInputs, TrainConfig,
                             cosine_lr, focal_offset_loss, loss, train)

from conftest import tiny_config


class TestLossPointChecks:
    def test_perfect_prediction_vanishes(self):
        value, _, _ = loss(LossInputs(detection_logit=30.0, true_label=1,
                                      predicted_offset=0.4,
                                      target_offset=0.4))
        assert value < 1e-10

    def test_gamma0_reduces_to_bce(self):
        value, _, _ = loss(LossInputs(detection_logit=0.0, true_label=1,
                                      gamma=0.0))
        assert abs(value - math.log(2.0)) < 1e-12

    def test_focal_value_at_half(self):
        value, _, _ = loss(LossInputs(detection_logit=0.0, true_label=1,
                                      gamma=4.0))
        assert abs(value - 0.0433217) < 1e-6

    def test_offset_term_gated_on_negatives(self):
        for d_hat in (-3.0, 0.0, 7.5):
            value, g_logit, g_off = loss(LossInputs(
                detection_logit=-1.0, true_label=0, predicted_offset=d_hat,
                target_offset=0.2, gamma=4.0))
            ref, _, _ = loss(LossInputs(detection_logit=-1.0, true_label=0,
                                        predicted_offset=0.0,
                                        target_offset=0.2, gamma=4.0))
            assert value == ref
            assert g_off == 0.0

    def test_offset_term_active_on_positives(self):
        value, _, g_off = loss(LossInputs(
            detection_logit=30.0, true_label=1, predicted_offset=0.7,
            target_offset=0.2, gamma=4.0))
        assert abs(value - 0.25) < 1e-6
        assert abs(g_off - 1.0) < 1e-6

    def test_focal_damping_ratio_exact(self):
        # for y=1: L(gamma=4)/L(gamma=0) == (1-p)^4 pointwise
        for logit in (-2.0, -0.5, 0.0, 0.8, 3.0):
            l4, _, _ = loss(LossInputs(logit, 1, gamma=4.0))
            l0, _, _ = loss(LossInputs(logit, 1, gamma=0.0))
            p = 1.0 / (1.0 + math.exp(-logit))
            assert abs(l4 / l0 - (1.0 - p) ** 4) < 1e-12

    def test_nan_targets_on_negatives_harmless(self):
        per, gl, go, _, _ = focal_offset_loss(
            np.array([0.5, -0.5]), np.array([1.0, 0.0]),
            np.array([0.3, 0.9]), np.array([0.25, math.nan]))
        assert np.all(np.isfinite(per))
        assert np.all(np.isfinite(gl))
        assert go[1] == 0.0


class TestLossGradients:
    def test_float64_grid(self):
        # analytic gradients vs central differences on the (y, p, gamma)
        # grid, float64, rel err < 1e-6
        h = 1e-7
        for y in (0, 1):
            for p in (0.01, 0.5, 0.99):
                logit = math.log(p / (1.0 - p))
                for gamma in (0.0, 1.0, 4.0):
                    for d_hat in (0.1, 0.6):
                        args = dict(true_label=y, predicted_offset=d_hat,
                                    target_offset=0.3, gamma=gamma)
                        _, g_logit, g_off = loss(LossInputs(logit, **args))
                        lp, _, _ = loss(LossInputs(logit + h, **args))
                        lm, _, _ = loss(LossInputs(logit - h, **args))
                        fd = (lp - lm) / (2 * h)
                        assert abs(g_logit - fd) <= 1e-6 * max(
                            1.0, abs(fd)), (y, p, gamma)
                        lp, _, _ = loss(LossInputs(
                            logit, true_label=y, predicted_offset=d_hat + h,
                            target_offset=0.3, gamma=gamma))
                        lm, _, _ = loss(LossInputs(
                            logit, true_label=y, predicted_offset=d_hat - h,
                            target_offset=0.3, gamma=gamma))
                        fd_off = (lp - lm) / (2 * h)
                        assert abs(g_off - fd_off) <= 1e-6 * max(
                            1.0, abs(fd_off))

    def test_end_to_end_float32(self):
        # full model + loss on a tiny config vs finite differences,
        # float32, rel err < 1e-3 on gradients above the float32
        # difference-quotient noise floor
        config = tiny_config("tiny-a")
        model = Model(config)
        r = model.receptive_field()
        rng = np.random.default_rng(5)
        w = model.init_weights(3)
        batch = 8
        x = rng.normal(0, 1, (batch, 1, config.input_freq, r)).astype(
            np.float32)
        labels = (np.arange(batch) % 2).astype(np.float32)
        targets = rng.uniform(0, 0.9, batch).astype(np.float32)

        def run():
            out, cache = model.forward(w, x, "train",
                                       np.random.default_rng(0))
            logits = out.detection_logits[:, 0, 0, 0]
            offs = out.offsets[:, 0, 0, 0]
            per, gl, go, _, _ = focal_offset_loss(logits, labels, offs,
                                                  targets, 4.0)
            return float(per.mean()), gl / batch, go / batch, cache

        _, gl, go, cache = run()
        grads = model.backward(
            w, cache, gl.reshape(-1, 1, 1, 1).astype(np.float32),
            go.reshape(-1, 1, 1, 1).astype(np.float32))

        h = 1e-3
        worst = 0.0
        checked = 0
        for name in model.trainable_names():
            g = np.asarray(grads[name]).reshape(-1)
            gmax = np.abs(g).max()
            if gmax < 0.01:
                continue
            flat = w[name].reshape(-1)
            eligible = np.flatnonzero(np.abs(g) >= 0.5 * gmax)
            local = np.random.default_rng(2)
            picks = local.choice(eligible, size=min(2, eligible.size),
                                 replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + h
                fp = run()[0]
                flat[i] = orig - h
                fm = run()[0]
                flat[i] = orig
                fd = (fp - fm) / (2 * h)
                a = float(g[i])
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
                worst = max(worst, rel)
                checked += 1
        assert checked >= 20
        assert worst < 1e-3, f"end-to-end FD rel err {worst}"
        print(f"end-to-end float32 FD: {worst:.2e} over {checked} coords")


class TestAdam:
    def test_zero_grads_keep_params(self):
        params = {"w": np.array([1.0, -2.0], dtype=np.float32)}
        grads = {"w": np.zeros(2, dtype=np.float32)}
        opt = Adam(["w"])
        before = params["w"].copy()
        opt.step(params, grads, 0.01)
        np.testing.assert_array_equal(params["w"], before)

    def test_first_step_closed_form(self):
        params = {"w": np.array([0.0], dtype=np.float32)}
        grads = {"w": np.array([1.0], dtype=np.float32)}
        opt = Adam(["w"])
        opt.step(params, grads, 0.01)
        # bias-corrected m=1, v=1 -> delta = -lr / (1 + eps)
        expected = -0.01 / (1.0 + 1e-8)
        assert abs(params["w"][0] - expected) < 1e-9

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        p1 = {"w": rng.normal(0, 1, 8).astype(np.float32)}
        p2 = {"w": p1["w"].copy()}
        g = {"w": rng.normal(0, 1, 8).astype(np.float32)}
        o1, o2 = Adam(["w"]), Adam(["w"])
        for _ in range(5):
            o1.step(p1, g, 0.01)
            o2.step(p2, g, 0.01)
        np.testing.assert_array_equal(p1["w"], p2["w"])


class TestCosine:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0) == 0.01
        assert abs(cosine_lr(50) - 0.005) < 1e-12
        assert cosine_lr(100) < 1e-17

    def test_monotone_decay(self):
        values = [cosine_lr(e) for e in range(101)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_schedule(self):
        with pytest.raises(ConfigError):
            cosine_lr(101)


@pytest.fixture(scope="module")
def mini_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    spec = synth.default_spec(
        seed=11, train_count=12, test_positive_count=2,
        test_negative_count=2, min_negative_test_hours=0.0,
        lead_frames=(6, 10), tail_frames=(6, 10))
    synth.generate(spec, out)
    return out


class TestTrainLoop:
    def _config(self):
        return tiny_config("tiny-d")

    def test_lr0_keeps_trainable_params(self, mini_corpus):
        config = self._config()
        dataset = Dataset(mini_corpus)
        tc = TrainConfig(data_dir=str(mini_corpus), keyword=["A", "B", "C"],
                         epochs=1, batch_utterances=4, seed=1, base_lr=0.0)
        weights, _ = train(dataset, config, tc)
        reference = Model(config).init_weights(1)
        for name in Model(config).trainable_names():
            np.testing.assert_array_equal(weights[name], reference[name])

    def test_deterministic_bitwise(self, mini_corpus):
        config = self._config()
        results = []
        for _ in range(2):
            dataset = Dataset(mini_corpus)
            tc = TrainConfig(data_dir=str(mini_corpus),
                             keyword=["A", "B", "C"], epochs=2,
                             batch_utterances=4, seed=7)
            weights, log_rows = train(dataset, config, tc)
            results.append((weights, log_rows))
        w1, w2 = results[0][0], results[1][0]
        for name in w1:
            np.testing.assert_array_equal(w1[name], w2[name])
        assert [r.mean_loss for r in results[0][1]] == \
               [r.mean_loss for r in results[1][1]]

    def test_loss_decreases(self, mini_corpus):
        config = self._config()
        dataset = Dataset(mini_corpus)
        tc = TrainConfig(data_dir=str(mini_corpus), keyword=["A", "B", "C"],
                         epochs=12, batch_utterances=12, seed=3)
        weights, log_rows = train(dataset, config, tc)
        assert log_rows[-1].mean_loss < log_rows[0].mean_loss

    def test_epoch_log_format(self, mini_corpus, tmp_path):
        config = self._config()
        dataset = Dataset(mini_corpus)
        tc = TrainConfig(data_dir=str(mini_corpus), keyword=["A", "B", "C"],
                         epochs=2, batch_utterances=4, seed=5)
        _, log_rows = train(dataset, config, tc)
        path = tmp_path / "log.csv"
        trainer.write_epoch_log(path, log_rows, seed=5)
        lines = path.read_text().splitlines()
        assert lines[0] == "# seed=5"
        assert lines[1] == "epoch,lr,mean_loss,mean_cls_loss,mean_offset_loss"
        assert len(lines) == 4

    def test_augmented_features_differ_across_epochs(self, mini_corpus):
        dataset = Dataset(mini_corpus)
        tc = TrainConfig(data_dir=str(mini_corpus), keyword=["A", "B", "C"],
                         augment_gain=True)
        assert not tc.cached_features
        rng = np.random.default_rng(0)
        uid = dataset.utt_ids[0]
        f1 = trainer._utterance_features(dataset, tc, uid, rng, None)
        f2 = trainer._utterance_features(dataset, tc, uid, rng, None)
        assert np.abs(f1 - f2).max() > 1e-3

    def test_train_config_json(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text('{"data_dir": "d", "keyword": "A B C", '
                        '"epochs": 5, "seed": 2}')
        tc = TrainConfig.from_json(path)
        assert tc.keyword == ["A", "B", "C"]
        assert tc.epochs == 5
        assert tc.cached_features
