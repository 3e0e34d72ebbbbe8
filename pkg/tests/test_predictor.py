import numpy as np
import pytest

from voicelike import audio, metrics
from voicelike import predictor as pred
from voicelike import tensorkit as tk
from voicelike.augment import AugmentConfig
from voicelike.errors import DataError

NO_AUG = AugmentConfig(pad_prob=0, reverb_prob=0, noise_prob=0, reverse_prob=0)


class TestArchitecture:
    def test_layer_shapes(self):
        m = pred.build_model()
        shapes = {k: v.shape for k, v in m.state_dict().items() if k.endswith("weight")}
        assert shapes == {"frame1.weight": (240, 32), "frame2.weight": (160, 32), "frame3.weight": (32, 32),
                          "segment4.weight": (64, 32), "segment5.weight": (32, 4)}

    def test_min_frames(self):
        assert pred.MIN_FRAMES == 17
        m = pred.build_model()
        assert pred.predict_raw(m, np.zeros((17, 80))).shape == (4,)
        with pytest.raises(ValueError, match="17"):
            pred.predict_raw(m, np.zeros((16, 80)))

    def test_groups(self):
        assert pred.GROUP_NAMES == ["M_UNDER40", "M_40PLUS", "F_UNDER40", "F_40PLUS"]
        assert [g.listener_count for g in pred.ListenerGroup] == [202, 323, 143, 210]

    def test_same_seed_identical(self):
        a, b = pred.build_model(seed=3).state_dict(), pred.build_model(seed=3).state_dict()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
        assert not np.array_equal(a["frame1.weight"], pred.build_model(seed=4).state_dict()["frame1.weight"])

    def test_zero_parameters_give_output_bias(self):
        m = pred.build_model()
        for name, p in m.params.items():
            p.data[...] = 0.0
        m.params["segment5.bias"].data[...] = [0.1, -0.2, 0.3, 0.4]
        x = np.random.default_rng(0).normal(size=(30, 80))
        np.testing.assert_array_equal(pred.predict_raw(m, x), np.float32([0.1, -0.2, 0.3, 0.4]))

    def test_pure_and_batched(self):
        m = pred.build_model(seed=1)
        x = np.random.default_rng(1).normal(size=(3, 40, 80))
        batched = m.forward(x).data
        np.testing.assert_array_equal(pred.predict_raw(m, x[1]), pred.predict_raw(m, x[1]))
        for i in range(3):
            np.testing.assert_allclose(batched[i], pred.predict_raw(m, x[i]), rtol=1e-5, atol=1e-6)

    def test_gradients_full_size(self):
        m = pred.build_model(seed=2).astype(np.float64)
        x = np.random.default_rng(2).normal(size=(2, 25, 80))
        y = np.random.default_rng(3).normal(size=(2, 4))
        assert tk.fd_check(lambda: tk.mse(m.forward(x), y), m.parameters(), max_elems=20) < 1e-4

    def test_checkpoint_round_trip(self, tmp_path):
        m = pred.build_model(seed=5)
        m.buffers["feat_mean"][...] = 1.5
        m.save(tmp_path / "p.lkbl")
        back = pred.PredictorModel.load(tmp_path / "p.lkbl")
        x = np.random.default_rng(0).normal(size=(20, 80))
        np.testing.assert_array_equal(pred.predict_raw(back, x), pred.predict_raw(m, x))


class TestCalibration:
    def test_identity_statistics(self):
        t = np.random.default_rng(0).normal(size=(20, 4))
        c = pred.fit_calibration(t, t)
        np.testing.assert_array_equal(c.mu, c.mu_hat)
        np.testing.assert_array_equal(c.sigma, c.sigma_hat)

    def test_affine_predictions(self):
        t = np.random.default_rng(1).normal(size=(30, 4))
        c = pred.fit_calibration(2 * t + 1, t)
        np.testing.assert_allclose(c.mu_hat, 2 * c.mu + 1, atol=1e-12)
        np.testing.assert_allclose(c.sigma_hat, 2 * c.sigma, atol=1e-12)

    def test_symmetric_pair(self):
        t = np.array([[-1.0] * 4, [1.0] * 4])
        c = pred.fit_calibration(t * 3, t)
        np.testing.assert_array_equal(c.mu, 0.0)
        np.testing.assert_array_equal(c.sigma, 1.0)

    def test_substitution(self):
        c = pred.CalibrationParams(mu=np.zeros(4), sigma=np.full(4, 0.3), mu_hat=np.full(4, 0.1),
                                   sigma_hat=np.full(4, 0.2))
        np.testing.assert_allclose(pred.apply_calibration(c, np.full(4, 0.5)), 0.6, rtol=1e-15)

    def test_matched_is_identity(self):
        c = pred.CalibrationParams(mu=np.full(4, 0.2), sigma=np.full(4, 0.5), mu_hat=np.full(4, 0.2),
                                   sigma_hat=np.full(4, 0.5))
        y = np.random.default_rng(0).normal(size=(5, 4))
        # (y - m) + m is exact only up to rounding
        np.testing.assert_allclose(pred.apply_calibration(c, y), y, rtol=0, atol=4e-16)

    def test_moments_matched_and_ranks_kept(self):
        rng = np.random.default_rng(2)
        t = rng.uniform(-1, 1, (50, 4))
        p = 0.3 * t + rng.normal(0, 0.2, (50, 4)) + 0.7
        c = pred.fit_calibration(p, t)
        y = pred.apply_calibration(c, p)
        np.testing.assert_allclose(y.mean(0), t.mean(0), atol=1e-12)
        np.testing.assert_allclose(y.std(0), t.std(0), atol=1e-12)
        for g in range(4):
            assert metrics.spearman_srcc(y[:, g], t[:, g]) == metrics.spearman_srcc(p[:, g], t[:, g])
            assert metrics.kendall_tau(y[:, g], t[:, g]) == metrics.kendall_tau(p[:, g], t[:, g])

    def test_pooled_variant(self):
        rng = np.random.default_rng(3)
        t, p = rng.normal(size=(40, 4)), rng.normal(2, 3, size=(40, 4))
        y = pred.apply_calibration(pred.fit_calibration(p, t), p, pooled=True)
        assert y.mean() == pytest.approx(t.mean(), abs=1e-12)
        assert y.std() == pytest.approx(t.std(), abs=1e-12)

    def test_dict_round_trip(self):
        rng = np.random.default_rng(4)
        c = pred.fit_calibration(rng.normal(size=(10, 4)), rng.normal(size=(10, 4)))
        back = pred.CalibrationParams.from_dict(c.to_dict())
        np.testing.assert_array_equal(back.sigma_hat, c.sigma_hat)
        assert back.pooled_mu == c.pooled_mu

    def test_errors(self):
        with pytest.raises(ValueError, match="variance"):
            pred.fit_calibration(np.ones((5, 4)), np.zeros((5, 4)))
        with pytest.raises(ValueError):
            pred.fit_calibration(np.zeros((1, 4)), np.zeros((1, 4)))
        with pytest.raises(ValueError):
            pred.fit_calibration(np.zeros((3, 4)), np.zeros((2, 4)))


class TestClassify:
    @pytest.mark.parametrize("r,label", [(0.3, "liked"), (-0.3, "disliked"), (0.0, "liked")])
    def test_rule(self, r, label):
        assert pred.classify_liked([r] * 4) == label


class TestTraining:
    def test_lr_zero_leaves_parameters(self, tiny_corpus):
        _, recs = tiny_corpus
        m = pred.build_model(seed=0)
        cfg = pred.TrainConfig(epochs=1, batch_size=4, adam=tk.AdamConfig(lr=0.0), augment=NO_AUG,
                               fit_normalizer=False, crop_sec=0.5)
        out, hist = pred.train(m, recs, cfg)
        for k, v in m.state_dict().items():
            np.testing.assert_array_equal(out.state_dict()[k], v)
        assert len(hist) == 1 and set(hist[0]) == {"epoch", "loss", "val_srcc", "val_mse"}

    def test_reproducible_history(self, tiny_corpus):
        _, recs = tiny_corpus
        cfg = pred.TrainConfig(epochs=2, batch_size=4, seed=1, crop_sec=0.5)
        _, h1 = pred.train(pred.build_model(seed=0), recs, cfg)
        _, h2 = pred.train(pred.build_model(seed=0), recs, cfg)
        assert h1 == h2

    def test_missing_split(self, tiny_corpus):
        _, recs = tiny_corpus
        with pytest.raises(DataError, match="val"):
            pred.train(pred.build_model(), [r for r in recs if r["split"] != "val"], pred.TrainConfig(epochs=1))

    def test_missing_ratings(self, tiny_corpus):
        _, recs = tiny_corpus
        recs = [dict(r, ratings=None) if r["split"] == "train" else r for r in recs]
        with pytest.raises(DataError, match="ratings"):
            pred.train(pred.build_model(), recs, pred.TrainConfig(epochs=1))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            pred.TrainConfig(epochs=0)


class TestAnnotate:
    def setup_method(self):
        self.model = pred.build_model(seed=0)
        rng = np.random.default_rng(0)
        self.calib = pred.fit_calibration(rng.normal(size=(8, 4)), rng.uniform(-1, 1, (8, 4)))

    def test_empty(self):
        assert pred.annotate_corpus(self.model, self.calib, []) == ([], [])

    def test_matches_manual_composition(self, tiny_corpus):
        _, recs = tiny_corpus
        out, rejects = pred.annotate_corpus(self.model, self.calib, recs[:3], threads=2)
        assert len(out) == 3 and rejects == []
        for rec, o in zip(recs[:3], out):
            mel = audio.load_mel(rec["audio"], audio.MelConfig())
            expect = pred.apply_calibration(self.calib, pred.predict_raw(self.model, mel))
            np.testing.assert_array_equal(o["ratings_pred"], expect)
            assert o["ratings"] == o["ratings_pred"]
            assert o["ratings_orig"] == rec["ratings"]

    def test_unrated_has_no_sidecar(self, tiny_corpus):
        _, recs = tiny_corpus
        out, _ = pred.annotate_corpus(self.model, self.calib, [dict(recs[0], ratings=None)])
        assert "ratings_orig" not in out[0]

    def test_bad_audio_goes_to_rejects(self, tiny_corpus, tmp_path):
        _, recs = tiny_corpus
        (tmp_path / "bad.wav").write_bytes(b"garbage")
        bad = dict(recs[0], id="bad", audio=str(tmp_path / "bad.wav"))
        out, rejects = pred.annotate_corpus(self.model, self.calib, [recs[1], bad, recs[2]])
        assert [r["id"] for r in out] == [recs[1]["id"], recs[2]["id"]]
        assert rejects[0]["id"] == "bad" and rejects[0]["error"]

    def test_order_kept_across_chunks(self, tiny_corpus):
        _, recs = tiny_corpus
        pairs = list(pred.iter_annotate(self.model, self.calib, recs[:5], threads=3, chunk=2))
        assert [r["id"] for r, _ in pairs] == [r["id"] for r in recs[:5]]
