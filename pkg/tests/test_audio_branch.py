import numpy as np
import pytest

from mmsent import tensor as T
from mmsent.audio import (
    AttentionPool,
    AudioBranch,
    AudioBranchConfig,
    concat_feature_kinds,
    raw_frame_sequence,
)
from mmsent.dsp import FeatureSequence, Waveform
from mmsent.errors import ConfigError, ContractError, DimensionError
from mmsent.layers import dense_forward
from mmsent.tensor import Tensor, gradient_check


def tiny_config(**kw):
    base = dict(
        feature_kinds=("mfcc",),
        lstm_hidden=3,
        kernel_sizes=(3,),
        channels_per_kernel=2,
        cnn_in_channels=4,
        attention_width=3,
        asv_width=4,
        dropout=0.0,
        conv_dropout=0.0,
    )
    base.update(kw)
    return AudioBranchConfig(**base)


class TestAttentionPool:
    def test_identical_rows_give_uniform_weights(self, rng):
        pool = AttentionPool(4, rng)
        row = rng.normal(size=4)
        hs = Tensor(np.tile(row, (6, 1)))
        weights, pooled = pool.forward(hs)
        assert np.allclose(weights.data, np.full(6, 1 / 6), atol=1e-12)
        assert np.allclose(pooled.data, row, atol=1e-12)

    def test_single_row_gets_weight_one(self, rng):
        pool = AttentionPool(3, rng)
        h = rng.normal(size=(1, 3))
        weights, pooled = pool.forward(Tensor(h))
        assert weights.data.shape == (1,)
        assert weights.data[0] == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(pooled.data, h[0])

    def test_weights_sum_to_one(self, rng):
        pool = AttentionPool(5, rng)
        for t in (1, 2, 7, 64):
            weights, _ = pool.forward(Tensor(rng.normal(size=(t, 5))))
            assert abs(weights.data.sum() - 1.0) < 1e-6
            assert np.all(weights.data > 0.0)

    def test_dominant_score_takes_all_weight(self, rng):
        # one row aligned hard with the scorer direction soaks up the mass
        pool = AttentionPool(2, rng)
        pool.w.data[:] = np.array([[50.0], [0.0]])
        hs = Tensor(np.array([[5.0, 0.0], [-5.0, 0.0], [-5.0, 0.0]]))
        weights, pooled = pool.forward(hs)
        assert weights.data[0] > 1.0 - 1e-10
        np.testing.assert_allclose(pooled.data, hs.data[0], atol=1e-8)

    def test_pooled_matches_manual_weighting(self, rng):
        pool = AttentionPool(3, rng)
        hs = rng.normal(size=(5, 3))
        weights, pooled = pool.forward(Tensor(hs))
        scores = np.tanh(hs) @ pool.w.data.ravel()
        expect = np.exp(scores - scores.max())
        expect /= expect.sum()
        np.testing.assert_allclose(weights.data, expect, atol=1e-12)
        np.testing.assert_allclose(pooled.data, expect @ hs, atol=1e-12)

    def test_empty_sequence_rejected(self, rng):
        pool = AttentionPool(3, rng)
        with pytest.raises(ContractError):
            pool.forward(Tensor(np.zeros((0, 3))))

    def test_gradients_flow(self, rng):
        pool = AttentionPool(3, rng)
        hs = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        direction = rng.normal(size=3)

        def loss():
            _, pooled = pool.forward(hs)
            return T.dot(pooled, Tensor(direction))

        params = dict(pool.parameters(), hs=hs)
        assert gradient_check(loss, params, rng=rng) < 1e-4


class TestLstmPath:
    def test_hidden_width_and_output_shapes(self, rng):
        branch = AudioBranch(tiny_config(), lstm_in_width=5, rng=rng)
        feats = Tensor(rng.normal(size=(7, 5)))
        hidden, pooled, weights = branch.lstm_branch_forward(feats)
        assert hidden.shape == (7, 6)
        assert pooled.shape == (6,)
        assert weights.shape == (7,)
        assert abs(weights.data.sum() - 1.0) < 1e-6

    def test_single_frame_pools_to_its_hidden_state(self, rng):
        branch = AudioBranch(tiny_config(), lstm_in_width=4, rng=rng)
        hidden, pooled, weights = branch.lstm_branch_forward(Tensor(rng.normal(size=(1, 4))))
        assert weights.data[0] == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(pooled.data, hidden.data[0])

    def test_empty_sequence_rejected(self, rng):
        branch = AudioBranch(tiny_config(), lstm_in_width=4, rng=rng)
        with pytest.raises(ContractError):
            branch.lstm_branch_forward(Tensor(np.zeros((0, 4))))


class TestCnnPath:
    def test_output_shapes(self, rng):
        branch = AudioBranch(tiny_config(), lstm_in_width=4, rng=rng)
        spect = Tensor(rng.normal(size=(6, 4)))
        maps, pooled, weights = branch.cnn_branch_forward(spect, mode="train")
        assert maps.shape == (6, 2)
        assert pooled.shape == (2,)
        assert abs(weights.data.sum() - 1.0) < 1e-6

    def test_zero_input_gives_identical_timesteps(self, rng):
        # zero maps normalize to a constant per channel, so pooling with
        # any weights reproduces that constant row
        branch = AudioBranch(tiny_config(), lstm_in_width=4, rng=rng)
        warm = Tensor(rng.normal(size=(6, 4)))
        branch.cnn_branch_forward(warm, mode="train")  # populate running stats
        maps, pooled, _ = branch.cnn_branch_forward(Tensor(np.zeros((5, 4))), mode="eval")
        for row in maps.data:
            np.testing.assert_allclose(row, maps.data[0], atol=1e-12)
        np.testing.assert_allclose(pooled.data, maps.data[0], atol=1e-12)

    def test_eval_is_deterministic(self, rng):
        branch = AudioBranch(tiny_config(), lstm_in_width=4, rng=rng)
        spect = Tensor(rng.normal(size=(8, 4)))
        a = branch.cnn_branch_forward(spect, mode="eval")[1].data
        b = branch.cnn_branch_forward(spect, mode="eval")[1].data
        assert a.tobytes() == b.tobytes()


class TestPairFusion:
    def test_zero_vectors_land_on_bias_image(self, rng):
        branch = AudioBranch(tiny_config(), lstm_in_width=4, rng=rng)
        zero_l = Tensor(np.zeros(6))
        zero_c = Tensor(np.zeros(2))
        values, weights = branch.fuse_audio_features(zero_l, zero_c)
        np.testing.assert_allclose(weights.data, [0.5, 0.5], atol=1e-15)
        expect = dense_forward(branch.project,
                               Tensor(np.zeros(2 * branch.cfg.attention_width)),
                               activation="relu")
        np.testing.assert_allclose(values.data, expect.data)

    def test_concat_and_add_widths(self, rng):
        cat = AudioBranch(tiny_config(), lstm_in_width=4, rng=rng)
        add = AudioBranch(tiny_config(combine="add"), lstm_in_width=4, rng=rng)
        assert cat.project.in_width == 2 * cat.cfg.attention_width
        assert add.project.in_width == add.cfg.attention_width
        l, c = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=2))
        assert cat.fuse_audio_features(l, c)[0].shape == (4,)
        assert add.fuse_audio_features(l, c)[0].shape == (4,)

    def test_add_mode_sums_weighted_projections(self, rng):
        branch = AudioBranch(tiny_config(combine="add"), lstm_in_width=4, rng=rng)
        l, c = rng.normal(size=6), rng.normal(size=2)
        values, weights = branch.fuse_audio_features(Tensor(l), Tensor(c))
        lp = branch.proj_lstm.data @ l
        cp = branch.proj_cnn.data @ c
        combined = weights.data[0] * lp + weights.data[1] * cp
        expect = np.maximum(branch.project.w.data @ combined + branch.project.b.data, 0.0)
        np.testing.assert_allclose(values.data, expect, atol=1e-12)

    def test_output_is_nonnegative(self, rng):
        branch = AudioBranch(tiny_config(), lstm_in_width=4, rng=rng)
        values, _ = branch.fuse_audio_features(Tensor(rng.normal(size=6)),
                                               Tensor(rng.normal(size=2)))
        assert np.all(values.data >= 0.0)


class TestFullBranch:
    def test_width_invariant_across_lengths(self, rng):
        branch = AudioBranch(tiny_config(), lstm_in_width=5, rng=rng)
        for t in (1, 2, 9, 64):
            feats = Tensor(rng.normal(size=(t, 5)))
            spect = Tensor(rng.normal(size=(max(t, 2), 4)))
            asv = branch.forward_asv(feats, spect, mode="eval")
            assert asv.values.shape == (4,)
            assert asv.attention["lstm"].shape == (t,)
            for name in ("lstm", "cnn", "pair"):
                assert abs(asv.attention[name].sum() - 1.0) < 1e-6

    def test_eval_forward_is_deterministic(self, rng):
        branch = AudioBranch(tiny_config(), lstm_in_width=5, rng=rng)
        feats = Tensor(rng.normal(size=(6, 5)))
        spect = Tensor(rng.normal(size=(6, 4)))
        a = branch.forward_asv(feats, spect, mode="eval").values.data
        b = branch.forward_asv(feats, spect, mode="eval").values.data
        assert a.tobytes() == b.tobytes()

    def test_end_to_end_gradients(self, rng):
        branch = AudioBranch(tiny_config(), lstm_in_width=5, rng=rng)
        feats = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        spect = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        direction = rng.normal(size=4)

        def loss():
            asv = branch.forward_asv(feats, spect, mode="train")
            return T.dot(asv.values, Tensor(direction))

        params = dict(branch.parameters(), feats=feats, spect=spect)
        err = gradient_check(loss, params, coords_per_param=3, rng=rng)
        assert err < 1e-4


class TestConfig:
    def test_unknown_feature_kind_rejected(self):
        with pytest.raises(ConfigError):
            AudioBranchConfig(feature_kinds=("mfcc", "cepstrum"))

    def test_empty_kind_list_rejected(self):
        with pytest.raises(ConfigError):
            AudioBranchConfig(feature_kinds=())

    def test_bad_combine_rejected(self):
        with pytest.raises(ConfigError):
            AudioBranchConfig(combine="average")

    def test_bad_width_rejected(self):
        with pytest.raises(ConfigError):
            AudioBranchConfig(asv_width=0)

    def test_default_kinds(self):
        cfg = AudioBranchConfig()
        assert cfg.feature_kinds == ("mfcc", "spectral_centroid", "chroma_stft",
                                     "spectral_contrast")


class TestInputHelpers:
    def test_concat_joins_dims(self, rng):
        a = FeatureSequence(rng.normal(size=(4, 13)), "mfcc", 43.0)
        b = FeatureSequence(rng.normal(size=(4, 1)), "spectral_centroid", 43.0)
        joined = concat_feature_kinds([a, b])
        assert joined.shape == (4, 14)
        np.testing.assert_array_equal(joined.data[:, :13], a.data)
        np.testing.assert_array_equal(joined.data[:, 13:], b.data)

    def test_concat_frame_mismatch_rejected(self, rng):
        a = FeatureSequence(rng.normal(size=(4, 2)), "mfcc", 43.0)
        b = FeatureSequence(rng.normal(size=(5, 2)), "rmse", 43.0)
        with pytest.raises(DimensionError):
            concat_feature_kinds([a, b])

    def test_raw_frames_slice_without_overlap(self):
        samples = np.arange(2048 + 100, dtype=np.float64)
        w = Waveform(samples, 22050)
        seq = raw_frame_sequence(w, frame=1024)
        assert seq.data.shape == (2, 1024)
        np.testing.assert_array_equal(seq.data[0], samples[:1024])
        np.testing.assert_array_equal(seq.data[1], samples[1024:2048])
        assert seq.frame_rate == pytest.approx(22050 / 1024)

    def test_raw_frames_need_one_full_frame(self):
        with pytest.raises(DimensionError):
            raw_frame_sequence(Waveform(np.zeros(1000), 22050), frame=1024)
