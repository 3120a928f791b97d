import math

import numpy as np
import pytest

from mmsent import tensor as T
from mmsent.audio import AudioBranch, AudioBranchConfig
from mmsent.errors import ConfigError, ContractError, DataError, DimensionError
from mmsent.fusion import (
    FusedInput,
    FusedModel,
    FusedPrediction,
    FusionConfig,
    FusionParams,
    classify_fused,
    modality_attention,
)
from mmsent.tensor import Tensor, gradient_check
from mmsent.text import EmbeddingProvider, TextBranch, TextBranchConfig


def tiny_model(rng, n_classes=2):
    audio_cfg = AudioBranchConfig(
        feature_kinds=("mfcc",), lstm_hidden=2, kernel_sizes=(3,),
        channels_per_kernel=2, cnn_in_channels=3, attention_width=2,
        asv_width=3, dropout=0.0, conv_dropout=0.0,
    )
    text_cfg = TextBranchConfig(
        embedding_width=4, lstm_hidden=2, kernel_sizes=(3,),
        channels_per_kernel=2, tsv_width=3, dropout=0.0,
    )
    audio = AudioBranch(audio_cfg, lstm_in_width=4, rng=rng)
    text = TextBranch(text_cfg, rng)
    table = {w: rng.normal(size=4) for w in ["good", "bad", "movie", "fine", "<unk>"]}
    provider = EmbeddingProvider(table)
    cfg = FusionConfig(n_classes=n_classes, context_hidden=2, shared_width=3)
    return FusedModel(audio, text, provider, cfg, rng)


def make_item(rng, uid="u0", gold=0, frames=5, tokens=("good", "movie")):
    return FusedInput(
        uid,
        Tensor(rng.normal(size=(frames, 4))),
        Tensor(rng.normal(size=(frames, 3))),
        list(tokens),
        gold=gold,
    )


class TestModalityAttention:
    def test_orthogonal_query_gives_uniform_mean(self, rng):
        # hidden rows live in the first two axes, the query on the third
        hidden = np.zeros((4, 3))
        hidden[:, :2] = rng.normal(size=(4, 2))
        e = np.array([0.0, 0.0, 2.5])
        weights, fused = modality_attention(Tensor(e), Tensor(hidden))
        np.testing.assert_allclose(weights.data, np.full(4, 0.25), atol=1e-12)
        np.testing.assert_allclose(fused.data, hidden.mean(axis=0), atol=1e-12)

    def test_dominating_score_selects_its_state(self, rng):
        hidden = np.array([[40.0, 0.0], [-40.0, 0.0], [-40.0, 1.0]])
        e = np.array([1.0, 0.0])
        weights, fused = modality_attention(Tensor(e), Tensor(hidden))
        assert weights.data[0] > 1.0 - 1e-10
        np.testing.assert_allclose(fused.data, hidden[0], atol=1e-8)

    def test_three_step_hand_computation(self):
        e = np.array([0.5, -1.0])
        hidden = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
        weights, fused = modality_attention(Tensor(e), Tensor(hidden))
        scores = [0.5, -1.0, -1.0]
        exps = [math.exp(s) for s in scores]
        total = sum(exps)
        expect_w = np.array([v / total for v in exps])
        np.testing.assert_allclose(weights.data, expect_w, atol=1e-12)
        np.testing.assert_allclose(fused.data, expect_w @ hidden, atol=1e-12)

    def test_invariant_under_orthogonal_query_shift(self, rng):
        hidden = np.zeros((5, 4))
        hidden[:, :3] = rng.normal(size=(5, 3))
        e = rng.normal(size=4)
        base = modality_attention(Tensor(e), Tensor(hidden))[0].data
        shifted = modality_attention(Tensor(e + np.array([0, 0, 0, 9.0])),
                                     Tensor(hidden))[0].data
        np.testing.assert_allclose(shifted, base, atol=1e-12)

    def test_weights_normalized(self, rng):
        weights, _ = modality_attention(Tensor(rng.normal(size=3)),
                                        Tensor(rng.normal(size=(7, 3))))
        assert np.all(weights.data >= 0.0)
        assert abs(weights.data.sum() - 1.0) < 1e-6

    def test_width_mismatch_rejected(self, rng):
        with pytest.raises(DimensionError):
            modality_attention(Tensor(rng.normal(size=3)),
                               Tensor(rng.normal(size=(4, 5))))

    def test_empty_sequence_rejected(self, rng):
        with pytest.raises(ContractError):
            modality_attention(Tensor(rng.normal(size=3)), Tensor(np.zeros((0, 3))))

    def test_gradients(self, rng):
        e = Tensor(rng.normal(size=3), requires_grad=True)
        hidden = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        direction = rng.normal(size=3)

        def loss():
            _, fused = modality_attention(e, hidden)
            return T.dot(fused, Tensor(direction))

        assert gradient_check(loss, {"e": e, "hidden": hidden}, rng=rng) < 1e-4


class TestClassifyFused:
    def make_params(self, rng, width=8, k=3):
        return FusionParams(width, k, rng)

    def vectors(self, rng):
        return (Tensor(rng.normal(size=2)), Tensor(rng.normal(size=2)),
                Tensor(rng.normal(size=2)), Tensor(rng.normal(size=2)))

    def test_zero_weights_give_uniform(self, rng):
        params = self.make_params(rng)
        params.m.data[:] = 0.0
        params.b.data[:] = 0.0
        asv, tsv, z_a, z_t = self.vectors(rng)
        pred = classify_fused(params, asv, tsv, z_a, z_t)
        np.testing.assert_allclose(pred.probabilities.data, np.full(3, 1 / 3),
                                   atol=1e-15)

    def test_bias_shift_leaves_probabilities(self, rng):
        params = self.make_params(rng)
        asv, tsv, z_a, z_t = self.vectors(rng)
        base = classify_fused(params, asv, tsv, z_a, z_t).probabilities.data.copy()
        params.b.data[:] += 3.7
        shifted = classify_fused(params, asv, tsv, z_a, z_t).probabilities.data
        np.testing.assert_allclose(shifted, base, atol=1e-12)
        params.b.data[:] -= 3.7

    def test_matches_exp_normalize_oracle(self, rng):
        params = self.make_params(rng)
        asv, tsv, z_a, z_t = self.vectors(rng)
        pred = classify_fused(params, asv, tsv, z_a, z_t)
        joined = np.concatenate([z_a.data, z_t.data, asv.data, tsv.data])
        logits = joined @ params.m.data + params.b.data
        exps = [math.exp(v) for v in logits]
        expect = np.array([v / sum(exps) for v in exps])
        np.testing.assert_allclose(pred.probabilities.data, expect, atol=1e-12)
        assert pred.label == int(np.argmax(expect))

    def test_tie_breaks_to_lowest_index(self, rng):
        params = self.make_params(rng)
        params.m.data[:] = 0.0
        params.b.data[:] = np.array([2.0, 2.0, 0.0])
        asv, tsv, z_a, z_t = self.vectors(rng)
        pred = classify_fused(params, asv, tsv, z_a, z_t)
        assert pred.probabilities.data[0] == pred.probabilities.data[1]
        assert pred.label == 0

    def test_width_mismatch_rejected(self, rng):
        params = self.make_params(rng, width=9)
        asv, tsv, z_a, z_t = self.vectors(rng)
        with pytest.raises(DimensionError):
            classify_fused(params, asv, tsv, z_a, z_t)

    def test_probabilities_sum_to_one(self, rng):
        params = self.make_params(rng)
        pred = classify_fused(params, *self.vectors(rng))
        assert abs(pred.probabilities.data.sum() - 1.0) < 1e-9


class TestFusedPrediction:
    def test_invalid_probabilities_rejected(self):
        with pytest.raises(ContractError):
            FusedPrediction(Tensor(np.array([0.5, 0.2])), 0, None, None)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ContractError):
            FusedPrediction(Tensor(np.array([0.5, 0.5])), 0, None, None,
                            audio_weights=np.array([0.9, 0.4]))


class TestFusedModel:
    def test_video_predictions_shape_and_weights(self, rng):
        model = tiny_model(rng)
        items = [make_item(rng, f"u{i}", gold=i % 2) for i in range(3)]
        preds = model.predict_video(items)
        assert len(preds) == 3
        for pred in preds:
            assert pred.label in (0, 1)
            assert abs(pred.probabilities.data.sum() - 1.0) < 1e-9
            assert pred.audio_weights.shape == (3,)
            assert pred.text_weights.shape == (3,)
            assert np.all(pred.audio_weights >= 0.0)
            assert np.all(pred.audio_weights <= 1.0)
            assert abs(pred.audio_weights.sum() - 1.0) < 1e-6
            assert abs(pred.text_weights.sum() - 1.0) < 1e-6
            assert pred.z_a.shape == (3,)
            assert pred.z_t.shape == (3,)

    def test_eval_repeat_is_identical(self, rng):
        model = tiny_model(rng)
        items = [make_item(rng, "u0"), make_item(rng, "u1")]
        a = model.predict_video(items)
        b = model.predict_video(items)
        for pa, pb in zip(a, b):
            assert pa.probabilities.data.tobytes() == pb.probabilities.data.tobytes()
            assert pa.label == pb.label

    def test_contract_sweep_over_random_utterances(self, rng):
        model = tiny_model(rng, n_classes=3)
        for i in range(100):
            frames = int(rng.integers(3, 9))
            item = make_item(rng, f"u{i}", frames=frames,
                             tokens=["fine"] * int(rng.integers(1, 5)))
            pred = model.predict_utterance(item)
            assert 0 <= pred.label < 3
            probs = pred.probabilities.data
            assert np.all(probs >= 0.0)
            assert abs(probs.sum() - 1.0) < 1e-9

    def test_cross_entropy_gradients_full_pipeline(self, rng):
        model = tiny_model(rng)
        items = [make_item(rng, "u0", gold=0), make_item(rng, "u1", gold=1)]

        def loss():
            preds = model.forward_video(items, mode="train")
            parts = []
            for item, pred in zip(items, preds):
                picked = T.narrow(pred.probabilities, 0, item.gold, 1)
                parts.append(T.neg(T.log(picked)))
            return T.mean(T.concat(parts, axis=0))

        err = gradient_check(loss, model.parameters(), coords_per_param=2, rng=rng)
        assert err < 1e-4

    def test_missing_audio_modality_names_utterance(self, rng):
        with pytest.raises(DataError, match="u7"):
            FusedInput("u7", None, None, ["good"])

    def test_missing_text_modality_names_utterance(self, rng):
        with pytest.raises(DataError, match="u9"):
            FusedInput("u9", Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 3))), [])

    def test_empty_video_rejected(self, rng):
        model = tiny_model(rng)
        with pytest.raises(ContractError):
            model.predict_video([])

    def test_state_roundtrip_restores_predictions(self, rng, tmp_path):
        from mmsent.containers import load_checkpoint, save_checkpoint

        model = tiny_model(rng)
        item = make_item(rng, "u0")
        before = model.predict_utterance(item).probabilities.data.copy()
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), model.state_arrays())
        for t in model.parameters().values():
            t.data += rng.normal(scale=0.1, size=t.data.shape)
        model.load_state_arrays(load_checkpoint(str(path)))
        after = model.predict_utterance(item).probabilities.data
        assert before.tobytes() == after.tobytes()

    def test_state_mismatch_rejected(self, rng):
        model = tiny_model(rng)
        state = model.state_arrays()
        state.pop(sorted(state)[0])
        with pytest.raises(ContractError):
            model.load_state_arrays(state)


class TestFusionConfig:
    def test_class_floor(self):
        with pytest.raises(ConfigError):
            FusionConfig(n_classes=1)

    def test_positive_widths(self):
        with pytest.raises(ConfigError):
            FusionConfig(context_hidden=0)

    def test_classifier_width_guard(self, rng):
        with pytest.raises(ConfigError):
            FusionParams(0, 2, rng)
