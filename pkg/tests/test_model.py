"""Model assembly, joint loss, scenario semantics, and the training loop."""

import numpy as np
import pytest

from artinv import autodiff as ad
from artinv import model as mdl
from artinv.autodiff import ShapeError, Tensor
from artinv.dataio import UtteranceSample
from artinv.errors import UsageError
from artinv.model import InversionModel, ModelConfig, SCENARIOS, apply_scenario, joint_loss
from artinv.training import Hyper, evaluate_loss, train_model

SMALL = ModelConfig(
    conv_channels=4, kernel_sizes=(1, 3), attn_model_dim=16, attn_layers=2,
    attn_heads=2, attn_head_dim=8, speech_fc_units=10, blstm_hidden=4,
)
SMALL_SPEECH_ONLY = ModelConfig(
    variant="speech_only",
    conv_channels=4, kernel_sizes=(1, 3), attn_model_dim=16, attn_layers=2,
    attn_heads=2, attn_head_dim=8, speech_fc_units=10, blstm_hidden=4,
)


def make_samples(count, frames=6, speakers=("a", "b"), seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        t = int(rng.integers(frames, frames + 4))
        onehot = np.zeros((t, 39))
        onehot[np.arange(t), rng.integers(0, 39, t)] = 1.0
        out.append(UtteranceSample(
            utterance_id=f"u{i:03d}",
            speaker_id=speakers[i % len(speakers)],
            mfcc=rng.normal(size=(t, 39)),
            phonemes=onehot,
            ema=rng.normal(scale=3.0, size=(t, 12)),
        ))
    return out


def snapshot(model, partition):
    return {n: p.data.copy() for n, p in model.partition_params(partition).items()}


class TestForward:
    def test_output_shapes(self):
        model = InversionModel(SMALL, seed=0)
        rng = np.random.default_rng(1)
        inv, pho = model.forward(rng.normal(size=(50, 39)), rng.normal(size=(50, 39)))
        assert inv.data.shape == (50, 12)
        assert pho.data.shape == (50, 12)

    def test_zero_parameters_give_zero_outputs(self):
        model = InversionModel(SMALL, seed=0)
        for p in model.parameters().values():
            p.data[:] = 0.0
        rng = np.random.default_rng(2)
        inv, pho = model.forward(rng.normal(size=(5, 39)), rng.normal(size=(5, 39)))
        np.testing.assert_array_equal(inv.data, np.zeros((5, 12)))
        np.testing.assert_array_equal(pho.data, np.zeros((5, 12)))

    def test_frame_count_mismatch_rejected(self):
        model = InversionModel(SMALL, seed=0)
        with pytest.raises(ShapeError, match="frame counts"):
            model.forward(np.zeros((4, 39)), np.zeros((5, 39)))

    def test_finite_outputs_for_random_inputs(self):
        model = InversionModel(SMALL, seed=3)
        rng = np.random.default_rng(4)
        for _ in range(5):
            inv, pho = model.forward(rng.normal(size=(8, 39)) * 10, rng.normal(size=(8, 39)))
            assert np.all(np.isfinite(inv.data))
            assert np.all(np.isfinite(pho.data))

    def test_speech_only_variant_has_no_phoneme_partition(self):
        model = InversionModel(SMALL_SPEECH_ONLY, seed=0)
        assert model.partition_params("phoneme_stream") == {}
        inv, pho = model.forward(np.random.default_rng(0).normal(size=(4, 39)), None)
        assert pho is None
        assert inv.data.shape == (4, 12)

    def test_gradient_reaches_all_partitions(self):
        model = InversionModel(SMALL, seed=5)
        rng = np.random.default_rng(6)
        sample = make_samples(1, seed=7)[0]
        model.set_trainable(mdl.PARTITIONS)

        def build():
            inv, pho = model.forward(sample.mfcc, sample.phonemes)
            return joint_loss(inv, pho, Tensor(sample.ema), reduction="frame_mean")

        loss = build()
        ad.backward(loss)
        picks = []
        for partition in mdl.PARTITIONS:
            name, p = next(iter(model.partition_params(partition).items()))
            assert p.grad is not None and np.any(p.grad != 0), f"no gradient in {partition} ({name})"
            picks.append(p)
        # finite-difference spot check, one weight per sub-network
        err = ad.check_gradients(build, picks, max_coords=2, rng=rng)
        assert err < 1e-4


class TestJointLoss:
    def test_zero_when_predictions_match(self):
        t = Tensor(np.random.default_rng(0).normal(size=(4, 12)))
        assert joint_loss(t, t, t).item() == 0.0

    def test_unit_offset_sums_cells(self):
        target = np.zeros((2, 12))
        off = Tensor(target + 1.0)
        exact = Tensor(target)
        # direct summation oracle: 2 frames x 12 channels of squared unit error
        assert joint_loss(off, exact, Tensor(target), weights=(1.0, 1.0)).item() == 24.0

    def test_zero_phoneme_weight_reduces_to_single_stream(self):
        rng = np.random.default_rng(1)
        a, b, t = (Tensor(rng.normal(size=(3, 12))) for _ in range(3))
        full = joint_loss(a, b, t, weights=(1.0, 0.0)).item()
        single = mdl.l2_term(a, t).item()
        assert full == single

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = Tensor(rng.normal(size=(3, 12)))
            b = Tensor(rng.normal(size=(3, 12)))
            t = Tensor(rng.normal(size=(3, 12)))
            value = joint_loss(a, b, t).item()
            assert value >= 0.0
            assert (value == 0.0) == (np.array_equal(a.data, t.data) and np.array_equal(b.data, t.data))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            joint_loss(Tensor(np.zeros((3, 12))), Tensor(np.zeros((3, 12))), Tensor(np.zeros((4, 12))))

    def test_frame_mean_reduction(self):
        target = np.zeros((4, 12))
        off = Tensor(target + 2.0)
        got = mdl.l2_term(off, Tensor(target), reduction="frame_mean").item()
        assert got == 48.0  # per-frame 4*12 = 48, identical frames


class TestScenarios:
    def test_s1_trains_only_phoneme_stream(self):
        model = InversionModel(SMALL, seed=11)
        before = {part: snapshot(model, part) for part in mdl.PARTITIONS}
        plan = apply_scenario(SCENARIOS["S1"], model)
        assert plan == {
            "speech_stream": "frozen", "fusion": "frozen",
            "phoneme_stream": "train", "inversion_head": "frozen",
        }
        samples = make_samples(6, seed=12)
        train_model(model, SCENARIOS["S1"], samples, samples[:2], Hyper(epochs=2, learning_rate=1e-2, batch_size=3), seed=13)
        for part in ("speech_stream", "fusion", "inversion_head"):
            for name, arr in before[part].items():
                assert np.array_equal(arr, model.parameters()[name].data), f"{name} changed"
        changed = any(not np.array_equal(before["phoneme_stream"][n], p.data)
                      for n, p in model.partition_params("phoneme_stream").items())
        assert changed

    def test_s2_requires_and_freezes_pretrained(self):
        pre = InversionModel(SMALL, seed=14)
        pre_arrays = {n: p.data.copy() for n, p in pre.partition_params("phoneme_stream").items()}

        model = InversionModel(SMALL, seed=15)
        with pytest.raises(UsageError, match="pretrained"):
            apply_scenario(SCENARIOS["S2"], model)

        apply_scenario(SCENARIOS["S2"], model, pretrained_arrays=pre_arrays)
        samples = make_samples(6, seed=16)
        train_model(model, SCENARIOS["S2"], samples, samples[:2], Hyper(epochs=2, learning_rate=1e-2, batch_size=3), seed=17)
        for name, arr in pre_arrays.items():
            assert np.array_equal(arr, model.parameters()[name].data), f"{name} not frozen"

    def test_s3_moves_both_partitions_in_one_step(self):
        model = InversionModel(SMALL, seed=18)
        before_speech = snapshot(model, "speech_stream")
        before_phoneme = snapshot(model, "phoneme_stream")
        apply_scenario(SCENARIOS["S3"], model)
        samples = make_samples(3, seed=19)
        train_model(model, SCENARIOS["S3"], samples, [], Hyper(epochs=1, learning_rate=1e-2, batch_size=3), seed=20)

        def linf_change(before, partition):
            return max(np.max(np.abs(before[n] - p.data))
                       for n, p in model.partition_params(partition).items())

        assert linf_change(before_speech, "speech_stream") > 0
        assert linf_change(before_phoneme, "phoneme_stream") > 0


class TestTraining:
    def test_seeded_training_is_bitwise_deterministic(self):
        results = []
        for _ in range(2):
            model = InversionModel(SMALL, seed=21)
            apply_scenario(SCENARIOS["S3"], model)
            samples = make_samples(5, seed=22)
            res = train_model(model, SCENARIOS["S3"], samples, samples[:1], Hyper(epochs=2, batch_size=2), seed=23)
            results.append(({n: p.data.copy() for n, p in model.parameters().items()}, res.trace))
        (params_a, trace_a), (params_b, trace_b) = results
        assert trace_a == trace_b
        for name in params_a:
            assert np.array_equal(params_a[name], params_b[name]), name

    def test_validation_does_not_update_parameters(self):
        model = InversionModel(SMALL, seed=24)
        apply_scenario(SCENARIOS["S3"], model)
        samples = make_samples(4, seed=25)
        model.target_mean, model.target_std = np.zeros(12), np.ones(12)
        before = {n: p.data.copy() for n, p in model.parameters().items()}
        evaluate_loss(model, SCENARIOS["S3"], samples)
        for name, arr in before.items():
            assert np.array_equal(arr, model.parameters()[name].data)

    def test_empty_utterances_skipped_with_warning(self, caplog):
        model = InversionModel(SMALL, seed=26)
        apply_scenario(SCENARIOS["S3"], model)
        samples = make_samples(3, seed=27)
        samples.append(UtteranceSample("empty", "a", np.zeros((0, 39)), np.zeros((0, 39)), np.zeros((0, 12))))
        with caplog.at_level("WARNING"):
            res = train_model(model, SCENARIOS["S3"], samples, [], Hyper(epochs=1, batch_size=2), seed=28)
        assert res.skipped == ["empty"]
        assert "empty" in caplog.text

    def test_loss_trace_rows(self):
        model = InversionModel(SMALL, seed=29)
        apply_scenario(SCENARIOS["S1"], model)
        samples = make_samples(4, seed=30)
        res = train_model(model, SCENARIOS["S1"], samples, samples[:1], Hyper(epochs=5, batch_size=2), seed=31)
        assert [row[0] for row in res.trace] == [1, 2, 3, 4, 5]
        assert all(np.isfinite(row[1]) for row in res.trace)
