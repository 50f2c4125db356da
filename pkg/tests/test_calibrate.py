import numpy as np
import pytest

from spikefit.ann import (AnnModel, Linear, Qcfs, Relu, ann_forward, mlp,
                          replace_activations)
from spikefit.calibrate import (CalibConfig, CalibrationError, activation_align_loss,
                                apply_stage2, convert, eval_losses, logits_loss,
                                lwc, nwc_calibrate, select_alpha)
from spikefit.checkpoint import weight_hash
from spikefit.data import Dataset, DataSpec, DatasetSplits, make_dataset
from spikefit.snn import firing_rate, simulate
from spikefit.tensor import Rng


def _staircase_mlp(rng: Rng, dims=(6, 12, 3), levels=8, ceilings=None):
    model = mlp(list(dims), rng)
    batch = rng.split("init").normal(0, 1, (128, dims[0]))
    model = replace_activations(model, levels, batch)
    if ceilings is not None:
        for q, c in zip(model.qcfs_layers(), ceilings):
            q.ceiling = c
    return model


class TestConvert:
    def test_ceilings_become_thresholds(self):
        model = _staircase_mlp(Rng(0), dims=(4, 6, 5, 2), ceilings=[1.3, 0.8])
        net = convert(model, 8)
        layers = net.if_layers()
        np.testing.assert_allclose(layers[0].threshold, 1.3)
        np.testing.assert_allclose(layers[1].threshold, 0.8)
        for l in layers:
            np.testing.assert_allclose(l.v_init, l.threshold / 2)

    def test_weights_copied_bit_exactly(self):
        model = _staircase_mlp(Rng(1))
        net = convert(model, 8)
        assert weight_hash(net) == weight_hash(model)

    def test_single_hidden_layer_reproduces_ann_at_t_equals_l(self):
        model = _staircase_mlp(Rng(2), dims=(6, 16, 3), levels=8)
        net = convert(model, 8)
        x = Rng(3).normal(0, 1, (32, 6))
        ann_out = ann_forward(model, x, record=False).output
        snn_out = simulate(net, x, 8).output
        np.testing.assert_allclose(snn_out, ann_out, atol=1e-5)

    def test_relu_model_rejected_with_stage1_hint(self):
        model = mlp([4, 8, 2], Rng(0))
        with pytest.raises(ValueError, match="stage 1"):
            convert(model, 8)

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            convert(_staircase_mlp(Rng(0)), 0)


class TestLwc:
    def test_reference_scaling(self):
        # alpha 0.6, beta 0.1: threshold 2.0 -> 1.2, v_init -> 0.12
        model = _staircase_mlp(Rng(0), dims=(4, 6, 2), ceilings=[2.0])
        net = lwc(convert(model, 8), 0.6, 0.1)
        layer = net.if_layers()[0]
        np.testing.assert_allclose(layer.threshold, 1.2, rtol=1e-6)
        np.testing.assert_allclose(layer.v_init, 0.12, rtol=1e-6)

    def test_identity_scale_keeps_thresholds(self):
        model = _staircase_mlp(Rng(1))
        base = convert(model, 8)
        out = lwc(base, 1.0, 0.1)
        np.testing.assert_array_equal(out.if_layers()[0].threshold,
                                      base.if_layers()[0].threshold)

    def test_elementwise_vector_scaling(self):
        model = _staircase_mlp(Rng(2), dims=(4, 3, 2), ceilings=[1.0])
        base = convert(model, 8)
        base.if_layers()[0].threshold = np.array([1.0, 2.0, 4.0], np.float32)
        out = lwc(base, 0.5, 0.0)
        np.testing.assert_allclose(out.if_layers()[0].threshold, [0.5, 1.0, 2.0])

    def test_alpha_out_of_range(self):
        net = convert(_staircase_mlp(Rng(0)), 8)
        with pytest.raises(ValueError, match="alpha"):
            lwc(net, 0.0, 0.1)
        with pytest.raises(ValueError, match="alpha"):
            lwc(net, 1.5, 0.1)


class TestSelectAlpha:
    def test_heuristic_formula(self):
        # p99 = 4, T = 8, margin = 1/8 -> 0.625
        taus = np.full(1000, 4.0)
        assert select_alpha(taus, 8) == pytest.approx(0.625)

    def test_no_headroom_saturates_at_one(self):
        taus = np.full(100, 8.0)
        assert select_alpha(taus, 8) == 1.0

    def test_floor_at_half(self):
        assert select_alpha(np.zeros(100), 8) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            select_alpha(np.zeros(0), 8)

    def test_config_default_when_heuristic_disabled(self):
        assert CalibConfig().alpha == 0.6


class TestAlignLoss:
    def test_perfect_alignment_is_zero(self):
        spikes = np.zeros((4, 1, 2), np.float32)
        spikes[:2, 0, 0] = 1
        theta = np.ones(2, np.float32)
        rate = theta * spikes.sum(axis=0) / 4.0  # exactly representable
        assert activation_align_loss(rate, spikes, theta, 4, 4, "rho") == 0.0

    def test_reference_value(self):
        # a=0.4, 3 spikes in 5 steps, theta=1, denominator T: (0.6-0.4)^2
        spikes = np.zeros((5, 1, 1), np.float32)
        spikes[:3, 0, 0] = 1
        loss = activation_align_loss(np.array([[0.4]]), spikes, np.ones(1, np.float32),
                                     5, 5, "T")
        assert loss == pytest.approx(0.04, abs=1e-9)

    def test_silent_match(self):
        spikes = np.zeros((4, 1, 3), np.float32)
        loss = activation_align_loss(np.zeros((1, 3)), spikes, np.ones(3, np.float32),
                                     4, 4, "rho")
        assert loss == 0.0

    def test_shape_mismatch_names_layer(self):
        spikes = np.zeros((4, 1, 3), np.float32)
        with pytest.raises(ValueError, match="layer 2"):
            activation_align_loss(np.zeros((1, 4)), spikes, np.ones(3, np.float32),
                                  4, 4, "rho", layer=2)

    def test_rho_window(self):
        spikes = np.zeros((4, 1, 1), np.float32)
        spikes[0, 0, 0] = 1  # only the first step spikes
        loss_rho1 = activation_align_loss(np.array([[1.0]]), spikes,
                                          np.ones(1, np.float32), 1, 4, "rho")
        assert loss_rho1 == 0.0  # rate over the first step is 1/1


class TestLogitsLoss:
    def test_identical_uniform_gives_log4(self):
        z = np.zeros((3, 4))
        assert logits_loss(z, z, 1.0) == pytest.approx(np.log(4), abs=1e-12)

    def test_identical_logits_give_teacher_entropy(self):
        z = np.array([[0.3, -1.2, 2.0]])
        q = np.exp(z - z.max())
        q /= q.sum()
        entropy = float(-(q * np.log(q)).sum())
        assert logits_loss(z, z, 1.0) == pytest.approx(entropy, abs=1e-12)

    def test_reference_value(self):
        # teacher [0,0], student [ln3, 0]: -(0.5 log .75 + 0.5 log .25) ~ 0.8370
        loss = logits_loss(np.array([[0.0, 0.0]]), np.array([[np.log(3), 0.0]]), 1.0)
        assert loss == pytest.approx(0.8370, abs=5e-5)

    def test_zero_classes_rejected(self):
        with pytest.raises(ValueError, match="class"):
            logits_loss(np.zeros((2, 0)), np.zeros((2, 0)), 1.0)

    def test_bad_temperature(self):
        with pytest.raises(ValueError, match="temperature"):
            logits_loss(np.zeros((1, 2)), np.zeros((1, 2)), 0.0)


class TestCalibConfig:
    def test_rho_defaults_to_horizon(self):
        cfg = CalibConfig(timesteps=12)
        assert cfg.rho == 12

    def test_rho_out_of_range(self):
        with pytest.raises(ValueError):
            CalibConfig(timesteps=4, rho=5)

    def test_both_loss_weights_zero_rejected(self):
        with pytest.raises(ValueError, match="both"):
            CalibConfig(lambda_align=0.0, lambda_logits=0.0)

    def test_alpha_range_checked(self):
        with pytest.raises(ValueError, match="alpha"):
            CalibConfig(alpha=0.0)

    def test_denominator_values(self):
        with pytest.raises(ValueError, match="denominator"):
            CalibConfig(denominator="steps")


def _calib_setup(seed, dims=(6, 12, 3)):
    rng = Rng(seed)
    data_x = rng.split("data").normal(0, 1, (512, dims[0]))
    model = _staircase_mlp(rng.split("model"), dims=dims)
    res = ann_forward(model, data_x, record=False)
    labels = res.output.argmax(axis=1).astype(np.int64)
    data = Dataset(data_x, labels, "classify")
    return rng, model, data


class TestNwc:
    def test_weights_frozen(self):
        rng, model, data = _calib_setup(0)
        net = lwc(convert(model, 8), 0.6, 0.1)
        before = weight_hash(net)
        cfg = CalibConfig(timesteps=8, steps=10, batch_size=64, lr=0.01, seed=0)
        out, _ = nwc_calibrate(net, model, data, cfg, rng.split("nwc"))
        assert weight_hash(out) == before

    def test_fixed_batch_loss_does_not_increase(self):
        # biased start (paper-style layer scaling), full-batch steps
        for seed in (0, 1, 2):
            rng, model, data = _calib_setup(seed)
            fixed = Dataset(data.x[:128], data.y[:128], "classify")
            net = lwc(convert(model, 8), 0.6, 0.1)
            cfg = CalibConfig(timesteps=8, steps=50, batch_size=128, lr=0.01, seed=seed)
            out, log = nwc_calibrate(net, model, fixed, cfg, rng.split("nwc"))
            assert log[-1]["L_all"] <= log[0]["L_all"], f"seed {seed}"

    def test_stationary_point_unchanged(self):
        # exact-rate network with align loss only: zero gradient everywhere
        rng, model, data = _calib_setup(3, dims=(6, 10, 3))
        net = convert(model, 8)
        theta0 = net.if_layers()[0].threshold.copy()
        v0 = net.if_layers()[0].v_init.copy()
        cfg = CalibConfig(timesteps=8, steps=5, batch_size=64, lr=0.05,
                          lambda_logits=0.0, seed=3)
        out, log = nwc_calibrate(net, model, data, cfg, rng.split("nwc"))
        np.testing.assert_array_equal(out.if_layers()[0].threshold, theta0)
        np.testing.assert_array_equal(out.if_layers()[0].v_init, v0)
        assert log[0]["L_al"] == 0.0

    def test_log_schema(self):
        rng, model, data = _calib_setup(1)
        net = convert(model, 8)
        cfg = CalibConfig(timesteps=8, steps=3, batch_size=32, seed=1)
        _, log = nwc_calibrate(net, model, data, cfg, rng.split("nwc"))
        assert len(log) == 3
        assert set(log[0]) == {"step", "L_al", "L_logits", "L_all", "mean_theta", "mean_v0"}

    def test_nan_teacher_aborts(self):
        rng, model, data = _calib_setup(2)
        net = convert(model, 8)
        bad = Dataset(np.full_like(data.x, np.nan), data.y, "classify")
        cfg = CalibConfig(timesteps=8, steps=2, batch_size=16, seed=2)
        with pytest.raises((CalibrationError, ValueError)):
            nwc_calibrate(net, model, bad, cfg, rng.split("nwc"))


class TestLossDecomposition:
    def test_weighted_sum_matches_parts(self):
        rng, model, data = _calib_setup(4)
        net = lwc(convert(model, 8), 0.8, 0.3)
        x = data.x[:64]
        both = eval_losses(net, model, x, CalibConfig(timesteps=8, lambda_align=0.7,
                                                      lambda_logits=1.3))
        align_only = eval_losses(net, model, x, CalibConfig(timesteps=8, lambda_align=0.7,
                                                            lambda_logits=0.0))
        logits_only = eval_losses(net, model, x, CalibConfig(timesteps=8, lambda_align=0.0,
                                                             lambda_logits=1.3))
        assert both["L_all"] == pytest.approx(align_only["L_all"] + logits_only["L_all"],
                                              abs=1e-6)


class TestApplyStage2:
    def test_none_variant_equals_converted(self):
        rng, model, data = _calib_setup(5)
        splits = DatasetSplits(data, data, data)
        base = convert(model, 8)
        cfg = CalibConfig(timesteps=8, steps=2, batch_size=16, seed=5)
        out, log = apply_stage2(base, model, splits, cfg, "none", rng.split("s2"))
        assert log == []
        for a, b in zip(out.if_layers(), base.if_layers()):
            np.testing.assert_array_equal(a.threshold, b.threshold)
            np.testing.assert_array_equal(a.v_init, b.v_init)

    def test_unknown_variant_rejected(self):
        rng, model, data = _calib_setup(6)
        splits = DatasetSplits(data, data, data)
        with pytest.raises(ValueError, match="variant"):
            apply_stage2(convert(model, 8), model, splits, CalibConfig(timesteps=8),
                         "all", rng)
