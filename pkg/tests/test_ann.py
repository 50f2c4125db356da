import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikefit import autodiff as ad
from spikefit.ann import (AnnModel, Embedding, Gelu, Linear, Qcfs, Relu, Residual,
                          TrainConfig, TrainingDivergedError, ann_forward,
                          dataset_loss, fit_ugo, layernorm_ref, mlp, param_arrays,
                          qcfs_forward, qcfs_on_tape, replace_activations,
                          stage1_finetune, train_model)
from spikefit.data import Dataset
from spikefit.tensor import Rng


class TestQcfsForward:
    def test_scalar_reference_case(self):
        # floor(0.3*4/1 + 0.5) = floor(1.7) = 1 -> 1/4
        assert float(qcfs_forward(np.float64(0.3), 1.0, 4)) == 0.25

    def test_negative_clips_to_zero(self):
        assert float(qcfs_forward(np.float64(-0.2), 1.0, 4)) == 0.0

    def test_upper_clip(self):
        assert float(qcfs_forward(np.float64(1.5), 1.0, 4)) == 1.0

    def test_bad_params(self):
        with pytest.raises(ValueError):
            qcfs_forward(np.zeros(3), 0.0, 4)
        with pytest.raises(ValueError):
            qcfs_forward(np.zeros(3), 1.0, 0)

    def test_binary_quantization_at_one_level(self):
        x = np.linspace(-1, 2, 301)
        out = np.unique(qcfs_forward(x, 1.0, 1))
        assert set(out.tolist()) <= {0.0, 1.0}

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-2, 4), st.floats(-2, 4), st.floats(0.1, 3), st.integers(1, 64))
    def test_monotone_and_on_lattice(self, x1, x2, lam, levels):
        lo, hi = sorted((x1, x2))
        y_lo = float(qcfs_forward(np.float64(lo), lam, levels))
        y_hi = float(qcfs_forward(np.float64(hi), lam, levels))
        assert y_lo <= y_hi
        k = y_lo * levels / lam
        assert abs(k - round(k)) < 1e-9
        assert 0.0 <= y_lo <= lam

    def test_quantization_bound_over_level_sweep(self):
        rng = Rng(0)
        for levels in (2, 4, 8, 16, 64, 256, 1024):
            lam = 1.0
            x = rng.uniform(0.0, lam, (2000,)).astype(np.float64)
            err = np.abs(x - qcfs_forward(x, lam, levels))
            assert err.max() <= lam / (2 * levels) + 1e-12

    def test_converges_to_clip(self):
        x = np.linspace(-0.5, 1.5, 1001, dtype=np.float64)
        lam = 1.0
        clipped = np.clip(x, 0, lam)
        for levels in (2, 4, 8, 16, 32, 64, 128, 256, 512, 1024):
            gap = np.abs(qcfs_forward(x, lam, levels) - clipped)
            assert gap.max() <= lam / (2 * levels) + 1e-12


class TestQcfsTapeGradients:
    def test_interior_gradient_passes_upstream_unchanged(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([0.3], dtype=np.float32))
        y = qcfs_on_tape(x, 1.0, 4)
        up = np.array([1.7], dtype=np.float32)
        g = ad.backward(tape, y, seed=up)
        np.testing.assert_array_equal(g.wrt(x), up)  # exact pass-through

    def test_clipped_gradient_is_zero(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([-0.5, 1.5], dtype=np.float32))
        y = qcfs_on_tape(x, 1.0, 4)
        g = ad.backward(tape, y, seed=np.ones(2, np.float32))
        np.testing.assert_array_equal(g.wrt(x), [0.0, 0.0])

    def test_ceiling_gradient_saturation_region(self):
        # fully clipped above: output == ceiling, d(out)/d(ceiling) = 1
        tape = ad.Tape()
        lam = tape.leaf(np.asarray(1.0, dtype=np.float32))
        x = tape.leaf(np.array([5.0], dtype=np.float32))
        y = qcfs_on_tape(x, lam, 4)
        g = ad.backward(tape, y, seed=np.ones(1, np.float32))
        assert float(g.wrt(lam)) == 1.0


def _teacher_data(rng: Rng, n=2000, d=6, classes=3):
    x = rng.split("x").normal(0, 1, (n, d))
    teacher = mlp([d, 16, classes], rng.split("teacher"))
    y = ann_forward(teacher, x, record=False).output.argmax(axis=1).astype(np.int64)
    return Dataset(x, y, "classify")


class TestAnnForward:
    def test_identity_network(self):
        model = AnnModel([Linear(np.eye(3, dtype=np.float32), np.zeros(3, np.float32))])
        x = Rng(0).normal(0, 1, (4, 3))
        np.testing.assert_array_equal(ann_forward(model, x).output, x)

    def test_trace_count_matches_activation_layers(self):
        model = mlp([4, 8, 8, 2], Rng(0))
        res = ann_forward(model, Rng(1).normal(0, 1, (5, 4)))
        assert len(res.traces) == 2
        assert all(t.pre.shape == t.post.shape for t in res.traces)

    def test_matches_float64_oracle(self):
        model = mlp([6, 10, 3], Rng(2))
        x = Rng(3).normal(0, 1, (8, 6))
        got = ann_forward(model, x, record=False).output
        # independent double-precision forward
        h = x.astype(np.float64) @ model.layers[0].w.astype(np.float64) + model.layers[0].b
        h = np.maximum(h, 0)
        want = h @ model.layers[2].w.astype(np.float64) + model.layers[2].b
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_shape_error_names_layer(self):
        model = mlp([4, 8, 2], Rng(0))
        with pytest.raises(ValueError, match="layer 0"):
            ann_forward(model, np.zeros((2, 5), np.float32))

    def test_residual_and_embedding(self):
        rng = Rng(4)
        table = rng.normal(0, 1, (11, 3))
        inner = [Linear(rng.normal(0, 0.2, (6, 6)), np.zeros(6, np.float32)), Relu()]
        model = AnnModel([Embedding(table),
                          Linear(rng.normal(0, 0.3, (6, 6)), np.zeros(6, np.float32)),
                          Relu(),
                          Residual(inner),
                          Linear(rng.normal(0, 0.3, (6, 2)), np.zeros(2, np.float32))])
        tokens = rng.integers(0, 11, (5, 2))
        out = ann_forward(model, tokens)
        assert out.output.shape == (5, 2)
        assert len(out.traces) == 2  # top-level relu + residual-inner relu


class TestReplaceActivations:
    def test_structural_swap_keeps_weights_bit_identical(self):
        model = mlp([4, 8, 8, 8, 2], Rng(0))
        out = replace_activations(model, 8)
        assert len(out.qcfs_layers()) == 3
        for a, b in zip(model.layers, out.layers):
            if isinstance(a, Linear):
                assert a.w.tobytes() == b.w.tobytes()
                assert a.b.tobytes() == b.b.tobytes()

    def test_ceiling_is_999_percentile_of_preactivation_magnitudes(self):
        model = mlp([4, 8, 2], Rng(1))
        batch = Rng(2).normal(0, 1, (200, 4))
        out = replace_activations(model, 8, batch)
        pre = batch @ model.layers[0].w + model.layers[0].b
        want = float(np.percentile(np.abs(pre), 99.9))
        assert out.qcfs_layers()[0].ceiling == pytest.approx(want, rel=1e-6)

    def test_one_level_is_binary(self):
        model = mlp([4, 8, 2], Rng(1))
        out = replace_activations(model, 1, Rng(2).normal(0, 1, (100, 4)))
        q = out.qcfs_layers()[0]
        x = Rng(3).normal(0, 2, (50, 4))
        trace = ann_forward(out, x).traces[0]
        values = set(np.unique(trace.post).tolist())
        assert values <= {0.0, np.float32(q.ceiling)}

    def test_no_activations_rejected(self):
        model = AnnModel([Linear(np.eye(2, dtype=np.float32), np.zeros(2, np.float32))])
        with pytest.raises(ValueError, match="no ReLU/GELU"):
            replace_activations(model, 8)


class TestTraining:
    def test_loss_halves_on_teacher_task(self):
        for seed in (0, 1, 2):
            rng = Rng(seed)
            data = _teacher_data(rng)
            model = replace_activations(mlp([6, 32, 32, 3], rng.split("init")), 8,
                                        data.x[:256])
            initial = dataset_loss(model, data)
            cfg = TrainConfig(steps=500, batch_size=64, lr=0.01, lr_ceiling=0.05)
            trained, history = stage1_finetune(model, data, cfg, rng.split("train"))
            assert dataset_loss(trained, data) <= 0.5 * initial
            assert len(history) >= 1 and "train_loss" in history[0]

    def test_quantization_bound_before_any_update(self):
        # with L=64 the staircase model's activations sit within ceiling/(2L)
        # of the clipped-relu model's, per activation
        rng = Rng(7)
        model = mlp([6, 16, 3], rng)
        batch = rng.split("b").normal(0, 1, (64, 6))
        q = replace_activations(model, 64, batch)
        cap = q.qcfs_layers()[0].ceiling
        pre = batch @ model.layers[0].w + model.layers[0].b
        clipped = np.clip(np.maximum(pre, 0), 0, cap)
        staircase = ann_forward(q, batch).traces[0].post
        assert np.abs(staircase - clipped).max() <= cap / (2 * 64) + 1e-6

    def test_lr_zero_leaves_model_unchanged(self):
        rng = Rng(3)
        data = _teacher_data(rng, n=200)
        model = replace_activations(mlp([6, 8, 3], rng.split("init")), 4, data.x[:64])
        before = {k: v.copy() for k, v in param_arrays(model).items()}
        trained, _ = train_model(model, data, TrainConfig(steps=20, lr=0.0, lr_ceiling=0.0),
                                 rng.split("t"))
        after = param_arrays(trained)
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])

    def test_nan_loss_aborts_with_diagnostic(self):
        rng = Rng(3)
        data = _teacher_data(rng, n=200)
        model = mlp([6, 8, 3], rng.split("init"))
        model.layers[0].w[0, 0] = np.float32(np.inf)
        with pytest.raises(TrainingDivergedError, match="step"):
            train_model(model, data, TrainConfig(steps=5, lr=0.01), rng.split("t"))

    def test_stage1_requires_staircase_model(self):
        rng = Rng(3)
        data = _teacher_data(rng, n=100)
        with pytest.raises(ValueError, match="replace_activations"):
            stage1_finetune(mlp([6, 8, 3], rng), data, TrainConfig(steps=1), rng)


class TestUgo:
    def test_constant_target_fits_exactly(self):
        # constant function is representable by the output bias alone
        rng = Rng(0)
        approx = fit_ugo("gelu-scalar", width=4, sample_count=200,
                         domain=[(2.0, 2.001)], rng=rng, steps=800, lr=1e-2)
        assert approx.heldout_mse < 1e-6

    def test_gelu_scalar_fit(self):
        for seed in (0, 1, 2):
            approx = fit_ugo("gelu-scalar", width=64, sample_count=4000,
                             domain=[(-3.0, 3.0)], rng=Rng(seed), steps=2000, lr=5e-3)
            assert approx.heldout_mse < 1e-3, f"seed {seed}: {approx.heldout_mse}"

    def test_bad_args(self):
        with pytest.raises(ValueError, match="width"):
            fit_ugo("gelu-scalar", 0, 100, [(-1, 1)], Rng(0))
        with pytest.raises(ValueError, match="sample_count"):
            fit_ugo("gelu-scalar", 4, 5, [(-1, 1)], Rng(0))
        with pytest.raises(ValueError, match="unknown target"):
            fit_ugo("sigmoid", 4, 100, [(-1, 1)], Rng(0))

    def test_layernorm_reference_shape(self):
        x = Rng(1).uniform(0, 1, (10, 8)).astype(np.float64)
        y = layernorm_ref(x)
        np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-5)
