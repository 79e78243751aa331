import math

import numpy as np
import pytest

from semvox.autodiff import (
    ToyModel,
    Value,
    backward,
    bce_loss_value,
    forward,
    grad_buffer_count,
    joint_loss,
    make_synthetic_data,
    pretrain_trunk,
    sgd_step,
    ssi_loss_value,
)
from semvox.errors import MissingGradients, NonScalarLoss, ShapeMismatch


def model_bytes(model):
    return b"".join(p.data.tobytes() for p in model.parameters())


def joint_loss_scalar(model, data):
    disp, seg = forward(model, data.inputs)
    return joint_loss(disp, data.disparity, seg, data.seg, data.mask).item()


def finite_difference_grads(model, data, h=1e-6):
    """Central-difference oracle over every parameter scalar."""
    grads = []
    for p in model.parameters():
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = joint_loss_scalar(model, data)
            flat[i] = orig - h
            lm = joint_loss_scalar(model, data)
            flat[i] = orig
            gf[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, fd, rel_tol=1e-4, abs_floor=1e-8):
    for a, f in zip(analytic, fd):
        diff = np.abs(a - f)
        denom = np.maximum(np.abs(a), np.abs(f))
        small = denom < abs_floor
        assert (diff[small] < abs_floor).all()
        assert (diff[~small] / denom[~small] < rel_tol).all()


class TestValueOps:
    def test_linear_gradient(self):
        w = Value(np.array(1.0), requires_grad=True)
        loss = w * 3.0
        backward(loss)
        assert w.grad == 3.0

    def test_matmul_and_add(self):
        a = Value(np.array([[1.0, 2.0]]), requires_grad=True)
        b = Value(np.array([[3.0], [4.0]]), requires_grad=True)
        loss = (a @ b).sum()
        backward(loss)
        assert a.grad.tolist() == [[3.0, 4.0]]
        assert b.grad.tolist() == [[1.0], [2.0]]

    def test_broadcast_bias_gradient(self):
        x = Value(np.ones((4, 2)))
        b = Value(np.zeros(2), requires_grad=True)
        loss = (x + b).sum()
        backward(loss)
        assert b.grad.tolist() == [4.0, 4.0]

    def test_non_scalar_loss_rejected(self):
        v = Value(np.ones(3), requires_grad=True)
        with pytest.raises(NonScalarLoss):
            backward(v * 2.0)

    def test_constants_get_no_buffers(self):
        x = Value(np.ones(3))
        w = Value(np.ones(3), requires_grad=True)
        loss = (x * w).sum()
        backward(loss)
        assert x.grad is None
        assert w.grad is not None

    def test_backward_reinitializes_gradients(self):
        w = Value(np.array(2.0), requires_grad=True)
        backward(w * 3.0)
        backward(w * 3.0)
        assert w.grad == 3.0  # not accumulated to 6


class TestForward:
    def test_zero_weights_give_zero_outputs(self):
        model = ToyModel("v2", in_dim=2, hidden_dim=3, seed=0)
        for p in model.parameters():
            p.data[...] = 0.0
        disp, seg = forward(model, np.random.default_rng(0).normal(size=(5, 2)))
        assert (disp.data == 0).all()
        assert (seg.data == 0).all()

    def test_single_unit_chain_hand_computed(self):
        model = ToyModel("v2", in_dim=1, hidden_dim=1, seed=0)
        for p in model.parameters():
            p.data[...] = 0.0
        model.trunk[0].weight.data[...] = 1.0
        model.disp_head[0].weight.data[...] = 1.0
        model.seg_head[0].weight.data[...] = 1.0
        x = np.array([[0.3], [-1.2]])
        disp, seg = forward(model, x)
        want = np.tanh(x)
        assert np.allclose(disp.data, want, atol=1e-15)
        assert np.allclose(seg.data, want, atol=1e-15)

    def test_batch_order_preserved(self, rng):
        model = ToyModel("v2", seed=3)
        x = rng.normal(size=(8, 3))
        disp, seg = forward(model, x)
        assert disp.data.shape == (8, 1)
        assert seg.data.shape == (8, 1)
        d0, s0 = forward(model, x[:1])
        assert np.allclose(disp.data[0], d0.data[0], rtol=1e-12, atol=0)
        assert np.allclose(seg.data[0], s0.data[0], rtol=1e-12, atol=0)

    def test_input_width_checked(self):
        model = ToyModel("v2", in_dim=3, seed=0)
        with pytest.raises(ShapeMismatch):
            forward(model, np.ones((4, 2)))

    def test_v1_heads_use_separate_trunks(self, rng):
        model = ToyModel("v1", seed=7)
        x = rng.normal(size=(4, 3))
        disp_before, _ = forward(model, x)
        for layer in model.trunk_b:
            layer.weight.data[...] += 1.0
        disp_after, seg_after = forward(model, x)
        assert np.array_equal(disp_before.data, disp_after.data)
        model.trunk[0].weight.data[...] += 1.0
        _, seg_same = forward(model, x)
        assert np.array_equal(seg_after.data, seg_same.data)


class TestLosses:
    def test_perfect_predictions_zero_loss(self, rng):
        gt = rng.uniform(1.0, 5.0, size=(10, 1))
        seg_gt = rng.integers(0, 2, size=(10, 1)).astype(float)
        disp_pred = Value(gt.copy(), requires_grad=True)
        logits = Value(np.where(seg_gt > 0.5, 50.0, -50.0), requires_grad=True)
        loss = joint_loss(disp_pred, gt, logits, seg_gt,
                          np.ones((10, 1), dtype=bool))
        assert loss.item() < 1e-9

    def test_bce_logit_zero_label_one_gives_ln2(self):
        logits = Value(np.zeros((1, 1)), requires_grad=True)
        loss = bce_loss_value(logits, np.ones((1, 1)))
        assert abs(loss.item() - math.log(2.0)) < 1e-12

    def test_ssi_absorbs_scale_and_shift(self, rng):
        gt = rng.uniform(1.0, 5.0, size=(12, 1))
        pred = Value(3.0 * gt + 5.0, requires_grad=True)
        loss = ssi_loss_value(pred, gt, np.ones((12, 1), dtype=bool))
        assert loss.item() < 1e-18

    def test_mask_applies_to_disparity_only(self, rng):
        gt = rng.uniform(1.0, 5.0, size=(6, 1))
        mask = np.array([[True]] * 5 + [[False]])
        pred = gt.copy()
        pred[5] = 1000.0  # masked out, must not contribute
        loss = ssi_loss_value(Value(pred, requires_grad=True), gt, mask)
        assert loss.item() < 1e-16


class TestBackwardOnModels:
    def test_gradients_match_finite_differences(self, rng):
        for seed in range(5):
            data = make_synthetic_data(seed, size=12)
            model = ToyModel("v2", trunk_layers=2, seed=seed)
            disp, seg = forward(model, data.inputs)
            loss = joint_loss(disp, data.disparity, seg, data.seg, data.mask)
            backward(loss)
            analytic = [p.grad.copy() for p in model.parameters()]
            fd = finite_difference_grads(model, data)
            assert_grads_close(analytic, fd)

    def test_all_frozen_backward_allocates_nothing(self):
        data = make_synthetic_data(0, size=8)
        model = ToyModel("v2", seed=0)
        model.set_trainable_slots(())
        disp, seg = forward(model, data.inputs)
        loss = joint_loss(disp, data.disparity, seg, data.seg, data.mask)
        backward(loss)
        assert grad_buffer_count(model) == 0

    def test_partial_freeze_buffer_accounting(self):
        data = make_synthetic_data(1, size=8)
        model = ToyModel("v2", seed=1)
        n = len(model.parameters())
        assert grad_buffer_count(model) == 0  # before any backward
        for trainable in (range(n), range(2), range(3, n)):
            model.set_trainable_slots(trainable)
            disp, seg = forward(model, data.inputs)
            backward(joint_loss(disp, data.disparity, seg, data.seg, data.mask))
            assert grad_buffer_count(model) == len(trainable)

    def test_frozen_bits_never_change(self):
        data = make_synthetic_data(2, size=8)
        model = ToyModel("v2", seed=2)
        model.set_trainable_slots(range(2))
        frozen_before = [p.data.tobytes() for p in model.parameters()[2:]]
        for _ in range(5):
            disp, seg = forward(model, data.inputs)
            backward(joint_loss(disp, data.disparity, seg, data.seg, data.mask))
            sgd_step(model, 0.1)
        frozen_after = [p.data.tobytes() for p in model.parameters()[2:]]
        assert frozen_before == frozen_after


class TestSgdStep:
    def test_zero_learning_rate(self):
        data = make_synthetic_data(0, size=8)
        model = ToyModel("v2", seed=0)
        disp, seg = forward(model, data.inputs)
        backward(joint_loss(disp, data.disparity, seg, data.seg, data.mask))
        before = model_bytes(model)
        sgd_step(model, 0.0)
        assert model_bytes(model) == before

    def test_single_param_arithmetic(self):
        w = Value(np.array(1.0), requires_grad=True)

        class One:
            def parameters(self):
                return [w]

        w.grad = np.array(2.0)
        sgd_step(One(), 0.1)
        assert abs(float(w.data) - 0.8) < 1e-15

    def test_frozen_param_with_stale_grad_unchanged(self):
        w = Value(np.array(1.0), requires_grad=False)
        w.grad = np.array(5.0)

        class One:
            def parameters(self):
                return [w]

        sgd_step(One(), 0.1)
        assert float(w.data) == 1.0

    def test_missing_gradients(self):
        model = ToyModel("v2", seed=0)
        with pytest.raises(MissingGradients):
            sgd_step(model, 0.1)


class TestDeterminism:
    def _train(self, seed):
        data = make_synthetic_data(seed, size=16)
        model = ToyModel("v2", seed=seed)
        for _ in range(20):
            disp, seg = forward(model, data.inputs)
            backward(joint_loss(disp, data.disparity, seg, data.seg, data.mask))
            sgd_step(model, 0.05)
        return model_bytes(model)

    def test_bit_identical_trajectories(self):
        assert self._train(11) == self._train(11)

    def test_seed_changes_trajectory(self):
        assert self._train(11) != self._train(12)


class TestModelVariants:
    def test_v2_v3_identical_layout_and_init(self):
        v2 = ToyModel("v2", seed=42)
        v3 = ToyModel("v3", seed=42)
        assert [p.data.shape for p in v2.parameters()] == \
            [p.data.shape for p in v3.parameters()]
        assert model_bytes(v2) == model_bytes(v3)

    def test_param_slots_report_layout(self):
        model = ToyModel("v2", seed=0)
        slots = model.param_slots()
        assert [s.index for s in slots] == list(range(len(slots)))
        assert all(s.requires_grad for s in slots)

    def test_slot_count_scales_with_depth(self):
        model = ToyModel("v2", trunk_layers=4, head_layers=2, seed=0)
        assert len(model.parameters()) == 16
        assert model.trunk_slot_count == 8


class TestPretrainTrunk:
    def test_zero_epochs_matches_v2_init(self):
        data = make_synthetic_data(5, size=16)
        v3 = pretrain_trunk(ToyModel("v3", seed=5), data, 0, 0.1)
        v2 = ToyModel("v2", seed=5)
        assert model_bytes(v3) == model_bytes(v2)

    def test_regression_loss_decreases(self):
        data = make_synthetic_data(6, size=32)
        model = ToyModel("v3", seed=6)

        def reg_loss(m):
            disp, _ = forward(m, data.inputs)
            return ssi_loss_value(disp, data.disparity, data.mask).item()

        initial = reg_loss(model)
        pretrain_trunk(model, data, 150, 0.1)
        assert reg_loss(model) < initial

    def test_seg_head_bit_identical(self):
        data = make_synthetic_data(7, size=16)
        model = ToyModel("v3", seed=7)
        seg_before = [model.parameters()[i].data.tobytes()
                      for i in model.seg_head_slots]
        pretrain_trunk(model, data, 50, 0.1)
        seg_after = [model.parameters()[i].data.tobytes()
                     for i in model.seg_head_slots]
        assert seg_before == seg_after
        assert all(p.requires_grad for p in model.parameters())

    def test_rejects_other_variants(self):
        data = make_synthetic_data(0)
        with pytest.raises(ValueError):
            pretrain_trunk(ToyModel("v2", seed=0), data, 1, 0.1)


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        from semvox.autodiff import load_model, save_model

        model = ToyModel("v2", seed=9)
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        other = ToyModel("v2", seed=10)
        assert model_bytes(other) != model_bytes(model)
        load_model(other, path)
        assert model_bytes(other) == model_bytes(model)

    def test_shape_mismatch_rejected(self, tmp_path):
        from semvox.autodiff import load_model, save_model

        model = ToyModel("v2", hidden_dim=8, seed=0)
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        with pytest.raises(ShapeMismatch):
            load_model(ToyModel("v2", hidden_dim=4, seed=0), path)
