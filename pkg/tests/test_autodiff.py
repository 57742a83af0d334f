import math

import numpy as np
import pytest

from fragpretrain import autodiff as ad
from fragpretrain.autodiff import Tape, Tensor
from fragpretrain.errors import DetachedLoss, NotScalar, NumericError, SegmentOutOfRange, ShapeMismatch

from gradcases import CASES, TOLERANCE, max_error

OP_CASES = [n for n in CASES if not n.endswith("_encoder")]


class TestForward:
    def test_relu(self):
        assert ad.relu(Tensor([[-1.0, 2.0]])).value.tolist() == [[0.0, 2.0]]

    def test_segment_sum(self):
        out = ad.segment_sum(Tensor([[1.0], [2.0], [3.0]]), [0, 0, 1], 2)
        assert out.value.ravel().tolist() == [3.0, 3.0]

    def test_segment_sum_conserves_total(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(50, 4)))
        out = ad.segment_sum(x, rng.integers(0, 7, size=50), 7)
        np.testing.assert_allclose(out.value.sum(axis=0), x.value.sum(axis=0), atol=1e-5)

    def test_segment_mean_empty_segment(self):
        out, empty = ad.segment_mean(Tensor([[2.0], [4.0]]), [0, 0], 3, return_mask=True)
        assert out.value.ravel().tolist() == [3.0, 0.0, 0.0]
        assert empty.tolist() == [False, True, True]

    def test_segment_out_of_range(self):
        with pytest.raises(SegmentOutOfRange):
            ad.segment_sum(Tensor([[1.0]]), [2], 2)
        with pytest.raises(SegmentOutOfRange):
            ad.embedding_lookup(Tensor(np.zeros((3, 2))), [3])

    def test_softmax_ce_uniform(self):
        out = ad.softmax_ce_with_logits(Tensor([[0.0, 0.0]]), [0])
        assert out.item() == pytest.approx(math.log(2), rel=1e-6)

    def test_bce_zero_logits(self):
        out = ad.sigmoid_bce_with_logits(Tensor(np.zeros((3, 4))), np.eye(3, 4))
        assert out.item() == pytest.approx(math.log(2), rel=1e-6)

    def test_log_sum_exp_stable(self):
        out = ad.log_sum_exp(Tensor([[1000.0, 1000.0]]))
        assert out.value[0] == pytest.approx(1000 + math.log(2))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ShapeMismatch):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_default_dtype_float32(self):
        assert Tensor([1.0]).value.dtype == np.float32
        with ad.precision(np.float64):
            assert Tensor([1.0]).value.dtype == np.float64

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_debug_mode_flags_nan(self):
        ad.set_debug(True)
        try:
            with pytest.raises(NumericError):
                ad.exp(Tensor([[1e4]]))
        finally:
            ad.set_debug(False)


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3))
        with Tape([w]) as tape:
            loss = ad.sum_all(w)
        np.testing.assert_array_equal(tape.backward(loss)[0], np.ones((2, 3)))

    def test_unused_param_zero(self):
        w, v = Tensor([[1.0]]), Tensor([[2.0]])
        with Tape([w, v]) as tape:
            loss = ad.sum_all(w)
        assert tape.backward(loss)[1].tolist() == [[0.0]]

    def test_not_scalar(self):
        w = Tensor([[1.0, 2.0]])
        with Tape([w]) as tape:
            out = ad.relu(w)
        with pytest.raises(NotScalar):
            tape.backward(out)

    def test_detached(self):
        w = Tensor([[1.0]])
        with Tape([w]) as tape:
            loss = ad.sum_all(Tensor([[3.0]]))
        with pytest.raises(DetachedLoss):
            tape.backward(loss)

    def test_shared_input_accumulates(self):
        w = Tensor([[3.0]])
        with Tape([w]) as tape:
            loss = ad.sum_all(ad.mul(w, w))
        assert tape.backward(loss)[0].tolist() == [[6.0]]

    def test_norm_squared_float32(self):
        """||Wx||^2 against finite differences at 32-bit precision, eps 1e-3."""
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(4, 3)))
        x = Tensor(rng.normal(size=(3, 1)))

        def fn():
            y = ad.matmul(w, x)
            return ad.sum_all(ad.mul(y, y))

        assert w.value.dtype == np.float32
        assert ad.check_gradients(fn, [w], eps=1e-3) < 1e-4

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        w = Tensor(rng.normal(size=(5, 5)))

        def grad():
            with Tape([w]) as tape:
                loss = ad.sum_all(ad.relu(ad.matmul(w, w)))
            return tape.backward(loss)[0]

        assert np.array_equal(grad(), grad())


class TestFiniteDifferences:
    @pytest.mark.parametrize("name", OP_CASES)
    def test_op(self, name):
        assert max_error(name) < TOLERANCE


class TestOptimizers:
    def test_zero_grad_no_decay_keeps_params(self):
        w = Tensor([1.0, -2.0])
        state = ad.AdamState([w])
        ad.adamw_step([w], [np.zeros(2, np.float32)], state, weight_decay=0.0)
        assert w.value.tolist() == [1.0, -2.0] and state.t == 1

    def test_step_moves_towards_minimum(self):
        w = Tensor([1.0])
        state = ad.AdamState([w])
        ad.adam_step([w], [2 * w.value], state, lr=0.1)
        assert 0 < w.value[0] < 1

    @pytest.mark.parametrize("kind", ["adam", "adamw"])
    def test_quadratic_converges(self, kind):
        w = Tensor([1.0, -1.5])
        scales = np.array([1.0, 3.0], dtype=np.float32)
        opt = ad.Optimizer([w], kind, lr=0.05, weight_decay=0.0)
        for _ in range(200):
            opt.step([2 * scales * w.value])
        assert np.linalg.norm(w.value) < 1e-2

    def test_adamw_decay_is_decoupled(self):
        a, b = Tensor([1.0]), Tensor([1.0])
        sa, sb = ad.AdamState([a]), ad.AdamState([b])
        ad.adamw_step([a], [np.zeros(1, np.float32)], sa, lr=0.1, weight_decay=0.5)
        ad.adam_step([b], [np.zeros(1, np.float32)], sb, lr=0.1, weight_decay=0.5)
        assert a.value[0] == pytest.approx(1 - 0.1 * 0.5)
        assert b.value[0] == pytest.approx(1 - 0.1, rel=1e-4)  # L2 term passes through Adam's normalization

    def test_shape_mismatch(self):
        w = Tensor([1.0, 2.0])
        with pytest.raises(ShapeMismatch):
            ad.adam_step([w], [np.zeros(3)], ad.AdamState([w]))


class TestSchedules:
    def test_plateau_reduces_after_patience(self):
        opt = ad.Optimizer([Tensor([0.0])], lr=1.0)
        sched = ad.ReduceOnPlateau(opt, factor=0.1, patience=2)
        for loss in [1.0, 1.0, 1.0]:
            sched.step(loss)
        assert opt.lr == 1.0
        sched.step(1.0)
        assert opt.lr == pytest.approx(0.1)

    def test_plateau_relative_threshold(self):
        opt = ad.Optimizer([Tensor([0.0])], lr=1.0)
        sched = ad.ReduceOnPlateau(opt, factor=0.5, patience=0, threshold=1e-2)
        sched.step(1.0)
        sched.step(0.995)  # under 1% better: counts as no improvement
        assert opt.lr == 0.5

    def test_step_decay(self):
        opt = ad.Optimizer([Tensor([0.0])], lr=1.0)
        sched = ad.StepDecay(opt, step_size=30, gamma=0.3)
        for _ in range(60):
            sched.step()
        assert opt.lr == pytest.approx(0.09)
