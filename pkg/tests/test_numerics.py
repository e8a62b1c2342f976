import math

import numpy as np
import pytest

from mat_forecaster import numerics as nm
from mat_forecaster.errors import DimensionError, NumericError, UsageError
from mat_forecaster.numerics import AdamState, Tensor, adam_step, backward, no_grad

from fdcheck import central_differences, max_relative_error, shadow


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal((a @ b).data, b.data)

    def test_projector_row_select(self):
        p = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal((p @ b).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4)).astype(np.float32)
        b = rng.normal(size=(4, 2)).astype(np.float32)
        want = np.zeros((3, 2), dtype=np.float64)
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += float(a[i, k]) * float(b[k, j])
        got = (Tensor(a) @ Tensor(b)).data
        assert np.allclose(got, want, rtol=1e-6, atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as e:
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
        assert "(2, 3)" in str(e.value)


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        s = nm.softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
        assert np.allclose(s.data, [1 / 3] * 3, atol=1e-7)

    @pytest.mark.parametrize("c", [-1000.0, -3.5, 0.0, 7.25, 1000.0])
    def test_shift_invariance(self, c):
        # float64 input: at |c|~1e3 float32 cannot even represent c + ln2
        # accurately enough to see the analytic result at 1e-6.
        x = np.array([c, c + math.log(2.0)], dtype=np.float64)
        s = nm.softmax(Tensor(x), axis=-1)
        assert np.allclose(s.data, [1 / 3, 2 / 3], atol=1e-6)

    def test_large_magnitude_is_stable(self):
        s = nm.softmax(Tensor([1000.0, 0.0]), axis=-1)
        assert s.data[0] == pytest.approx(1.0, abs=1e-6)
        assert s.data[1] == pytest.approx(0.0, abs=1e-6)

    def test_rows_sum_to_one_for_random_inputs(self):
        rng = np.random.default_rng(7)
        for scale in (1.0, 1e3):
            x = Tensor(rng.normal(scale=scale, size=(5, 9)).astype(np.float32))
            s = nm.softmax(x, axis=-1)
            assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_nonfinite_input_raises(self):
        x = Tensor([[1.0, 2.0]])
        x.data[0, 0] = np.inf
        with pytest.raises(NumericError):
            nm.softmax(x, axis=-1)


class TestLayerNorm:
    def test_constant_slice_collapses_to_zero(self):
        out = nm.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor([1.0] * 3), Tensor([0.0] * 3))
        assert np.allclose(out.data, 0.0, atol=1e-6)

    def test_already_standardized(self):
        out = nm.layer_norm(Tensor([1.0, -1.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-12)
        assert np.allclose(out.data, [1.0, -1.0], atol=1e-5)

    def test_random_slice_statistics(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 16)).astype(np.float32) * 3 + 1)
        out = nm.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        mu = out.data.mean(axis=-1)
        var = out.data.var(axis=-1)
        assert np.all(np.abs(mu) < 1e-6)
        assert np.all(np.abs(var - 1.0) < 1e-4)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            nm.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestRelu:
    def test_elementwise(self):
        assert np.array_equal(nm.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        assert np.array_equal(nm.relu(Tensor([-5.0, -0.1])).data, [0.0, 0.0])

    def test_subgradient_convention(self):
        for x, want in [(3.0, 1.0), (-3.0, 0.0), (0.0, 0.0)]:
            t = Tensor([x], requires_grad=True)
            backward(nm.relu(t).sum())
            assert t.grad[0] == want


class TestBackward:
    def test_quadratic(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        backward((w * w).sum())
        assert np.allclose(w.grad, [2.0, 4.0])

    def test_softmax_cross_entropy_matches_hand_jacobian(self):
        # loss = -sum(t * log softmax(z)); d loss / d z = p - t
        z = Tensor([2.0, -1.0], requires_grad=True)
        t = Tensor([1.0, 0.0])
        p = nm.softmax(z, axis=-1)
        loss = -((t * nm.log(p)).sum())
        backward(loss)
        expected = p.data - t.data
        assert np.allclose(z.grad, expected, atol=1e-6)

    def test_composite_matches_central_differences(self):
        rng = np.random.default_rng(11)
        w1 = shadow(Tensor(rng.normal(size=(3, 4)).astype(np.float32), requires_grad=True))
        w2 = shadow(Tensor(rng.normal(size=(4, 2)).astype(np.float32), requires_grad=True))
        g = shadow(Tensor(np.ones(4, dtype=np.float32), requires_grad=True))
        b = shadow(Tensor(np.zeros(4, dtype=np.float32), requires_grad=True))
        x = Tensor(rng.normal(size=(5, 3)).astype(np.float64))
        params = [w1, w2, g, b]

        def run():
            h = nm.layer_norm(x @ w1, g, b)
            h = nm.softmax(h, axis=-1)
            out = nm.relu(h @ w2)
            return (out * out).mean()

        loss = run()
        backward(loss)
        fd = central_differences(lambda: run().item(), params)
        assert max_relative_error([p.grad for p in params], fd) < 1e-4

    def test_non_scalar_loss_is_usage_error(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            backward(w * w)

    def test_repeated_backward_accumulates(self):
        w = Tensor([3.0], requires_grad=True)
        backward((w * w).sum())
        backward((w * w).sum())
        assert np.allclose(w.grad, [12.0])

    def test_tape_linearity(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3)).astype(np.float32)
        w = Tensor(rng.normal(size=(3, 2)).astype(np.float32), requires_grad=True)

        def loss_a():
            return ((Tensor(x) @ w) * (Tensor(x) @ w)).sum()

        def loss_b():
            return (Tensor(x) @ w).sum()

        backward(nm.add(loss_a(), loss_b()))
        combined = w.grad.copy()
        w.zero_grad()
        backward(loss_a())
        backward(loss_b())
        assert np.allclose(combined, w.grad, rtol=1e-5, atol=1e-6)

    def test_no_grad_blocks_taping(self):
        w = Tensor([1.0], requires_grad=True)
        with no_grad():
            loss = (w * w).sum()
        assert not loss.requires_grad


class TestNumericGuards:
    def test_overflow_raises_instead_of_inf(self):
        big = Tensor([1e38])
        with pytest.raises(NumericError):
            big * Tensor([1e38])

    def test_nan_construction_rejected(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        st = AdamState(lr=0.1)
        adam_step([p], [np.zeros(2)], st)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        p = Tensor([0.5], requires_grad=True)
        st = AdamState(lr=1e-4)
        adam_step([p], [np.ones(1)], st)
        # bias correction makes m_hat = v_hat = 1 at step 1
        assert p.data[0] == pytest.approx(0.5 - 1e-4 / (1.0 + 1e-8), abs=1e-9)

    def test_ten_steps_match_scalar_reference(self):
        # independent reference: plain-python Adam on f(x) = x^2
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        theta_ref, m, v = 1.0, 0.0, 0.0
        trajectory = []
        for t in range(1, 11):
            g = 2.0 * theta_ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            theta_ref -= lr * mhat / (math.sqrt(vhat) + eps)
            trajectory.append(theta_ref)

        p = Tensor([1.0], requires_grad=True)
        st = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
        for t in range(10):
            loss = (p * p).sum()
            backward(loss)
            adam_step([p], [p.grad], st)
            p.zero_grad()
            assert p.data[0] == pytest.approx(trajectory[t], abs=1e-6)

    def test_shape_mismatch(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(DimensionError):
            adam_step([p], [np.zeros(3)], AdamState())


OPS = {
    "add": lambda rng, x, y: nm.add(x, y),
    "sub": lambda rng, x, y: nm.sub(x, y),
    "mul": lambda rng, x, y: nm.mul(x, y),
    "matmul": lambda rng, x, y: nm.matmul(x, nm.transpose_last(y)),
    "relu": lambda rng, x, y: nm.relu(x),
    "softmax": lambda rng, x, y: nm.softmax(x, axis=-1),
    "layer_norm": None,  # handled separately (extra params)
    "sum_axis": lambda rng, x, y: nm.tsum(x, axis=0),
    "mean": lambda rng, x, y: nm.tmean(x),
    "concat": lambda rng, x, y: nm.concat([x, y], axis=-1),
    "narrow": lambda rng, x, y: nm.narrow(x, 0, 1, 2),
}


def _away_from_kink(a, margin=5e-3):
    a = a.copy()
    small = np.abs(a) < margin
    a[small] = np.sign(a[small] + 0.5) * margin * 2
    return a


@pytest.mark.parametrize("seed", range(100))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(3, 5)), int(rng.integers(2, 5)))
    x = Tensor(_away_from_kink(rng.normal(size=shape)), requires_grad=True, dtype=np.float64)
    y = Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)
    gain = Tensor(rng.normal(size=shape[-1]) + 1.5, requires_grad=True, dtype=np.float64)
    bias = Tensor(rng.normal(size=shape[-1]), requires_grad=True, dtype=np.float64)

    name = list(OPS)[seed % len(OPS)]

    # spread the rows for layer_norm so per-row variance stays O(1); near-zero
    # variance makes the true third derivative huge and central differences at
    # h=1e-3 meaningless regardless of gradient correctness
    x_ln = Tensor(x.data + np.arange(shape[-1]) * 4.0, requires_grad=True, dtype=np.float64)

    def run():
        if name == "layer_norm":
            out = nm.layer_norm(x_ln, gain, bias)
        else:
            out = OPS[name](rng, x, y)
        return (out * out).mean()

    params = [x_ln, gain, bias] if name == "layer_norm" else [x, y]
    loss = run()
    backward(loss)
    fd = central_differences(lambda: run().item(), params)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    assert max_relative_error(analytic, fd) < 1e-4, name
