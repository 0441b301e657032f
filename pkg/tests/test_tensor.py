"""Tensor engine: forward oracles, backward rules, tape semantics, .ctf io."""

import numpy as np
import pytest

from conftest import conv2d_reference, max_rel_err, run_gradcheck

from resdense.tensor import (
    RunningStats,
    ShapeError,
    Tape,
    Tensor,
    activation,
    add,
    affine,
    avg_pool2d,
    backward,
    batch_norm2d,
    concat_channels,
    conv2d,
    finite_diff_grad,
    gem_pool,
    global_avg_pool,
    mul,
    read_ctf,
    relu,
    sigmoid,
    softmax,
    sum_all,
    write_ctf,
)


def t(data, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# conv2d


class TestConv2d:
    def test_one_by_one_kernel_scales(self):
        x = t(np.ones((1, 1, 3, 3)))
        k = t([[[[2.0]]]])
        out = conv2d(x, k)
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0, np.float32))

    def test_stride2_average_kernel(self):
        # hand-checked against the nested-loop oracle
        x = t(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        k = t(np.full((1, 1, 2, 2), 0.25))
        out = conv2d(x, k, stride=2)
        expected = np.array([[2.5, 4.5], [10.5, 12.5]], dtype=np.float32)
        np.testing.assert_allclose(out.data[0, 0], expected, atol=1e-6)
        ref = conv2d_reference(x.data, k.data, stride=2)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_identity_kernel(self):
        x = t(np.random.default_rng(0).normal(size=(2, 1, 5, 5)).astype(np.float32))
        out = conv2d(x, t([[[[1.0]]]]))
        np.testing.assert_array_equal(out.data, x.data)

    def test_channel_mismatch_names_dims(self):
        x = t(np.zeros((1, 3, 4, 4)))
        k = t(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ShapeError, match="3 channels.*expects 4"):
            conv2d(x, k)

    def test_too_small_input_errors(self):
        x = t(np.zeros((1, 1, 2, 2)))
        k = t(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ShapeError, match="not positive"):
            conv2d(x, k)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_reference(self, seed):
        rng = np.random.default_rng(seed)
        n, c, o = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 4)
        h, w = rng.integers(3, 10), rng.integers(3, 10)
        k = rng.integers(1, min(h, w) + 1)
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        x = rng.normal(size=(n, c, h, w)).astype(np.float32)
        kernel = rng.normal(size=(o, c, k, k)).astype(np.float32)
        bias = rng.normal(size=o).astype(np.float32)
        out = conv2d(t(x), t(kernel), t(bias), stride=stride, padding=padding)
        ref = conv2d_reference(x, kernel, bias, stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    @pytest.mark.parametrize("seed", range(4))
    def test_gradients(self, seed):
        def build(s, dtype):
            rng = np.random.default_rng(s)
            x = Tensor(rng.normal(size=(2, 3, 6, 6)).astype(np.float32).astype(dtype),
                       requires_grad=True)
            k = Tensor((rng.normal(size=(4, 3, 3, 3)) * 0.5).astype(np.float32).astype(dtype),
                       requires_grad=True)
            b = Tensor(rng.normal(size=4).astype(np.float32).astype(dtype), requires_grad=True)
            return (lambda: conv2d(x, k, b, stride=2, padding=1)), [x, k, b]

        run_gradcheck(build, seed)


# ---------------------------------------------------------------------------
# batch norm


class TestBatchNorm:
    def test_constant_input_centers_to_zero(self):
        x = t(np.broadcast_to(np.array([3.0, -1.0])[None, :, None, None], (2, 2, 4, 4)).copy())
        out = batch_norm2d(x, t(np.ones(2)), t(np.zeros(2)), None, mode="train")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_affine_on_standardized_input(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 3, 5, 5)).astype(np.float32)
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = batch_norm2d(t(x), t(np.full(3, 2.0)), t(np.full(3, 3.0)), None, mode="train")
        np.testing.assert_allclose(out.data, 2.0 * x + 3.0, atol=1e-3)

    def test_running_stats_update_and_infer(self):
        rng = np.random.default_rng(6)
        x = rng.normal(loc=2.0, size=(8, 2, 4, 4)).astype(np.float32)
        stats = RunningStats.initial(2)
        batch_norm2d(t(x), t(np.ones(2)), t(np.zeros(2)), stats, mode="train")
        expected_mean = 0.9 * 0.0 + 0.1 * x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(stats.mean, expected_mean, atol=1e-6)
        out = batch_norm2d(t(x), t(np.ones(2)), t(np.zeros(2)), stats, mode="infer")
        manual = (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(out.data, manual, atol=1e-5)

    def test_infer_requires_stats(self):
        x = t(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ValueError, match="running_stats"):
            batch_norm2d(x, t(np.ones(2)), t(np.zeros(2)), None, mode="infer")

    def test_channel_mismatch(self):
        x = t(np.zeros((1, 3, 2, 2)))
        with pytest.raises(ShapeError):
            batch_norm2d(x, t(np.ones(2)), t(np.zeros(2)), None, mode="train")

    @pytest.mark.parametrize("seed", range(4))
    def test_gradients(self, seed):
        def build(s, dtype):
            rng = np.random.default_rng(s)
            x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32).astype(dtype),
                       requires_grad=True)
            g = Tensor((1 + 0.3 * rng.normal(size=3)).astype(np.float32).astype(dtype),
                       requires_grad=True)
            b = Tensor(rng.normal(size=3).astype(np.float32).astype(dtype), requires_grad=True)
            return (lambda: batch_norm2d(x, g, b, None, mode="train")), [x, g, b]

        run_gradcheck(build, seed)


# ---------------------------------------------------------------------------
# activations


class TestActivations:
    def test_relu_definition(self):
        out = activation(t([-1.0, 0.0, 2.0]), "relu")
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_symmetry_point(self):
        assert activation(t([0.0]), "sigmoid").data[0] == pytest.approx(0.5)

    def test_sigmoid_open_interval(self):
        out = sigmoid(t([-100.0, -5.0, 0.0, 5.0, 100.0]))
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor(np.zeros(1, dtype=np.float64), requires_grad=True)
        with Tape() as tape:
            backward(tape, sum_all(sigmoid(x)))
        assert x.grad[0] == pytest.approx(0.25, abs=1e-12)
        fd = finite_diff_grad(lambda v: sigmoid(v).item(), x)
        assert fd.data[0] == pytest.approx(0.25, abs=1e-8)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown activation"):
            activation(t([1.0]), "tanh")

    @pytest.mark.parametrize("kind", ["relu", "sigmoid"])
    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, kind, seed):
        def build(s, dtype):
            rng = np.random.default_rng(s)
            raw = rng.normal(size=(3, 7)).astype(np.float32)
            # keep relu inputs away from its kink so the oracle is valid
            raw = np.where(np.abs(raw) < 0.05, 0.1, raw)
            x = Tensor(raw.astype(dtype), requires_grad=True)
            return (lambda: activation(x, kind)), [x]

        run_gradcheck(build, seed)


class TestSoftmax:
    def test_rows_sum_to_one(self, rng):
        out = softmax(t(rng.normal(size=(10, 2)) * 5))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        def build(s, dtype):
            rng = np.random.default_rng(s)
            x = Tensor(rng.normal(size=(4, 3)).astype(np.float32).astype(dtype),
                       requires_grad=True)
            return (lambda: softmax(x)), [x]

        run_gradcheck(build, seed)


# ---------------------------------------------------------------------------
# pooling


class TestPooling:
    def test_gem_p1_is_arithmetic_mean(self):
        x = t(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        assert gem_pool(x, 1.0).data[0, 0] == pytest.approx(2.5)

    def test_gem_p2_frozen_value(self):
        # ((1^2 + 2^2 + 3^2 + 4^2) / 4) ** 0.5 = sqrt(7.5)
        x = t(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        assert gem_pool(x, 2.0).data[0, 0] == pytest.approx(2.7386128, abs=1e-4)

    def test_gem_p1_equals_gap(self, rng):
        for _ in range(10):
            x = t(np.abs(rng.normal(size=(2, 3, 5, 4))))
            np.testing.assert_allclose(gem_pool(x, 1.0).data, global_avg_pool(x).data,
                                       atol=1e-6)

    def test_gem_rejects_bad_exponent(self):
        x = t(np.ones((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="must be > 0"):
            gem_pool(x, 0.0)
        with pytest.raises(ValueError, match="must be > 0"):
            gem_pool(x, -2.0)

    def test_gem_rejects_negative_input_with_fractional_p(self):
        x = t(np.array([[-1.0, 1.0], [1.0, 1.0]]).reshape(1, 1, 2, 2))
        with pytest.raises(ValueError, match="non-negative"):
            gem_pool(x, 2.5)
        gem_pool(x, 2.0)  # integral exponent admits negatives

    def test_gem_per_channel_exponent(self, rng):
        x = t(np.abs(rng.normal(size=(2, 3, 4, 4))) + 0.1)
        out = gem_pool(x, np.array([1.0, 2.0, 3.0]))
        per = [gem_pool(t(x.data[:, i:i + 1]), float(p)).data[:, 0]
               for i, p in enumerate([1.0, 2.0, 3.0])]
        np.testing.assert_allclose(out.data, np.stack(per, axis=1), atol=2e-6)

    def test_gap_constant_map(self):
        x = t(np.full((2, 3, 4, 4), 7.25))
        np.testing.assert_allclose(global_avg_pool(x).data, 7.25, atol=1e-6)

    def test_gap_mean(self):
        x = t(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert global_avg_pool(x).data[0, 0] == pytest.approx(2.5)

    def test_gap_gradient_uniform(self):
        x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 4, 5)).astype(np.float32),
                   requires_grad=True)
        with Tape() as tape:
            backward(tape, sum_all(global_avg_pool(x)))
        np.testing.assert_allclose(x.grad, 1.0 / 20.0, atol=1e-7)

    @pytest.mark.parametrize("p", [1.0, 2.0, 3.0, 2.5])
    @pytest.mark.parametrize("seed", range(2))
    def test_gem_gradients(self, p, seed):
        def build(s, dtype):
            rng = np.random.default_rng(s)
            x = Tensor((np.abs(rng.normal(size=(2, 3, 4, 4))) + 0.05)
                       .astype(np.float32).astype(dtype), requires_grad=True)
            return (lambda: gem_pool(x, p)), [x]

        run_gradcheck(build, seed)

    @pytest.mark.parametrize("seed", range(2))
    def test_gem_trainable_exponent_gradient(self, seed):
        def build(s, dtype):
            rng = np.random.default_rng(s)
            x = Tensor((np.abs(rng.normal(size=(2, 3, 4, 4))) + 0.05)
                       .astype(np.float32).astype(dtype), requires_grad=True)
            p = Tensor(np.array([3.0, 2.0, 1.5], dtype=dtype), requires_grad=True)
            return (lambda: gem_pool(x, p)), [x, p]

        run_gradcheck(build, seed)

    def test_avg_pool_shape_and_value(self):
        x = t(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        out = avg_pool2d(x)
        np.testing.assert_allclose(out.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
        with pytest.raises(ShapeError, match="not divisible"):
            avg_pool2d(t(np.zeros((1, 1, 5, 4))))


# ---------------------------------------------------------------------------
# add / concat / affine


class TestLinearOps:
    def test_add_identity_and_values(self):
        a = t([1.0, 2.0])
        np.testing.assert_array_equal(add(a, t([0.0, 0.0])).data, a.data)
        np.testing.assert_array_equal(add(a, t([3.0, 4.0])).data, [4.0, 6.0])

    def test_add_gradient_is_ones(self):
        a = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        b = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            backward(tape, sum_all(add(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 3)))

    def test_add_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            add(t([1.0, 2.0]), t([1.0, 2.0, 3.0]))

    def test_concat_single_is_identity(self):
        x = t(np.zeros((1, 2, 3, 3)))
        assert concat_channels([x]) is x

    def test_concat_orders_channels(self, rng):
        a = t(rng.normal(size=(2, 2, 3, 3)))
        b = t(rng.normal(size=(2, 3, 3, 3)))
        out = concat_channels([a, b])
        assert out.shape == (2, 5, 3, 3)
        np.testing.assert_array_equal(out.data[:, :2], a.data)
        np.testing.assert_array_equal(out.data[:, 2:], b.data)

    def test_concat_backward_splits_by_range(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 2, 2)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 3, 2, 2)).astype(np.float32), requires_grad=True)
        w = rng.normal(size=(1, 5, 2, 2)).astype(np.float32)
        with Tape() as tape:
            backward(tape, sum_all(mul(concat_channels([a, b]), Tensor(w))))
        np.testing.assert_allclose(a.grad, w[:, :2], atol=1e-7)
        np.testing.assert_allclose(b.grad, w[:, 2:], atol=1e-7)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError, match="mismatch"):
            concat_channels([t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 2)))])

    def test_affine_identity_weight(self, rng):
        x = t(rng.normal(size=(3, 4)))
        out = affine(x, t(np.eye(4)), t(np.zeros(4)))
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_affine_hand_value(self):
        out = affine(t([[1.0, 2.0]]), t([[1.0], [1.0]]), t([0.5]))
        assert out.data[0, 0] == pytest.approx(3.5)

    def test_affine_dim_mismatch(self):
        with pytest.raises(ShapeError, match="inner dims"):
            affine(t(np.zeros((2, 3))), t(np.zeros((4, 2))), t(np.zeros(2)))

    @pytest.mark.parametrize("seed", range(4))
    def test_affine_gradients(self, seed):
        def build(s, dtype):
            rng = np.random.default_rng(s)
            n, f, k = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
            x = Tensor(rng.normal(size=(n, f)).astype(np.float32).astype(dtype),
                       requires_grad=True)
            w = Tensor(rng.normal(size=(f, k)).astype(np.float32).astype(dtype),
                       requires_grad=True)
            b = Tensor(rng.normal(size=k).astype(np.float32).astype(dtype), requires_grad=True)
            return (lambda: affine(x, w, b)), [x, w, b]

        run_gradcheck(build, seed)

    @pytest.mark.parametrize("alpha", [0.5, 2.0, -1.25])
    def test_linearity(self, alpha, rng):
        a = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        b = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(add(t(alpha * a), t(alpha * b)).data,
                                   alpha * add(t(a), t(b)).data, atol=1e-6)
        np.testing.assert_allclose(concat_channels([t(alpha * a), t(alpha * b)]).data,
                                   alpha * concat_channels([t(a), t(b)]).data, atol=1e-6)
        x = rng.normal(size=(3, 4)).astype(np.float32)
        w = rng.normal(size=(4, 2)).astype(np.float32)
        zero_bias = t(np.zeros(2))
        np.testing.assert_allclose(affine(t(alpha * x), t(w), zero_bias).data,
                                   alpha * affine(t(x), t(w), zero_bias).data, atol=1e-5)


# ---------------------------------------------------------------------------
# tape / backward


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 2)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            backward(tape, sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            backward(tape, sum_all(mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            y = mul(x, x)
            with pytest.raises(ShapeError, match="scalar"):
                backward(tape, y)

    def test_loss_not_on_tape_rejected(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            mul(x, x)
        stray = Tensor(np.asarray(1.0))
        with pytest.raises(ValueError, match="not produced on this tape"):
            backward(tape, stray)

    def test_unreachable_leaf_gets_zero_grad(self, rng):
        x = Tensor(rng.normal(size=3).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=3).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(mul(x, x))
            add(w, w)  # recorded but never feeds the loss
            backward(tape, loss)
        np.testing.assert_array_equal(w.grad, np.zeros(3))
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-6)

    def test_tape_is_reset_after_backward(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(mul(x, x))
            backward(tape, loss)
        assert len(tape) == 0

    def test_grad_accumulates_across_backwards(self):
        x = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                backward(tape, sum_all(mul(x, x)))
        np.testing.assert_allclose(x.grad, [8.0], atol=1e-6)

    def test_deterministic_gradients(self, rng):
        a = rng.normal(size=(4, 4)).astype(np.float32)

        def run():
            x = Tensor(a.copy(), requires_grad=True)
            with Tape() as tape:
                y = mul(x, x)
                backward(tape, sum_all(mul(y, Tensor(a.copy()))))
            return x.grad

        assert np.array_equal(run(), run())

    def test_forward_backward_stay_finite(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32), requires_grad=True)
        k = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            h = relu(conv2d(x, k, padding=1))
            out = sigmoid(global_avg_pool(h))
            assert np.all(np.isfinite(out.data))
            backward(tape, sum_all(out))
        assert np.all(np.isfinite(x.grad)) and np.all(np.isfinite(k.grad))


# ---------------------------------------------------------------------------
# finite differences


class TestFiniteDiff:
    def test_sum_gradient(self, rng):
        x = Tensor(rng.normal(size=(2, 3)).astype(np.float64))
        fd = finite_diff_grad(lambda v: sum_all(v if False else mul(v, Tensor(np.ones_like(v.data)))).item(), x)
        np.testing.assert_allclose(fd.data, 1.0, atol=1e-8)

    def test_sum_of_squares_at_three(self):
        x = Tensor(np.array([3.0], dtype=np.float64))
        fd = finite_diff_grad(lambda v: float((v.data ** 2).sum()), x, h=1e-4)
        assert fd.data[0] == pytest.approx(6.0, abs=1e-8)


# ---------------------------------------------------------------------------
# .ctf files


class TestCtfFormat:
    def test_round_trip(self, tmp_path, rng):
        for shape in [(3,), (2, 4), (2, 3, 4, 5)]:
            arr = rng.normal(size=shape).astype(np.float32)
            path = tmp_path / f"t{len(shape)}.ctf"
            write_ctf(path, arr)
            np.testing.assert_array_equal(read_ctf(path), arr)

    def test_layout(self, tmp_path):
        path = tmp_path / "x.ctf"
        write_ctf(path, np.array([[1.0, 2.0]], dtype=np.float32))
        blob = path.read_bytes()
        assert blob[:4] == b"CTF1"
        assert np.frombuffer(blob[4:8], dtype="<u4")[0] == 2        # rank
        assert tuple(np.frombuffer(blob[8:16], dtype="<u4")) == (1, 2)
        np.testing.assert_array_equal(np.frombuffer(blob[16:], dtype="<f4"), [1.0, 2.0])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ctf"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            read_ctf(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "short.ctf"
        write_ctf(path, np.ones(4, dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError, match="truncated"):
            read_ctf(path)
