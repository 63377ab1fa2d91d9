import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beef import ops
from beef.gradcheck import grad_check
from beef.tensor import (
    NonFiniteError,
    Parameter,
    RecordError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    default_dtype,
    no_record,
    precision,
)


def _t(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


# name -> builder(rng) returning (f, inputs); each is checked on 20 seeds.
PRIMITIVES = {
    "add": lambda r: (lambda a, b: (lambda: ops.add(a, b), [a, b]))(_t(r, 3, 4), _t(r, 3, 4)),
    "sub": lambda r: (lambda a, b: (lambda: ops.sub(a, b), [a, b]))(_t(r, 3, 4), _t(r, 3, 4)),
    "mul": lambda r: (lambda a, b: (lambda: ops.mul(a, b), [a, b]))(_t(r, 3, 4), _t(r, 3, 4)),
    "scale": lambda r: (lambda a: (lambda: ops.scale(a, -1.7), [a]))(_t(r, 5)),
    "add_scalar": lambda r: (lambda a: (lambda: ops.add_scalar(a, 0.3), [a]))(_t(r, 5)),
    "square": lambda r: (lambda a: (lambda: ops.square(a), [a]))(_t(r, 2, 3)),
    "matmul_mm": lambda r: (lambda a, b: (lambda: ops.matmul(a, b), [a, b]))(_t(r, 3, 4), _t(r, 4, 2)),
    "matmul_mv": lambda r: (lambda a, b: (lambda: ops.matmul(a, b), [a, b]))(_t(r, 3, 4), _t(r, 4)),
    "matmul_vm": lambda r: (lambda a, b: (lambda: ops.matmul(a, b), [a, b]))(_t(r, 4), _t(r, 4, 2)),
    "matmul_vv": lambda r: (lambda a, b: (lambda: ops.matmul(a, b), [a, b]))(_t(r, 4), _t(r, 4)),
    "bmm": lambda r: (lambda a, b: (lambda: ops.bmm(a, b), [a, b]))(_t(r, 2, 3, 4), _t(r, 2, 4, 2)),
    "linear_map": lambda r: (lambda x, w, b: (lambda: ops.linear_map(x, w, b), [x, w, b]))(
        _t(r, 3, 4), _t(r, 2, 4), _t(r, 2)),
    "linear_map_vec": lambda r: (lambda x, w: (lambda: ops.linear_map(x, w), [x, w]))(_t(r, 4), _t(r, 2, 4)),
    "einsum": lambda r: (lambda a, b, c: (lambda: ops.einsum("ij,jk,k->i", a, b, c), [a, b, c]))(
        _t(r, 2, 3), _t(r, 3, 4), _t(r, 4)),
    "einsum_reduce": lambda r: (lambda a, b: (lambda: ops.einsum("ijk,i->k", a, b), [a, b]))(
        _t(r, 2, 3, 4), _t(r, 2)),
    "mode_n_product": lambda r: (lambda c, v: (lambda: ops.mode_n_product(c, v, 2), [c, v]))(
        _t(r, 2, 3, 4), _t(r, 3)),
    "sum_axis": lambda r: (lambda a: (lambda: ops.sum(a, axis=(0, 2)), [a]))(_t(r, 2, 3, 4)),
    "mean": lambda r: (lambda a: (lambda: ops.mean(a, axis=1), [a]))(_t(r, 2, 3, 4)),
    "reshape": lambda r: (lambda a: (lambda: ops.reshape(a, (4, 3)), [a]))(_t(r, 2, 6)),
    "transpose": lambda r: (lambda a: (lambda: ops.transpose(a, (2, 0, 1)), [a]))(_t(r, 2, 3, 4)),
    "concat": lambda r: (lambda a, b: (lambda: ops.concat([a, b], axis=1), [a, b]))(_t(r, 2, 3), _t(r, 2, 1)),
    "stack": lambda r: (lambda a, b: (lambda: ops.stack([a, b], axis=1), [a, b]))(_t(r, 2, 3), _t(r, 2, 3)),
    "index_basic": lambda r: (lambda a: (lambda: a[1:, ::2], [a]))(_t(r, 3, 5)),
    "index_advanced": lambda r: (lambda a: (lambda: ops.index(a, np.array([0, 2, 0])), [a]))(_t(r, 3, 2)),
    "take_rows": lambda r: (lambda a: (lambda: ops.take_rows(a, [1, 1, 0]), [a]))(_t(r, 3, 2)),
    "broadcast_to": lambda r: (lambda a: (lambda: ops.broadcast_to(a, (2, 4, 3), axis=1), [a]))(_t(r, 2, 3)),
    "relu": lambda r: (lambda a: (lambda: ops.relu(a), [a]))(_t(r, 4, 3)),
    "sigmoid": lambda r: (lambda a: (lambda: ops.sigmoid(a), [a]))(_t(r, 4, 3)),
    "tanh": lambda r: (lambda a: (lambda: ops.tanh(a), [a]))(_t(r, 4, 3)),
    "exp": lambda r: (lambda a: (lambda: ops.exp(a), [a]))(_t(r, 4)),
    "log": lambda r: (lambda a: (lambda: ops.log(a), [a]))(_t(r, 4, positive=True)),
    "clamped_log": lambda r: (lambda a: (lambda: ops.clamped_log(a)[0], [a]))(_t(r, 4, positive=True)),
    "softmax": lambda r: (lambda a: (lambda: ops.softmax(a, axis=1), [a]))(_t(r, 3, 4)),
    "softmax_temperature": lambda r: (lambda a: (lambda: ops.softmax(a, temperature=0.7), [a]))(_t(r, 5)),
    "log_softmax": lambda r: (lambda a: (lambda: ops.log_softmax(a, axis=0), [a]))(_t(r, 3, 4)),
    "mse": lambda r: (lambda a, b: (lambda: ops.mse(a, b), [a, b]))(_t(r, 3, 2), _t(r, 3, 2)),
    "conv3d": lambda r: (lambda x, w, b: (
        lambda: ops.conv3d(x, w, b, stride=(1, 2, 1), padding=(1, 0, 1)), [x, w, b]))(
        _t(r, 2, 3, 5, 4, 2), _t(r, 2, 3, 2, 2, 3), _t(r, 3)),
}


def _kink_safe(build, seed):
    from beef.gradcheck import relu_margin

    f, inputs = build(np.random.default_rng(seed))
    return f, inputs, relu_margin(f)


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_twenty_seeds(self, name, f64):
        checked, seed = 0, 0
        while checked < 20:
            f, inputs, margin = _kink_safe(PRIMITIVES[name], seed)
            seed += 1
            if margin < 5e-5:
                continue
            assert grad_check(f, inputs) < 1e-6, f"{name} seed {seed - 1}"
            checked += 1

    def test_wrong_backward_is_caught(self, f64, rng):
        from beef.tensor import make_output

        def bad_square(a):
            return make_output(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")

        a = _t(rng, 5)
        assert grad_check(lambda: bad_square(a), [a]) > 1e-2

    def test_linear_map_is_exact(self, f64, rng):
        x, w = _t(rng, 4), _t(rng, 3, 4)
        assert grad_check(lambda: ops.linear_map(x, w), [x, w]) < 1e-8

    def test_grad_check_rejects_float32(self, rng):
        a = Tensor(rng.standard_normal(3), requires_grad=True)
        with pytest.raises(TypeError):
            grad_check(lambda: ops.square(a), [a])


class TestOracles:
    def test_mode_n_identity(self):
        core = Tensor(np.ones((1, 1, 1)))
        v = Tensor([1.0])
        assert ops.mode_n_product(ops.mode_n_product(core, v, 1), v, 1).numpy().tolist() == [1.0]

    def test_mode_n_loop_oracle(self):
        core = np.zeros((2, 2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    core[i, j, k] = i + 2 * j + 4 * k
        t = ops.mode_n_product(ops.mode_n_product(Tensor(core), Tensor([1.0, 1.0]), 1), Tensor([1.0, 1.0]), 1)
        np.testing.assert_array_equal(t.numpy(), [6.0, 22.0])

    def test_mode_n_zero_vector(self, rng):
        core = Tensor(rng.standard_normal((2, 3, 4)))
        assert not ops.mode_n_product(core, Tensor(np.zeros(3)), 2).numpy().any()

    def test_linear_map_examples(self, rng):
        x = Tensor([1.0, 1.0])
        y = ops.linear_map(x, Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(y.numpy(), [3.0, 7.0])
        eye = ops.linear_map(Tensor([0.5, -2.0]), Tensor(np.eye(2)))
        np.testing.assert_array_equal(eye.numpy(), [0.5, -2.0])
        b = Tensor(rng.standard_normal(3))
        zero = ops.linear_map(Tensor(np.zeros(2)), Tensor(rng.standard_normal((3, 2))), b)
        np.testing.assert_array_equal(zero.numpy(), b.numpy())

    @given(st.floats(-50, 50))
    def test_softmax_constant_is_uniform(self, c):
        p = ops.softmax(Tensor([c, c, c], dtype=np.float64)).numpy()
        np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-12)

    def test_softmax_closed_form(self):
        p = ops.softmax(Tensor([0.0, np.log(3.0)], dtype=np.float64)).numpy()
        np.testing.assert_allclose(p, [0.25, 0.75], atol=1e-12)

    def test_softmax_zero_temperature_is_argmax(self):
        p = ops.softmax(Tensor([0.2, 1.5, 1.5, -1.0]), temperature=1e-9).numpy()
        np.testing.assert_array_equal(p, [0, 1, 0, 0])
        with pytest.raises(ValueError):
            ops.softmax(Tensor([1.0]), temperature=0.0)

    def test_conv3d_loop_oracle(self, rng):
        x = rng.standard_normal((2, 4, 5, 6, 3))
        w = rng.standard_normal((3, 2, 3, 3, 2))
        b = rng.standard_normal(2)
        st_, pd = (2, 1, 2), (1, 0, 1)
        out = ops.conv3d(Tensor(x, np.float64), Tensor(w, np.float64), Tensor(b, np.float64), st_, pd).numpy()
        xp = np.pad(x, ((0, 0), (1, 1), (0, 0), (1, 1), (0, 0)))
        To = (4 + 2 - 3) // 2 + 1
        Ho = (5 - 2) // 1 + 1
        Wo = (6 + 2 - 3) // 2 + 1
        ref = np.zeros((2, To, Ho, Wo, 2))
        for n in range(2):
            for t in range(To):
                for i in range(Ho):
                    for j in range(Wo):
                        patch = xp[n, t * 2: t * 2 + 3, i: i + 2, j * 2: j * 2 + 3]
                        for co in range(2):
                            ref[n, t, i, j, co] = (patch * w[..., co]).sum() + b[co]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_conv3d_temporal_hand_example(self):
        x = Tensor(np.arange(1.0, 6.0).reshape(1, 5, 1, 1, 1), np.float64)
        w = Tensor(np.array([1.0, 0.0, -1.0]).reshape(3, 1, 1, 1, 1), np.float64)
        out = ops.conv3d(x, w, padding=(1, 0, 0)).numpy().ravel()
        np.testing.assert_array_equal(out, [-2.0, -2.0, -2.0, -2.0, 4.0])

    def test_clamped_log_flag(self):
        out, clamped = ops.clamped_log(Tensor([1e-20, 1.0], dtype=np.float64))
        assert clamped
        assert out.numpy()[0] == pytest.approx(np.log(1e-12))
        assert not ops.clamped_log(Tensor([0.5]))[1]


class TestTape:
    def test_sum_gives_ones(self):
        p = Parameter(np.arange(6.0).reshape(2, 3))
        tape = Tape()
        with tape:
            loss = ops.sum(p)
        backward(tape, loss)
        np.testing.assert_array_equal(p.grad, np.ones((2, 3)))

    def test_unused_parameter_untouched(self):
        p, q = Parameter([1.0, 2.0]), Parameter([3.0])
        tape = Tape()
        with tape:
            loss = ops.sum(ops.square(p))
        tape.backward(loss)
        np.testing.assert_array_equal(q.grad, [0.0])

    def test_record_consumed_once(self):
        p = Parameter([1.0])
        tape = Tape()
        with tape:
            loss = ops.sum(p)
        tape.backward(loss)
        with pytest.raises(RecordError):
            tape.backward(loss)
        with pytest.raises(RecordError):
            with tape:
                pass

    def test_loss_must_be_scalar_from_this_record(self):
        p = Parameter([1.0, 2.0])
        tape = Tape()
        with tape:
            y = ops.square(p)
        with pytest.raises(ShapeError):
            tape.backward(y)
        other = Tape()
        with other:
            z = ops.sum(p)
        with pytest.raises(RecordError):
            tape.backward(z)

    def test_no_record_skips_recording(self):
        p = Parameter([1.0])
        tape = Tape()
        with tape:
            with no_record():
                ops.square(p)
        assert len(tape) == 0

    def test_gradients_accumulate_over_fanout(self, f64):
        p = Parameter([2.0])
        tape = Tape()
        with tape:
            loss = ops.sum(ops.add(ops.mul(p, p), p))
        tape.backward(loss)
        assert p.grad[0] == pytest.approx(5.0)

    def test_chain_matches_finite_differences(self, f64, rng):
        W = Parameter(rng.standard_normal((3, 4)))
        x, y = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(3))
        assert grad_check(lambda: ops.sum(ops.square(ops.sub(ops.linear_map(x, W), y))), [W]) < 1e-6


class TestTensorContract:
    def test_default_dtype_and_precision(self):
        assert Tensor([1.0]).dtype == np.float32
        with precision(np.float64):
            assert default_dtype() == np.float64
            assert Parameter([1.0]).dtype == np.float64
        assert default_dtype() == np.float32

    def test_immutable_data(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_rejects_bad_values(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))
        with pytest.raises(TypeError):
            Tensor(np.array([1, 2]), dtype=np.int64)

    def test_no_broadcasting(self):
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_mixed_dtypes_rejected(self):
        with pytest.raises(TypeError):
            ops.add(Tensor([1.0], np.float32), Tensor([1.0], np.float64))

    def test_non_finite_result_raises(self):
        with pytest.raises(NonFiniteError):
            ops.exp(Tensor([1000.0]))

    def test_log_domain(self):
        with pytest.raises(ValueError):
            ops.log(Tensor([0.0, 1.0]))

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
    def test_softmax_normalized(self, xs):
        p = ops.softmax(Tensor(xs, dtype=np.float64)).numpy()
        assert abs(p.sum() - 1.0) < 1e-12 and (p >= 0).all()

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
    def test_transpose_roundtrip(self, a, b, c):
        x = Tensor(np.arange(a * b * c, dtype=float).reshape(a, b, c))
        y = ops.transpose(ops.transpose(x, (2, 0, 1)), (1, 2, 0))
        np.testing.assert_array_equal(x.numpy(), y.numpy())
