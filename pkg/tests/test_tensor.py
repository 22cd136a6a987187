import gc
import math

import numpy as np
import pytest

from histoprism import tensor as T
from histoprism.tensor import Tape, Var


def rng(seed=0):
    return np.random.default_rng(seed)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f(x)
        x[i] = orig - h
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def grad_of(op, *arrays):
    """Tape gradients of mean(op(...) @ W^T) for a fixed random W, plus the
    same scalar as a plain function of each input."""
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = op(*leaves)
    w = rng(99).normal(size=out.shape)
    loss = T.mean(T.matmul(out, T.transpose(Var(w))))
    grads = tape.backward(loss)

    def scalar(i):
        def f(x):
            args = [Var(a) for a in arrays]
            args[i] = Var(x)
            o = op(*args).value
            return float(np.mean(o @ w.T))
        return f

    return [grads[l.index] for l in leaves], scalar


OPS = {
    "matmul": (T.matmul, [(3, 4), (4, 2)]),
    "add": (T.add, [(3, 4), (3, 4)]),
    "add_broadcast": (T.add, [(3, 4), (1, 4)]),
    "sub": (T.sub, [(3, 2), (3, 2)]),
    "scale": (lambda a: T.scale(a, -1.7), [(2, 3)]),
    "transpose": (T.transpose, [(2, 5)]),
    "slice": (lambda a: T.slice_(a, slice(1, 3), slice(0, 2)), [(4, 3)]),
    "square": (T.square, [(3, 3)]),
    "softmax": (T.softmax_rows, [(3, 5)]),
    "gelu": (T.gelu, [(4, 3)]),
    "layer_norm": (T.layer_norm, [(4, 6), (1, 6), (1, 6)]),
    "mean": (T.mean, [(3, 4)]),
}


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_matches_finite_differences(self, name):
        op, shapes = OPS[name]
        arrays = [rng(i).normal(size=s) for i, s in enumerate(shapes)]
        grads, scalar = grad_of(op, *arrays)
        for i, a in enumerate(arrays):
            want = numeric_grad(scalar(i), a.copy())
            np.testing.assert_allclose(grads[i], want, rtol=1e-6, atol=1e-8)


class TestForwardValues:
    def test_softmax_rows_sum_to_one_and_stable(self):
        x = np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]])
        s = T.softmax_rows(x).value
        np.testing.assert_allclose(s.sum(axis=1), 1.0)
        np.testing.assert_allclose(s[0], [0.5, 0.5, 0.0])

    def test_gelu_tanh_form(self):
        x = np.linspace(-3, 3, 7)
        want = [0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3))) for v in x]
        np.testing.assert_allclose(T.gelu(x).value[0], want, rtol=1e-14)

    def test_layer_norm_moments(self):
        x = rng(1).normal(3.0, 2.0, size=(5, 16))
        y = T.layer_norm(x, np.ones((1, 16)), np.zeros((1, 16))).value
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), x.var(axis=1) / (x.var(axis=1) + 1e-5), rtol=1e-12)


class TestTape:
    def test_shared_input_accumulates(self):
        tape = Tape()
        x = tape.leaf([[2.0, 3.0]])
        y = T.mean(T.add(T.square(x), x))
        np.testing.assert_allclose(tape.gradient(y, {"x": x})["x"], [[2.5, 3.5]])

    def test_unreached_leaf_has_zero_gradient(self):
        tape = Tape()
        x, z = tape.leaf([[1.0]]), tape.leaf([[5.0, 6.0]])
        g = tape.gradient(T.square(x), {"x": x, "z": z})
        np.testing.assert_array_equal(g["z"], [[0.0, 0.0]])

    def test_backward_needs_scalar(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(T.ShapeError):
            tape.backward(T.square(x))

    def test_mixing_tapes_rejected(self):
        a, b = Tape().leaf([[1.0]]), Tape().leaf([[1.0]])
        with pytest.raises(ValueError):
            T.add(a, b)

    def test_constants_are_not_recorded(self):
        out = T.matmul(np.ones((2, 2)), np.ones((2, 2)))
        assert out.tape is None

    def test_shape_errors(self):
        with pytest.raises(T.ShapeError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(T.ShapeError):
            T.add(np.ones((2, 3)), np.ones((3, 3)))
        with pytest.raises(T.ShapeError):
            Var(np.ones((2, 2, 2)))


class TestInstrumentation:
    def test_mac_count(self):
        with T.count_macs() as c:
            T.matmul(np.ones((3, 4)), np.ones((4, 5)))
            T.matmul(np.ones((1, 2)), np.ones((2, 7)))
        assert (c.macs, c.calls) == (3 * 4 * 5 + 14, 2)

    def test_nested_counters(self):
        with T.count_macs() as outer:
            with T.count_macs() as inner:
                T.matmul(np.ones((2, 2)), np.ones((2, 2)))
            T.matmul(np.ones((2, 2)), np.ones((2, 2)))
        assert inner.macs == 8 and outer.macs == 16

    def test_allocation_peak_and_release(self):
        with T.track_allocations() as tr:
            a = T.add(np.ones((10, 10)), np.ones((10, 10)))
            b = T.add(a, a)
            del a, b
            gc.collect()
            T.add(np.ones((10, 10)), np.ones((10, 10)))
        assert tr.peak == 2 * 800
        assert tr.total == 3 * 800


class TestGradCheck:
    def test_detects_wrong_gradient(self):
        def bad_square(a):
            a = T.as_var(a)
            return T._emit(a.value ** 2, (a,), lambda g: (g * a.value,))  # missing factor 2

        rep = T.check_gradients(lambda p: T.mean(bad_square(p["x"])), {"x": rng(2).normal(size=(2, 3))})
        assert not rep.passed(1e-4)

    def test_passes_on_correct_graph(self):
        params = {"w": rng(3).normal(size=(4, 3)), "b": rng(4).normal(size=(1, 3))}
        x = rng(5).normal(size=(6, 4))
        rep = T.check_gradients(lambda p: T.mean(T.gelu(T.add(T.matmul(x, p["w"]), p["b"]))), params, probes=5)
        assert rep.passed(1e-6)
        assert rep.probes == {"w": 5, "b": 3}

    def test_step_range(self):
        with pytest.raises(ValueError):
            T.check_gradients(lambda p: p["x"], {"x": np.ones((1, 1))}, step=1e-2)

    def test_relative_error_floor(self):
        assert T.relative_error(0.0, 1e-9) == pytest.approx(1e-3)
        assert T.relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
