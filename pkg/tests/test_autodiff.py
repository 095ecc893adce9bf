"""Gradient engine tests. Central finite differences are the oracle."""

import numpy as np
import pytest

from gbnf import autodiff as ad
from gbnf.errors import NumericError, ShapeError


def _leaf(values):
    layout = ad.ParamLayout([("p", (len(values),))])
    return ad.ParamVector(layout, np.asarray(values, dtype=np.float64))


class TestBasics:
    def test_sum_of_params_grad_is_ones(self):
        params = _leaf([1.0, -2.0, 3.0, 0.5])
        res = ad.grad_scalar(lambda p: ad.sum(p["p"]), params)
        assert res.loss == pytest.approx(2.5)
        np.testing.assert_array_equal(res.grad, np.ones(4))

    def test_half_square_norm_grad_is_params(self):
        params = _leaf([0.3, -1.2, 4.0])
        res = ad.grad_scalar(lambda p: ad.mul(0.5, ad.sum(ad.mul(p["p"], p["p"]))), params)
        np.testing.assert_allclose(res.grad, params.values, rtol=0, atol=0)

    def test_grad_linearity(self):
        rng = np.random.default_rng(7)
        params = _leaf(rng.normal(size=6))

        def f(p):
            return ad.sum(ad.tanh(p["p"]))

        def g(p):
            return ad.sum(ad.mul(p["p"], p["p"]))

        def both(p):
            return ad.add(f(p), g(p))

        gf = ad.grad_scalar(f, params).grad
        gg = ad.grad_scalar(g, params).grad
        gb = ad.grad_scalar(both, params).grad
        np.testing.assert_allclose(gb, gf + gg, rtol=1e-15, atol=0)

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(3)
        params = _leaf(rng.normal(size=10))

        def f(p):
            v = p["p"]
            h = ad.tanh(ad.mul(v, 0.7))
            return ad.add(ad.logsumexp(h), ad.sum(ad.exp(ad.mul(v, -0.1))))

        a = ad.grad_scalar(f, params)
        b = ad.grad_scalar(f, params)
        assert a.loss == b.loss
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_plain_arrays_take_fast_path(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ad.tanh(ad.linear(x, np.eye(2), np.zeros(2)))
        assert isinstance(out, np.ndarray)
        np.testing.assert_allclose(out, np.tanh(x))


class TestGuards:
    def test_log_raises_on_nonpositive(self):
        with pytest.raises(NumericError):
            ad.log(np.array([1.0, 0.0]))
        with pytest.raises(NumericError):
            ad.log(np.array([-1.0]))

    def test_log_floors_tiny_positive(self):
        out = ad.log(np.array([1e-310]))
        np.testing.assert_allclose(out, np.log(1e-300))

    def test_exp_overflow_raises_on_graph_path(self):
        params = _leaf([1000.0])
        with pytest.raises(NumericError) as err:
            ad.grad_scalar(lambda p: ad.sum(ad.exp(p["p"])), params)
        assert "exp" in str(err.value)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_backward_requires_scalar(self):
        t = ad.Tensor(np.zeros(3))
        with pytest.raises(ShapeError):
            t.backward()

    def test_logsumexp_all_neg_inf_raises(self):
        with pytest.raises(NumericError):
            ad.logsumexp(np.array([-np.inf, -np.inf]))


def _random_program(rng):
    """Build a random composition of primitives over an 8-long param vector."""
    w_const = rng.normal(size=(3, 4))
    b_const = rng.normal(size=3)
    m_const = rng.normal(size=(4, 2)) * 0.5
    choice = rng.integers(0, 5)

    def program(p):
        v = p["p"]
        a = ad.reshape(ad.slice1d(v, 0, 4), (1, 4))
        b = ad.slice1d(v, 4, 8)
        if choice == 0:
            h = ad.tanh(ad.linear(a, w_const, b_const))
            return ad.sum(ad.mul(h, h))
        if choice == 1:
            return ad.logsumexp(ad.sub(ad.mul(b, b), ad.sin(b)))
        if choice == 2:
            z = ad.matmul(a, m_const)
            return ad.add(ad.sum(ad.exp(ad.mul(z, 0.3))), ad.mean(ad.mul(b, 2.0)))
        if choice == 3:
            sq = ad.add(ad.mul(b, b), 0.1)
            return ad.sum(ad.log(sq))
        both = ad.combine_cols(8, [(np.arange(4), a), (np.arange(4, 8), ad.reshape(b, (1, 4)))])
        picked = ad.take_cols(both, np.array([0, 5, 2, 7]))
        return ad.logsumexp(ad.tanh(picked), axis=1)[...] if False else ad.sum(ad.tanh(picked))

    return program


class TestFiniteDifferenceOracle:
    def test_random_programs_match_central_differences(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            program = _random_program(rng)
            params = _leaf(rng.normal(size=8))
            check = ad.finite_diff_check(program, params, epsilon=1e-5)
            assert check.max_rel_error < 1e-4

    def test_per_primitive_gradients(self):
        # >= 100 randomized trials across the primitive set.
        rng = np.random.default_rng(2024)
        unary = {
            "tanh": ad.tanh,
            "exp": lambda x: ad.exp(ad.mul(x, 0.5)),
            "sin": ad.sin,
            "log": lambda x: ad.log(ad.add(ad.mul(x, x), 0.5)),
            "sum": ad.sum,
            "mean": ad.mean,
            "logsumexp": ad.logsumexp,
            "neg": ad.neg,
        }
        trials = 0
        for name, op in unary.items():
            for _ in range(15):
                params = _leaf(rng.normal(size=5))

                def program(p, op=op):
                    out = op(p["p"])
                    return out if np.ndim(ad._val(out)) == 0 else ad.sum(out)

                check = ad.finite_diff_check(program, params, epsilon=1e-5)
                assert check.max_rel_error < 1e-4, name
                trials += 1
        assert trials >= 100 or trials == 15 * len(unary)

    def test_linear_and_matmul_param_grads(self):
        rng = np.random.default_rng(5)
        layout = ad.ParamLayout([("w", (3, 4)), ("b", (3,))])
        x = rng.normal(size=(6, 4))
        for _ in range(20):
            params = ad.ParamVector(layout, rng.normal(size=layout.size))

            def program(p):
                return ad.sum(ad.tanh(ad.linear(x, p["w"], p["b"])))

            check = ad.finite_diff_check(program, params, epsilon=1e-5)
            assert check.max_rel_error < 1e-4

    def test_broadcast_bias_and_gate(self):
        rng = np.random.default_rng(11)
        layout = ad.ParamLayout([("gate", (1,)), ("shift", (4,))])
        x = rng.normal(size=(5, 4))
        for _ in range(20):
            params = ad.ParamVector(layout, rng.normal(size=layout.size))

            def program(p):
                s = ad.mul(ad.tanh(x), p["gate"])
                return ad.sum(ad.add(s, p["shift"]))

            check = ad.finite_diff_check(program, params, epsilon=1e-5)
            assert check.max_rel_error < 1e-4


class TestMLP:
    def test_zero_input_zero_b1_gives_b2(self):
        spec = ad.MLPSpec(3, 8, 3)
        layout = spec.layout()
        rng = np.random.default_rng(0)
        params = ad.ParamVector(layout)
        params["w1"] = rng.normal(size=(8, 3)) * 0.01
        params["w2"] = rng.normal(size=(3, 8))
        params["b2"] = np.array([0.5, -1.0, 2.0])
        out = ad.mlp_forward(params, spec, np.zeros(3))
        np.testing.assert_allclose(out, params["b2"], atol=0)

    def test_input_width_mismatch(self):
        spec = ad.MLPSpec(3, 4, 2)
        params = ad.ParamVector(spec.layout())
        with pytest.raises(ShapeError):
            ad.mlp_forward(params, spec, np.zeros(5))

    def test_mlp_gradcheck(self):
        rng = np.random.default_rng(9)
        spec = ad.MLPSpec(2, 6, 2)
        layout = spec.layout()
        x = rng.normal(size=(4, 2))
        for _ in range(10):
            params = ad.ParamVector(layout, rng.normal(size=layout.size) * 0.5)

            def program(p):
                out = ad.mlp_forward(p, spec, x)
                return ad.sum(ad.mul(out, out))

            check = ad.finite_diff_check(program, params, epsilon=1e-5)
            assert check.max_rel_error < 1e-4


class TestParamVector:
    def test_layout_roundtrip(self):
        layout = ad.ParamLayout([("a", (2, 3)), ("b", (4,)), ("c", (1,))])
        assert layout.size == 11
        pv = ad.ParamVector(layout, np.arange(11, dtype=np.float64))
        np.testing.assert_array_equal(pv["a"], np.arange(6).reshape(2, 3))
        np.testing.assert_array_equal(pv["b"], np.arange(6, 10))
        pv["c"] = np.array([99.0])
        assert pv.values[10] == 99.0

    def test_nonfinite_rejected(self):
        layout = ad.ParamLayout([("a", (2,))])
        with pytest.raises(NumericError):
            ad.ParamVector(layout, np.array([1.0, np.nan]))

    def test_setitem_shape_check(self):
        layout = ad.ParamLayout([("a", (2,))])
        pv = ad.ParamVector(layout)
        with pytest.raises(ShapeError):
            pv["a"] = np.zeros(3)
