import math

import numpy as np
import pytest

from nreg import tensor as T
from nreg.errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    VocabularyError,
)
from nreg.optim import AdadeltaState, adadelta_step, clip_global_norm

from gradcheck import finite_diff, max_rel_error

F64 = np.float64


def t64(values):
    return T.Tensor(values, dtype=F64)


class TestMatmul:
    def test_identity(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        eye = t64(np.eye(2))
        np.testing.assert_array_equal(T.matmul(a, eye).values, a.values)

    def test_zero(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        z = t64(np.zeros((2, 2)))
        np.testing.assert_array_equal(T.matmul(a, z).values, np.zeros((2, 2)))

    def test_hand_dot(self):
        a = t64([[1.0, 2.0]])
        b = t64([[3.0], [4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).values, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 2))))


class TestElementwise:
    def test_tanh_zero(self):
        np.testing.assert_array_equal(T.tanh(t64(np.zeros(4))).values, np.zeros(4))

    def test_sigmoid_zero(self):
        np.testing.assert_array_equal(T.sigmoid(t64(np.zeros(3))).values,
                                      np.full(3, 0.5))

    def test_add_hand(self):
        out = T.add(t64([1.0, 2.0]), t64([3.0, 4.0]))
        np.testing.assert_array_equal(out.values, [4.0, 6.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(t64([1.0]), t64([1.0, 2.0]))


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(T.softmax(t64([0.0, 0.0])).values, [0.5, 0.5])

    def test_single_element(self):
        for c in (-3.0, 0.0, 100.0):
            np.testing.assert_allclose(T.softmax(t64([c])).values, [1.0])

    def test_direct_evaluation(self):
        # oracle: direct high-precision evaluation of exp(x)/sum(exp)
        xs = [1.0, 2.0, 3.0]
        denom = sum(math.exp(x) for x in xs)
        expected = [math.exp(x) / denom for x in xs]
        got = T.softmax(t64(xs)).values
        np.testing.assert_allclose(got, expected, rtol=1e-12)
        np.testing.assert_allclose(got, [0.0900, 0.2447, 0.6652], atol=5e-5)

    def test_sum_and_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.normal(size=rng.integers(1, 9)) * 10
            y = T.softmax(t64(x)).values
            assert abs(y.sum() - 1.0) < 1e-6
            assert (y >= 0).all()
            perm = rng.permutation(len(x))
            y_perm = T.softmax(t64(x[perm])).values
            np.testing.assert_allclose(y[perm], y_perm, rtol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            T.softmax(t64(np.zeros(0)))

    def test_stable_at_large_magnitude(self):
        y = T.softmax(t64([1000.0, -1000.0, 0.0])).values
        assert np.isfinite(y).all()


class TestConcat:
    def test_identity(self):
        x = t64([1.0, 2.0])
        np.testing.assert_array_equal(T.concat([x]).values, x.values)

    def test_hand_layout(self):
        out = T.concat([t64([1.0]), t64([2.0])])
        np.testing.assert_array_equal(out.values, [1.0, 2.0])

    def test_bidirectional_width(self):
        fwd, bwd = t64(np.zeros(512)), t64(np.ones(512))
        assert T.concat([fwd, bwd]).values.shape == (1024,)

    def test_mismatched_dims(self):
        with pytest.raises(DimensionError):
            T.concat([t64(np.zeros((2, 3))), t64(np.zeros((2, 4)))], axis=0)


class TestEmbedding:
    def test_determinism(self):
        table = t64(np.arange(12.0).reshape(4, 3))
        a = T.embedding_lookup(table, 2).values
        b = T.embedding_lookup(table, 2).values
        np.testing.assert_array_equal(a, b)

    def test_gradient_hits_one_row(self):
        table = t64(np.arange(12.0).reshape(4, 3))
        with T.Tape() as tape:
            loss = T.tensor_sum(T.embedding_lookup(table, 1))
            tape.backward(loss)
        expected = np.zeros((4, 3))
        expected[1] = 1.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_configured_width(self):
        table = t64(np.zeros((7, 300)))
        assert T.embedding_lookup(table, 0).values.shape == (300,)

    def test_out_of_range(self):
        with pytest.raises(VocabularyError):
            T.embedding_lookup(t64(np.zeros((4, 3))), 4)


class TestDropout:
    def test_p_zero_identity(self):
        x = t64([1.0, 2.0])
        assert T.dropout(x, 0.0, True, T.RngState(1)) is x

    def test_eval_identity(self):
        x = t64([1.0, 2.0])
        assert T.dropout(x, 0.5, False, T.RngState(1)) is x

    def test_mask_reproducible(self):
        x = t64(np.ones(64))
        a = T.dropout(x, 0.5, True, T.RngState(9)).values
        b = T.dropout(x, 0.5, True, T.RngState(9)).values
        np.testing.assert_array_equal(a, b)

    def test_p_one_rejected(self):
        with pytest.raises(ConfigurationError):
            T.dropout(t64([1.0]), 1.0, True, T.RngState(0))


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.arange(6.0).reshape(2, 3))
        with T.Tape() as tape:
            tape.backward(T.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_square_gives_2x(self):
        x = t64([1.0, -2.0, 3.0])
        with T.Tape() as tape:
            tape.backward(T.tensor_sum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, 2 * x.values)

    def test_non_scalar_loss_rejected(self):
        x = t64([1.0, 2.0])
        with T.Tape() as tape:
            y = T.add(x, x)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_unreachable_grads_stay_zero(self):
        x = t64([1.0, 2.0])
        unused = t64([5.0])
        with T.Tape() as tape:
            T.scale(unused, 2.0)  # on tape but not part of the loss
            tape.backward(T.tensor_sum(x))
        assert unused.grad is None or not unused.grad.any()

    def test_tape_is_topological(self):
        x = t64([1.0, 2.0])
        with T.Tape() as tape:
            y = T.tanh(x)
            z = T.mul(y, y)
            T.tensor_sum(z)
        for node in tape.nodes:
            for parent in node.parents:
                assert parent.node_id is None or parent.node_id < node.out.node_id


class TestGlorot:
    def test_bound_formula(self):
        rng = T.RngState(3)
        t = T.glorot_init(300, 300, rng)
        bound = math.sqrt(6.0 / 600.0)
        assert abs(bound - 0.1) < 1e-12
        assert np.abs(t.values).max() <= bound

    def test_same_seed_same_matrix(self):
        a = T.glorot_init(4, 5, T.RngState(11)).values
        b = T.glorot_init(4, 5, T.RngState(11)).values
        np.testing.assert_array_equal(a, b)

    def test_bad_dims(self):
        with pytest.raises(DimensionError):
            T.glorot_init(0, 3, T.RngState(0))


class TestAdadelta:
    def _params(self, values):
        return {"w": T.Tensor(np.array(values, dtype=F64), dtype=F64)}

    def test_zero_gradient_leaves_params(self):
        params = self._params([1.0, -2.0])
        state = AdadeltaState(params)
        adadelta_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"].values, [1.0, -2.0])

    def test_first_step_hand_trace(self):
        # rho=0.95 eps=1e-6 g=1: dx = -sqrt(1e-6)/sqrt(0.05+1e-6)
        params = self._params([0.0])
        state = AdadeltaState(params, rho=0.95, eps=1e-6)
        adadelta_step(params, {"w": np.ones(1)}, state)
        expected = -math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6)
        assert abs(expected - (-0.004472)) < 1e-6
        np.testing.assert_allclose(params["w"].values, [expected], rtol=1e-6)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            params = self._params([[0.5, -0.5], [1.0, 0.0]])
            state = AdadeltaState(params)
            g = np.array([[1.0, -2.0], [0.5, 3.0]])
            for _ in range(3):
                adadelta_step(params, {"w": g}, state)
            runs.append(params["w"].values.copy())
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_accumulators_stay_nonnegative(self):
        params = self._params(np.linspace(-1, 1, 8))
        state = AdadeltaState(params)
        rng = np.random.default_rng(0)
        for _ in range(20):
            adadelta_step(params, {"w": rng.normal(size=8)}, state)
        assert (state.eg2["w"] >= 0).all() and (state.edx2["w"] >= 0).all()

    def test_shape_mismatch(self):
        params = self._params([1.0, 2.0])
        state = AdadeltaState(params)
        with pytest.raises(DimensionError):
            adadelta_step(params, {"w": np.zeros(3)}, state)


class TestClipGlobalNorm:
    def test_noop_below_threshold(self):
        grads = {"a": np.array([3.0, 4.0])}
        norm = clip_global_norm(grads, 10.0)
        assert norm == 5.0
        np.testing.assert_array_equal(grads["a"], [3.0, 4.0])

    def test_scales_above_threshold(self):
        grads = {"a": np.array([3.0, 4.0])}
        clip_global_norm(grads, 1.0)
        np.testing.assert_allclose(np.sqrt((grads["a"] ** 2).sum()), 1.0)


class TestOpGradients:
    """Analytic vs central finite differences on random small tensors."""

    def check(self, fn, tensors, eps=1e-5, tol=1e-4):
        for x in tensors:
            x.zero_grad()
        with T.Tape() as tape:
            tape.backward(fn())
        analytic = [x.grad_or_zeros().copy() for x in tensors]
        numeric = finite_diff(lambda: float(fn().values), tensors, eps=eps)
        assert max_rel_error(analytic, numeric) < tol

    def rand(self, rng, *shape):
        return T.Tensor(rng.normal(size=shape), dtype=F64)

    def test_matmul_2d_2d(self):
        rng = np.random.default_rng(1)
        a, b, w = self.rand(rng, 4, 3), self.rand(rng, 3, 5), self.rand(rng, 4, 5)
        self.check(lambda: T.tensor_sum(T.mul(T.matmul(a, b), w)), [a, b])

    def test_matmul_2d_1d(self):
        rng = np.random.default_rng(2)
        a, v, w = self.rand(rng, 4, 3), self.rand(rng, 3), self.rand(rng, 4)
        self.check(lambda: T.tensor_sum(T.mul(T.matmul(a, v), w)), [a, v])

    def test_matmul_1d_2d(self):
        rng = np.random.default_rng(3)
        v, b, w = self.rand(rng, 4), self.rand(rng, 4, 3), self.rand(rng, 3)
        self.check(lambda: T.tensor_sum(T.mul(T.matmul(v, b), w)), [v, b])

    def test_matmul_dot(self):
        rng = np.random.default_rng(4)
        u, v = self.rand(rng, 6), self.rand(rng, 6)
        self.check(lambda: T.matmul(u, v), [u, v])

    def test_transpose(self):
        rng = np.random.default_rng(5)
        a, w = self.rand(rng, 3, 4), self.rand(rng, 4, 3)
        self.check(lambda: T.tensor_sum(T.mul(T.transpose(a), w)), [a])

    def test_add_sub_mul(self):
        rng = np.random.default_rng(6)
        a, b, w = self.rand(rng, 5), self.rand(rng, 5), self.rand(rng, 5)
        self.check(lambda: T.tensor_sum(T.mul(T.add(a, b), w)), [a, b])
        self.check(lambda: T.tensor_sum(T.mul(T.sub(a, b), w)), [a, b])
        self.check(lambda: T.tensor_sum(T.mul(T.mul(a, b), w)), [a, b])

    def test_bias_add(self):
        rng = np.random.default_rng(7)
        m, v, w = self.rand(rng, 4, 3), self.rand(rng, 3), self.rand(rng, 4, 3)
        self.check(lambda: T.tensor_sum(T.mul(T.bias_add(m, v), w)), [m, v])

    def test_scale(self):
        rng = np.random.default_rng(8)
        a = self.rand(rng, 5)
        self.check(lambda: T.tensor_sum(T.scale(a, -2.5)), [a])

    def test_tanh_sigmoid(self):
        rng = np.random.default_rng(9)
        a, w = self.rand(rng, 6), self.rand(rng, 6)
        self.check(lambda: T.tensor_sum(T.mul(T.tanh(a), w)), [a])
        self.check(lambda: T.tensor_sum(T.mul(T.sigmoid(a), w)), [a])

    def test_softmax(self):
        rng = np.random.default_rng(10)
        a, w = self.rand(rng, 7), self.rand(rng, 7)
        self.check(lambda: T.tensor_sum(T.mul(T.softmax(a), w)), [a])

    def test_concat_and_slice(self):
        rng = np.random.default_rng(11)
        a, b, w = self.rand(rng, 3), self.rand(rng, 4), self.rand(rng, 5)

        def fn():
            joined = T.concat([a, b])
            return T.tensor_sum(T.mul(T.slice1d(joined, 1, 6), w))

        self.check(fn, [a, b])

    def test_stack_rows(self):
        rng = np.random.default_rng(12)
        rows = [self.rand(rng, 4) for _ in range(3)]
        w = self.rand(rng, 3, 4)
        self.check(lambda: T.tensor_sum(T.mul(T.stack_rows(rows), w)), rows)

    def test_embedding_lookup(self):
        rng = np.random.default_rng(13)
        table, w = self.rand(rng, 5, 4), self.rand(rng, 4)
        self.check(
            lambda: T.tensor_sum(T.mul(T.embedding_lookup(table, 2), w)), [table])

    def test_dropout(self):
        rng = np.random.default_rng(14)
        a = self.rand(rng, 8)
        base = T.RngState(21)
        self.check(
            lambda: T.tensor_sum(T.dropout(a, 0.5, True, base.clone())), [a])

    def test_lstm_gates(self):
        rng = np.random.default_rng(15)
        z, c_prev = self.rand(rng, 8), self.rand(rng, 2)
        w = self.rand(rng, 4)
        self.check(
            lambda: T.tensor_sum(T.mul(T.lstm_gates(z, c_prev), w)), [z, c_prev])

    def test_nll_logits(self):
        rng = np.random.default_rng(16)
        logits = self.rand(rng, 6)
        self.check(lambda: T.nll_logits(logits, 2), [logits])


class TestStability:
    def test_ops_finite_on_bounded_inputs(self):
        rng = np.random.default_rng(17)
        x = T.Tensor(rng.uniform(-1e3, 1e3, 16), dtype=F64)
        c_prev = T.Tensor(rng.uniform(-1e3, 1e3, 4), dtype=F64)
        outputs = [
            T.tanh(x), T.sigmoid(x), T.softmax(x),
            T.lstm_gates(x, c_prev),
            T.nll_logits(x, 3),
        ]
        for out in outputs:
            assert np.isfinite(out.values).all()


class TestRngState:
    def test_replay_is_bit_reproducible(self):
        def run(rng):
            x = T.Tensor(np.linspace(-1, 1, 12), dtype=F64)
            with T.Tape() as tape:
                h = T.dropout(T.tanh(x), 0.3, True, rng)
                loss = T.tensor_sum(T.mul(h, h))
                tape.backward(loss)
            return loss.values.copy(), x.grad.copy()

        loss_a, grad_a = run(T.RngState(5))
        loss_b, grad_b = run(T.RngState(5))
        assert loss_a == loss_b
        np.testing.assert_array_equal(grad_a, grad_b)

    def test_counter_restores_state(self):
        rng = T.RngState(7)
        rng.random(4)
        snapshot = rng.clone()
        a = rng.random(8)
        b = snapshot.random(8)
        np.testing.assert_array_equal(a, b)
