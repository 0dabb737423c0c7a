import numpy as np
import pytest

from services import tensor_engine as te
from services.errors import AllMaskedRow, DomainError, NumericError, ShapeError

SEEDS = range(20)
TOL = 1e-4


def check_gradient(build, arrays):
    """Tape gradients against central differences of the same scalar function."""
    def scalar(*values):
        return build(*[te.constant(v) for v in values]).item()

    analytic = te.analytic_gradient(build, arrays)
    numeric = te.numeric_gradient(scalar, [np.array(a, dtype=np.float64) for a in arrays])
    for a, n in zip(analytic, numeric):
        assert te.relative_error(a, n) < TOL


class TestElementwiseGradients:

    @pytest.mark.parametrize("seed", SEEDS)
    def test_arithmetic_chain(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(4,))
        check_gradient(lambda x, y: te.sum_((x * y - x / y + 2.0 - y) * x), [a, b])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_exp_log_power(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.2, 2.0, size=(5,))
        check_gradient(lambda x: te.sum_(te.exp(x) * te.log(x) + te.power(x, 2.5)), [a])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gelu(self, seed):
        a = np.random.default_rng(seed).normal(size=(6,))
        check_gradient(lambda x: te.sum_(te.gelu(x) * x), [a])

    def test_relu_away_from_kink(self):
        a = np.array([-1.5, -0.3, 0.4, 2.0])
        check_gradient(lambda x: te.sum_(te.relu(x) * x), [a])

    def test_clip_min_blocks_gradient_below_floor(self):
        tape = te.Tape()
        x = tape.leaf(np.array([1e-20, 0.5]))
        tape.backward(te.sum_(te.clip_min(x, 1e-12)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_power_zero_is_constant_one(self):
        out = te.power(te.constant([0.0, 3.0]), 0)
        np.testing.assert_array_equal(out.data, [1.0, 1.0])


class TestShapeGradients:

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batched_matmul(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 5))
        check_gradient(lambda x, y: te.sum_(te.matmul(x, y) * te.matmul(x, y)), [a, b])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_reshape_transpose_concat(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(2, 6))
        b = rng.normal(size=(2, 3, 2))

        def build(x, y):
            r = te.transpose(te.reshape(x, (2, 3, 2)), (0, 2, 1))
            c = te.concat([te.transpose(y, (0, 2, 1)), r], axis=2)
            return te.sum_(c * c * te.constant(np.arange(12.0).reshape(1, 2, 6)))

        check_gradient(build, [a, b])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_getitem_and_take_accumulate(self, seed):
        rng = np.random.default_rng(seed)
        table = rng.normal(size=(4, 3))
        idx = np.array([0, 2, 2, 3, 0])

        def build(t):
            picked = te.take(t, idx, axis=0)
            return te.sum_(picked * picked) + te.sum_(t[np.array([1, 1]), np.array([0, 2])])

        check_gradient(build, [table])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mean_over_axis(self, seed):
        a = np.random.default_rng(seed).normal(size=(3, 4, 2))
        check_gradient(lambda x: te.sum_(te.mean(x, axis=1) * te.mean(x, axis=1)), [a])

    def test_matmul_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            te.matmul(te.constant(np.ones((2, 3))), te.constant(np.ones((4, 2))))

    def test_square_at_three(self):
        tape = te.Tape()
        x = tape.leaf(np.array(3.0))
        tape.backward(x * x)
        assert x.grad == 6.0

    def test_matmul_sum_gradient_closed_form(self, rng):
        a_data, b_data = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
        tape = te.Tape()
        a, b = tape.leaf(a_data), tape.leaf(b_data)
        tape.backward(te.sum_(a @ b))
        np.testing.assert_allclose(a.grad, np.ones((2, 2)) @ b_data.T, rtol=1e-14)
        np.testing.assert_allclose(b.grad, a_data.T @ np.ones((2, 2)), rtol=1e-14)

    def test_second_sweep_is_bitwise_identical(self, rng):
        tape = te.Tape()
        x = tape.leaf(rng.normal(size=(4, 8)))
        g, b = tape.leaf(rng.normal(size=8)), tape.leaf(rng.normal(size=8))
        w = rng.normal(size=(8, 3))
        root = te.sum_(te.gelu(te.layer_norm(x, g, b) @ w) * te.softmax(te.layer_norm(x, g, b) @ w))
        tape.backward(root)
        first = [t.grad.copy() for t in (x, g, b)]
        tape.backward(root)
        for before, t in zip(first, (x, g, b)):
            np.testing.assert_array_equal(t.grad, before)

    def test_backward_needs_scalar_root(self):
        tape = te.Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ShapeError):
            tape.backward(x * 2.0)

    def test_mixing_tapes_is_rejected(self):
        a = te.Tape().leaf(np.ones(2))
        b = te.Tape().leaf(np.ones(2))
        with pytest.raises(NumericError):
            a + b


class TestSoftmaxMasked:

    def test_rows_sum_to_one_and_masked_are_zero(self, rng):
        logits = rng.normal(size=(5, 7))
        valid = rng.random((5, 7)) < 0.6
        valid[:, 0] = True
        out = te.softmax_masked(te.constant(logits), valid).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(out[~valid] == 0.0)

    def test_masked_logits_do_not_matter(self, rng):
        logits = rng.normal(size=(4, 6))
        valid = np.array([True, False, True, False, True, True])
        changed = logits.copy()
        changed[:, ~valid] = rng.normal(size=(4, (~valid).sum())) * 1e6
        a = te.softmax_masked(te.constant(logits), valid).data
        b = te.softmax_masked(te.constant(changed), valid).data
        np.testing.assert_array_equal(a, b)

    def test_two_logits_by_hand(self):
        out = te.softmax_masked(te.constant([1.0, 2.0]), [True, True]).data
        np.testing.assert_allclose(out, [0.26894, 0.73106], atol=1e-5)

    def test_uniform_and_single_valid(self):
        np.testing.assert_allclose(te.softmax(te.constant([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
        np.testing.assert_array_equal(te.softmax_masked(te.constant([5.0, 99.0]), [True, False]).data, [1.0, 0.0])

    @pytest.mark.parametrize("shift", [-50.0, 3.0, 1e3])
    def test_shift_invariant(self, rng, shift):
        logits = rng.normal(size=(3, 6))
        valid = rng.random((3, 6)) < 0.7
        valid[:, 0] = True
        a = te.softmax_masked(te.constant(logits), valid).data
        b = te.softmax_masked(te.constant(logits + shift), valid).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_large_logits_are_stable(self):
        out = te.softmax(te.constant([[1000.0, 1000.0, -1000.0]])).data
        np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]])

    def test_all_masked_row_raises(self):
        with pytest.raises(AllMaskedRow):
            te.softmax_masked(te.constant(np.zeros((2, 3))), np.array([[True, False, False], [False] * 3]))

    def test_all_masked_row_allowed_gives_zeros(self):
        out = te.softmax_masked(te.constant(np.ones((1, 3))), np.zeros((1, 3), bool), allow_all_masked=True)
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(3, 5))
        weights = rng.normal(size=(3, 5))
        valid = rng.random((3, 5)) < 0.7
        valid[:, 2] = True
        check_gradient(lambda x: te.sum_(te.softmax_masked(x, valid) * weights), [logits])


class TestLayerNorm:

    def test_normalises_last_axis(self, rng):
        x = rng.normal(3.0, 5.0, size=(4, 16))
        out = te.layer_norm(te.constant(x), np.ones(16), np.zeros(16), eps=0.0).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-10)

    def test_hand_values(self):
        out = te.layer_norm(te.constant([1.0, 2.0, 3.0]), np.ones(3), np.zeros(3), eps=0.0).data
        np.testing.assert_allclose(out, [-1.22474, 0.0, 1.22474], atol=1e-5)
        assert out[1] == 0.0

    def test_unit_row_passes_through(self):
        out = te.layer_norm(te.constant([1.0, -1.0]), np.ones(2), np.zeros(2), eps=0.0).data
        np.testing.assert_array_equal(out, [1.0, -1.0])

    def test_constant_row_collapses_to_bias(self):
        bias = np.array([0.5, -2.0, 7.0])
        out = te.layer_norm(te.constant([0.1, 0.1, 0.1]), np.ones(3), bias).data
        np.testing.assert_allclose(out, bias, rtol=0, atol=1e-12)

    def test_negative_eps_is_rejected(self):
        with pytest.raises(DomainError):
            te.layer_norm(te.constant(np.ones((1, 2))), np.ones(2), np.zeros(2), eps=-1.0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 6))
        g = rng.normal(size=(6,))
        b = rng.normal(size=(6,))
        w = rng.normal(size=(3, 6))
        check_gradient(lambda xx, gg, bb: te.sum_(te.layer_norm(xx, gg, bb) * w), [x, g, b])


class TestParameterStore:

    def test_bind_snapshot_restore(self):
        store = te.ParameterStore()
        store.add('w', np.arange(3.0))
        snap = store.snapshot()
        store['w'] = np.zeros(3)
        store.restore(snap)
        np.testing.assert_array_equal(store['w'], np.arange(3.0))

        tape = te.Tape()
        p = store.bind(tape)
        tape.backward(te.sum_(p['w'] * p['w']))
        np.testing.assert_array_equal(p['w'].grad, 2 * np.arange(3.0))

    def test_shape_and_name_guards(self):
        store = te.ParameterStore()
        store.add('w', np.zeros(2))
        with pytest.raises(ShapeError):
            store.add('w', np.zeros(2))
        with pytest.raises(ShapeError):
            store['w'] = np.zeros(3)

    def test_unused_leaves_get_zero_gradient(self):
        tape = te.Tape()
        used = tape.leaf(np.ones(2))
        unused = tape.leaf(np.ones(4))
        tape.backward(te.sum_(used))
        np.testing.assert_array_equal(unused.grad, np.zeros(4))

    def test_numpy_on_the_left_dispatches_to_tensor(self):
        tape = te.Tape()
        x = tape.leaf(np.ones(3))
        out = np.arange(3.0) * x
        assert isinstance(out, te.Tensor)
        tape.backward(te.sum_(out))
        np.testing.assert_array_equal(x.grad, np.arange(3.0))
