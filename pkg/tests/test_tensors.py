import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unigrounder import tensors as tt
from unigrounder.tensors import Tape, Tensor, finite_diff_check


def p64(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal((eye @ eye).data, np.eye(2))

    def test_hand_product(self):
        out = tt.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(tt.ShapeError):
            tt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_of_sum_is_b_transpose(self):
        rng = np.random.default_rng(0)
        a, b = p64(rng, 3, 4), p64(rng, 4, 2)
        with Tape() as tape:
            loss = tt.sum_(a @ b)
        (ga,) = tt.grad(loss, [a], tape)
        np.testing.assert_allclose(ga, np.broadcast_to(b.data.sum(axis=1), (3, 4)), rtol=1e-12)
        rep = finite_diff_check(lambda: tt.sum_(a @ b), [a, b], tol=1e-6)
        assert rep.passed, rep.errors


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tt.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3))

    def test_log_inputs(self):
        out = tt.softmax(Tensor(np.log([1.0, 2.0, 3.0]), dtype=np.float64))
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], rtol=1e-12)

    def test_normalized_64bit(self):
        x = Tensor(np.random.default_rng(1).standard_normal((5, 7)) * 10, dtype=np.float64)
        np.testing.assert_allclose(tt.softmax(x, axis=-1).data.sum(-1), 1.0, atol=1e-12)

    def test_mask_zeroes_and_full_mask_errors(self):
        x = Tensor(np.zeros((2, 3)))
        mask = np.array([[True, False, True], [True, True, True]])
        out = tt.softmax(x, axis=-1, mask=mask).data
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out[0], [0.5, 0, 0.5])
        with pytest.raises(tt.InvalidMaskError):
            tt.softmax(x, axis=-1, mask=np.zeros((2, 3), dtype=bool))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_positive_and_normalized_32bit(self, seed):
        x = Tensor(np.random.default_rng(seed).uniform(-30, 30, size=(4, 6)).astype(np.float32))
        out = tt.softmax(x, axis=-1).data
        assert out.dtype == np.float32
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_vector_gives_zeros(self):
        out = tt.layer_norm(Tensor(np.full(4, 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_two_values(self):
        out = tt.layer_norm(Tensor([1.0, 3.0], dtype=np.float64), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)

    def test_gain_shape_checked(self):
        with pytest.raises(tt.ShapeError):
            tt.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = p64(rng, 3, 5), p64(rng, 5), p64(rng, 5)
        w = rng.standard_normal((3, 5))
        rep = finite_diff_check(lambda: tt.sum_(tt.layer_norm(x, g, b) * w), [x, g, b])
        assert rep.passed, rep.errors


class TestAttention:
    def test_single_key(self):
        rng = np.random.default_rng(0)
        q = Tensor(rng.standard_normal((3, 8)))
        k = Tensor(rng.standard_normal((1, 8)))
        v = Tensor(rng.standard_normal((1, 8)))
        out, w = tt.attention(q, k, v, heads=2)
        np.testing.assert_allclose(out.data, np.repeat(v.data, 3, axis=0), rtol=1e-6)
        assert w.shape == (2, 3, 1)

    def test_identical_keys_uniform(self):
        rng = np.random.default_rng(1)
        q = Tensor(rng.standard_normal((4, 8)))
        k = Tensor(np.tile(rng.standard_normal((1, 8)), (5, 1)))
        _, w = tt.attention(q, k, k, heads=4)
        np.testing.assert_allclose(w.data, 0.2, rtol=1e-6)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((2, 6, 8)))
        _, w = tt.attention(x, x, x, heads=2)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)

    def test_masked_weight_zero(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((3, 4)))
        mask = np.array([True, True, False])[None, :].repeat(3, 0)
        _, w = tt.attention(x, x, x, heads=1, mask=mask)
        assert np.all(w.data[..., 2] == 0)

    def test_fully_masked_row_is_error(self):
        x = Tensor(np.ones((2, 4)))
        with pytest.raises(tt.InvalidMaskError):
            tt.attention(x, x, x, heads=1, mask=np.array([[True, True], [False, False]]))

    def test_heads_must_divide(self):
        x = Tensor(np.ones((2, 6)))
        with pytest.raises(tt.ShapeError):
            tt.attention(x, x, x, heads=4)


class TestGrad:
    def test_sum(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = tt.sum_(p)
        np.testing.assert_array_equal(tt.grad(loss, [p], tape)[0], [1.0, 1.0])

    def test_sum_of_squares(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = tt.sum_(p * p)
        np.testing.assert_array_equal(tt.grad(loss, [p], tape)[0], [2.0, 4.0])

    def test_fanout_accumulates(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            once = tt.sum_(p)
        g1 = tt.grad(once, [p], tape)[0]
        with Tape() as tape:
            twice = tt.sum_(p) + tt.sum_(p)
        g2 = tt.grad(twice, [p], tape)[0]
        np.testing.assert_array_equal(g2, 2 * g1)

    def test_unused_param_gets_zeros(self):
        p = Tensor(np.ones(2), requires_grad=True)
        q = Tensor(np.ones((3, 3)), requires_grad=True)
        with Tape() as tape:
            loss = tt.sum_(p)
        assert np.array_equal(tt.grad(loss, [p, q], tape)[1], np.zeros((3, 3)))

    def test_non_scalar_loss_rejected(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            out = p * 2.0
        with pytest.raises(tt.ContractError):
            tt.grad(out, [p], tape)


class TestFiniteDiffCheck:
    def test_linear_exact(self):
        rng = np.random.default_rng(0)
        p = p64(rng, 6)
        c = rng.standard_normal(6)
        rep = finite_diff_check(lambda: tt.sum_(p * c), [p])
        assert rep.max_error < 1e-9

    def test_corrupted_backward_fails(self):
        rng = np.random.default_rng(0)
        p = p64(rng, 4)
        with tt.corrupt("exp"):
            rep = finite_diff_check(lambda: tt.sum_(tt.exp(p)), [p])
        assert not rep.passed


UNARY = {
    "exp": lambda x: tt.exp(x),
    "log": lambda x: tt.log(tt.abs_(x) + 0.5),
    "sqrt": lambda x: tt.sqrt(tt.square(x) + 0.5),
    "relu": lambda x: tt.relu(x),
    "sigmoid": lambda x: tt.sigmoid(x),
    "clamp": lambda x: tt.clamp(x, -0.7, 0.7),
    "softmax": lambda x: tt.softmax(x, axis=-1),
    "log_softmax": lambda x: tt.log_softmax(x, axis=0),
    "mean": lambda x: tt.mean(x, axis=1, keepdims=True),
    "transpose": lambda x: tt.transpose(x),
    "getitem": lambda x: x[1:, ::2],
    "take": lambda x: tt.take(x, [0, 2, 2, 1], axis=1),
    "concat": lambda x: tt.concat([x, x * 2.0], axis=0),
    "stack": lambda x: tt.stack([x, tt.exp(x)], axis=1),
    "broadcast": lambda x: tt.broadcast_to(tt.reshape(x, (1, 3, 4)), (2, 3, 4)),
}

BINARY = {
    "add": lambda a, b: a + b[0],
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (tt.abs_(b) + 0.5),
    "maximum": lambda a, b: tt.maximum(a, b),
    "minimum": lambda a, b: tt.minimum(a, b),
    "matmul": lambda a, b: a @ tt.transpose(b),
    "attention": lambda a, b: tt.attention(a, b, b * 2.0, heads=2)[0],
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(10))
def test_unary_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    x = p64(rng, 3, 4)
    fn = UNARY[name]
    w = rng.standard_normal(fn(x).shape)
    rep = finite_diff_check(lambda: tt.sum_(fn(x) * w), [x], h=1e-5, tol=1e-5)
    assert rep.passed, rep.errors


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", range(10))
def test_binary_gradcheck(name, seed):
    rng = np.random.default_rng(seed)
    a, b = p64(rng, 3, 4), p64(rng, 3, 4)
    fn = BINARY[name]
    w = rng.standard_normal(fn(a, b).shape)
    rep = finite_diff_check(lambda: tt.sum_(fn(a, b) * w), [a, b], h=1e-5, tol=1e-5)
    assert rep.passed, rep.errors


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_no_nonfinite_within_magnitude(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1e3, 1e3, size=(3, 4)))
    for fn in (tt.sigmoid, lambda v: tt.softmax(v, -1), lambda v: tt.log_softmax(v, -1),
               lambda v: tt.layer_norm(v, Tensor(np.ones(4)), Tensor(np.zeros(4)))):
        assert np.all(np.isfinite(fn(x).data))


def test_nonfinite_raises():
    with np.errstate(invalid="ignore"), pytest.raises(tt.NonFiniteError):
        tt.log(Tensor(np.array([-1.0])))
