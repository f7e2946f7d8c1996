import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdt import numkernel as nk
from vdt.errors import ContractError, NonFiniteError


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    out = nk.matmul(nk.tensor(a), nk.tensor(b)).data
    np.testing.assert_allclose(out, naive_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_small_example():
    out = nk.tensor([[1.0, 2.0], [3.0, 4.0]]) @ nk.tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_batched_matmul_against_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3, 5, 2))
    out = nk.matmul(nk.tensor(a), nk.tensor(b)).data
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(out[i, j], naive_matmul(a[i, j], b[i, j]), atol=1e-12)


def test_softmax_rows_known_values():
    out = nk.softmax_rows(nk.tensor([[0.0, 0.0], [0.0, np.log(3.0)]])).data
    np.testing.assert_allclose(out, [[0.5, 0.5], [0.25, 0.75]], atol=1e-15)


def test_softmax_is_shift_invariant_and_stable():
    x = np.array([[1000.0, 1001.0, 1002.0]])
    out = nk.softmax_rows(nk.tensor(x)).data
    ref = nk.softmax_rows(nk.tensor(x - 1000.0)).data
    np.testing.assert_allclose(out, ref, atol=1e-15)


def test_layer_norm_formula():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 6))
    gain, bias = rng.standard_normal(6), rng.standard_normal(6)
    out = nk.layer_norm(nk.tensor(x), nk.tensor(gain), nk.tensor(bias), eps=1e-6).data
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    np.testing.assert_allclose(out, (x - mu) / np.sqrt(var + 1e-6) * gain + bias, atol=1e-12)


def test_layer_norm_unit_row():
    out = nk.layer_norm(nk.tensor([[1.0, -1.0]]), nk.tensor([1.0, 1.0]), nk.tensor([0.0, 0.0]),
                        eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-11)


def test_backward_of_product_and_sum():
    x = nk.tensor([1.0, 2.0, 3.0], requires_grad=True)
    y = nk.tensor([4.0, 5.0, 6.0], requires_grad=True)
    grads = nk.backward((x * y).sum())
    np.testing.assert_array_equal(grads[x], [4.0, 5.0, 6.0])
    np.testing.assert_array_equal(grads[y], [1.0, 2.0, 3.0])


def test_backward_accumulates_reused_node():
    x = nk.tensor(3.0, requires_grad=True)
    grads = nk.backward(x * x + x)
    assert grads[x] == pytest.approx(7.0)


def test_backward_is_idempotent():
    x = nk.tensor([0.5, -1.5], requires_grad=True)
    loss = nk.exp(x).sum()
    g1 = nk.backward(loss)[x].copy()
    g2 = nk.backward(loss)[x]
    np.testing.assert_array_equal(g1, g2)


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        nk.backward(nk.tensor([1.0, 2.0], requires_grad=True) * 2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_result_is_reported():
    with pytest.raises(NonFiniteError):
        nk.log(nk.tensor([-1.0]))


def test_no_grad_records_nothing():
    x = nk.tensor([1.0], requires_grad=True)
    with nk.no_grad():
        y = x * 2.0
    assert y.op == "leaf" or not y._parents


def test_default_dtype_context():
    with nk.default_dtype(np.float32):
        assert nk.tensor([1.0]).dtype == np.float32
    assert nk.tensor([1.0]).dtype == np.float64


def _composite(rng):
    w = nk.tensor(rng.standard_normal((4, 3)), requires_grad=True)
    g = nk.tensor(1 + 0.1 * rng.standard_normal(3), requires_grad=True)
    b = nk.tensor(0.1 * rng.standard_normal(3), requires_grad=True)
    x = nk.tensor(rng.standard_normal((5, 4)))

    def f():
        h = nk.gelu(nk.layer_norm(x @ w, g, b))
        p = nk.softmax_rows(h)
        return (nk.log_softmax_rows(h) * p).sum() + nk.softplus(h).mean() + nk.sqrt(h * h + 1.0).sum()

    return f, [w, g, b]


def test_grad_check_on_composite_graph():
    f, params = _composite(np.random.default_rng(3))
    assert nk.grad_check(f, params) < 1e-6


def test_grad_check_detects_wrong_gradient():
    x = nk.tensor([0.3, -0.7], requires_grad=True)

    def f():
        # stop the tape halfway: the analytic gradient misses the detached factor
        return (x * x.detach() * x).sum()

    assert nk.grad_check(f, [x]) > 0.1


@pytest.mark.parametrize("op", [nk.exp, nk.gelu, nk.softplus, nk.square,
                                lambda t: nk.minimum(nk.abs_(t), 0.8),
                                lambda t: nk.maximum(t, 0.4)])
def test_unary_gradients(op):
    x = nk.tensor([0.3, -1.2, 0.55, 2.0], requires_grad=True)
    assert nk.grad_check(lambda: op(x).sum(), [x]) < 1e-6


def test_getitem_and_concat_gradients():
    rng = np.random.default_rng(4)
    x = nk.tensor(rng.standard_normal((3, 4)), requires_grad=True)
    y = nk.tensor(rng.standard_normal((2, 4)), requires_grad=True)

    def f():
        z = nk.concat([x[1:], y, x[np.array([0, 0])]], axis=0)
        return (z * z).sum() + z.transpose(1, 0).reshape(-1)[3]

    assert nk.grad_check(f, [x, y]) < 1e-6


def test_broadcast_gradient_is_reduced():
    x = nk.tensor(np.ones((3, 2)), requires_grad=True)
    b = nk.tensor([1.0, 2.0], requires_grad=True)
    grads = nk.backward(((x + b) * 2.0).sum())
    np.testing.assert_array_equal(grads[b], [6.0, 6.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_softmax_rows_sum_to_one(values):
    out = nk.softmax_rows(nk.tensor([values])).data
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert (out >= 0).all()
