import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matmamba import autograd as ag
from matmamba.autograd import Tensor, parameter
from matmamba.errors import DimensionError, NumericError

from gradcheck import fd_check, rand


# --------------------------------------------------------------------- matmul

def test_matmul_identity():
    out = ag.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_forced_arithmetic():
    assert ag.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient():
    fd_check(ag.matmul, rand(3, 4), rand(4, 2, seed=1))


def test_matmul_gradient_rule_exact():
    a, b = parameter(rand(3, 4)), parameter(rand(4, 2, seed=1))
    g = rand(3, 2, seed=2)
    ag.matmul(a, b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-6)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ag.matmul(Tensor(rand(3, 4)), Tensor(rand(3, 2)))


def test_linear_gradient():
    fd_check(lambda x, w, b: ag.linear(x, w, b), rand(2, 3, 4), rand(5, 4, seed=1), rand(5, seed=2))


# ---------------------------------------------------------------- prefix slice

def test_prefix_slice_values():
    w = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert ag.prefix_slice(w, 0, 1).data.tolist() == [[1.0, 2.0]]
    np.testing.assert_array_equal(ag.prefix_slice(w, 0, 2).data, w.data)


def test_prefix_slice_is_a_view():
    w = Tensor(rand(4, 3))
    assert np.shares_memory(ag.prefix_slice(w, 0, 2).data, w.data)


def test_prefix_slice_gradient_forced():
    w = parameter([[1.0, 2.0], [3.0, 4.0]])
    ag.sum_(ag.prefix_slice(w, 0, 1)).backward()
    assert w.grad.tolist() == [[1.0, 1.0], [0.0, 0.0]]


@pytest.mark.parametrize("n", [0, 3, -1])
def test_prefix_slice_out_of_range(n):
    with pytest.raises(DimensionError):
        ag.prefix_slice(Tensor(rand(2, 2)), 0, n)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 1), st.data())
def test_prefix_slice_gradient_locality(r, c, axis, data):
    shape = (r, c)
    n = data.draw(st.integers(1, shape[axis]))
    w = parameter(rand(*shape))
    sentinel = rand(*shape, seed=3)
    w.grad = sentinel.copy()
    ag.sum_(ag.scale(ag.prefix_slice(w, axis, n), 2.0)).backward()
    idx = [slice(None)] * 2
    idx[axis] = slice(n, None)
    np.testing.assert_array_equal(w.grad[tuple(idx)], sentinel[tuple(idx)])
    idx[axis] = slice(0, n)
    np.testing.assert_allclose(w.grad[tuple(idx)], sentinel[tuple(idx)] + 2.0, rtol=1e-6)


def test_slice_axis_window_gradient():
    fd_check(lambda a: ag.slice_axis(a, 1, 1, 3), rand(2, 4, 3))


# ----------------------------------------------------------------- elementwise

def test_silu_zero():
    assert ag.silu(Tensor([0.0])).data[0] == 0.0


def test_softplus_zero():
    assert ag.softplus(Tensor([0.0])).data[0] == pytest.approx(math.log(2), abs=1e-7)


def test_silu_gradient_at_one():
    fd_check(ag.silu, np.array([1.0]))
    x = parameter([1.0])
    ag.silu(x).backward()
    s = 1 / (1 + math.exp(-1))
    assert x.grad[0] == pytest.approx(s * (1 + 1 * (1 - s)), rel=1e-6)


@pytest.mark.parametrize("name,fn", [
    ("exp", ag.exp), ("sigmoid", ag.sigmoid), ("silu", ag.silu), ("softplus", ag.softplus),
    ("negate", ag.negate), ("scale", lambda a: ag.scale(a, -1.7)),
])
def test_unary_gradients(name, fn):
    fd_check(fn, rand(3, 4))


def test_log_gradient():
    fd_check(ag.log, np.abs(rand(3, 4)) + 0.5)


@pytest.mark.parametrize("op", [ag.add, ag.sub, ag.mul])
def test_binary_gradients_with_trailing_broadcast(op):
    fd_check(op, rand(2, 3, 4), rand(4, seed=1))
    fd_check(op, rand(2, 3, 4), rand(3, 1, seed=1))


def test_div_gradient():
    fd_check(ag.div, rand(2, 3), np.abs(rand(3, seed=1)) + 1.0)


def test_broadcast_mismatch():
    with pytest.raises(DimensionError):
        ag.add(Tensor(rand(2, 3)), Tensor(rand(4)))


def test_operator_overloads_match_functions():
    a, b = Tensor(rand(3)), Tensor(rand(3, seed=1))
    np.testing.assert_array_equal((a + b).data, ag.add(a, b).data)
    np.testing.assert_array_equal((a * b).data, ag.mul(a, b).data)
    np.testing.assert_array_equal((-a).data, ag.negate(a).data)


def test_where_gradient():
    mask = np.array([[True, False, True], [False, True, True]])
    fd_check(lambda a: ag.where(mask, a, 0.0), rand(2, 3))


# ------------------------------------------------------------------ reductions

def test_sum_mean_cumsum_gradients():
    fd_check(lambda a: ag.sum_(a, axis=1, keepdims=True), rand(2, 3, 4))
    fd_check(lambda a: ag.mean(a, axis=-1), rand(2, 3, 4))
    fd_check(lambda a: ag.cumsum(a, axis=1), rand(2, 5, 3))


def test_shape_ops_gradients():
    fd_check(lambda a: ag.reshape(a, (4, 6)), rand(2, 3, 4))
    fd_check(lambda a: ag.transpose(a, (2, 0, 1)), rand(2, 3, 4))
    fd_check(lambda a: ag.broadcast_to(ag.expand_dims(a, 0), (3, 2, 4)), rand(2, 4))
    fd_check(lambda a: ag.pad_end(a, 1, 2), rand(2, 3))


def test_concat_split_gradients():
    fd_check(lambda a, b: ag.concat([a, b], axis=1), rand(2, 3), rand(2, 2, seed=1))
    fd_check(lambda a: ag.mul(*ag.split(a, [2, 2], axis=1)), rand(3, 4))


def test_take_rows_gradient_accumulates_repeats():
    table = parameter(rand(5, 3))
    ag.sum_(ag.take_rows(table, np.array([[1, 1, 4]]))).backward()
    np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 0, 1])


# ---------------------------------------------------------------------- einsum

@pytest.mark.parametrize("spec,shapes", [
    ("bctn,bcsn->bcts", [(2, 3, 4, 5), (2, 3, 4, 5)]),
    ("bcts,bhcts,bcshp->bcthp", [(2, 2, 3, 3), (2, 2, 2, 3, 3), (2, 2, 3, 2, 4)]),
    ("ij,j->i", [(3, 4), (4,)]),
    ("bchpn,bcn->bchp", [(1, 2, 3, 2, 4), (1, 2, 4)]),
])
def test_einsum_matches_numpy_and_gradients(spec, shapes):
    arrays = [rand(*s, seed=i) for i, s in enumerate(shapes)]
    got = ag.einsum(spec, *[Tensor(a) for a in arrays]).data
    np.testing.assert_allclose(got, np.einsum(spec, *arrays), atol=1e-5)
    fd_check(lambda *t: ag.einsum(spec, *t), *arrays)


# ----------------------------------------------------------------------- norms

def test_rmsnorm_constant_vector():
    out = ag.rmsnorm(Tensor([3.0, 3.0, 3.0, 3.0]), Tensor(np.ones(4)), eps=0.0)
    np.testing.assert_allclose(out.data, np.ones(4), rtol=1e-7)


def test_rmsnorm_zeros():
    out = ag.rmsnorm(Tensor(np.zeros((2, 4))), Tensor(np.ones(4)), eps=1e-5)
    assert np.all(out.data == 0)


def test_rmsnorm_gradient():
    fd_check(lambda x, w: ag.rmsnorm(x, w), rand(2, 3, 6), rand(6, seed=1))


def test_rmsnorm_dim_mismatch():
    with pytest.raises(DimensionError):
        ag.rmsnorm(Tensor(rand(2, 4)), Tensor(np.ones(3)))


# --------------------------------------------------------------- cross entropy

def test_cross_entropy_uniform():
    assert ag.cross_entropy(Tensor(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-6)


def test_cross_entropy_confident_is_stable():
    logits = np.zeros((2, 5), np.float32)
    logits[[0, 1], [3, 1]] = 1e4
    loss = ag.cross_entropy(Tensor(logits), [3, 1]).item()
    assert math.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_brute_force():
    logits = rand(2, 5, seed=4)
    targets = np.array([4, 0])
    z = logits.astype(np.float64)
    brute = np.mean([-z[i, t] + math.log(sum(math.exp(v) for v in z[i])) for i, t in enumerate(targets)])
    assert abs(ag.cross_entropy(Tensor(logits), targets).item() - brute) <= 1e-6


def test_cross_entropy_smoothing_brute_force_and_gradient():
    logits = rand(3, 5, seed=5)
    targets = np.array([0, 2, 4])
    eps = 0.1
    z = logits.astype(np.float64)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    q = np.full_like(logp, eps / 5)
    q[np.arange(3), targets] += 1 - eps
    brute = float(np.mean(-(q * logp).sum(1)))
    assert abs(ag.cross_entropy(Tensor(logits), targets, eps).item() - brute) <= 1e-6
    fd_check(lambda t: ag.cross_entropy(t, targets, eps), logits)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ag.cross_entropy(Tensor(np.zeros((1, 4))), [4])


# ------------------------------------------------------------------ the graph

def test_accumulation_is_additive():
    w = parameter(rand(3, 4))
    x = Tensor(rand(2, 3, seed=1))
    ag.sum_(ag.matmul(x, w)).backward()
    g1 = w.grad.copy()
    ag.sum_(ag.exp(w)).backward()
    np.testing.assert_allclose(w.grad, g1 + np.exp(w.data), rtol=1e-6)


def test_shared_node_visited_once():
    x = parameter([2.0])
    y = ag.mul(x, x)  # reused below through two paths
    ag.add(ag.scale(y, 2.0), ag.scale(y, 3.0)).backward()
    assert x.grad[0] == pytest.approx(5 * 2 * 2.0)


def test_deep_chain_no_recursion_limit():
    x = parameter([1.0])
    y = x
    for _ in range(5000):
        y = ag.add(y, Tensor([0.0]))
    y.backward()
    assert x.grad[0] == 1.0


def test_no_grad_records_nothing():
    w = parameter(rand(2, 2))
    with ag.no_grad():
        out = ag.matmul(w, w)
        assert not ag.is_grad_enabled()
    assert ag.is_grad_enabled()
    assert not out.requires_grad


def test_validate_finite():
    ag.validate_finite(Tensor([1.0, 2.0]))
    with pytest.raises(NumericError):
        ag.validate_finite(Tensor([1.0, np.nan]))


def test_determinism_bit_identical():
    def run():
        w = parameter(rand(4, 4))
        out = ag.rmsnorm(ag.silu(ag.matmul(Tensor(rand(3, 4, seed=1)), w)), Tensor(np.ones(4)))
        ag.sum_(out).backward()
        return out.data, w.grad
    (a1, g1), (a2, g2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and g1.tobytes() == g2.tobytes()


def test_float32_everywhere():
    t = Tensor(np.arange(3, dtype=np.float64))
    assert t.data.dtype == np.float32
    assert ag.exp(t).data.dtype == np.float32
