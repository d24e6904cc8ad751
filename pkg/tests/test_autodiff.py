import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import grad_error, numeric_grad
from logitsep import autodiff as ad
from logitsep.errors import DimensionError, DomainError, NumericalError, UsageError


def test_matmul_examples():
    a = ad.Tensor([[1, 2], [3, 4]])
    assert np.array_equal((a @ ad.Tensor(np.eye(2))).data, [[1, 2], [3, 4]])
    assert np.array_equal(ad.matmul(np.eye(2), [[5], [7]]).data, [[5], [7]])
    assert np.array_equal(ad.matmul(a, [[1], [1]]).data, [[3], [7]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_elementwise_examples():
    assert ad.sigmoid(0.0).item() == 0.5
    assert ad.relu(-3.0).item() == 0.0
    assert ad.relu(3.0).item() == 3.0
    assert abs(ad.log(ad.exp(2.0)).item() - 2.0) < 1e-12
    assert ad.maximum([[1.0, -2.0]], 0.5).data.tolist() == [[1.0, 0.5]]


def test_log_of_nonpositive_is_domain_error():
    with pytest.raises(DomainError):
        ad.log([[1.0, 0.0]])
    with pytest.raises(DomainError):
        ad.log(-1.0)


def test_reductions():
    assert abs(ad.logsumexp([[0.0, 0.0]]).item() - math.log(2)) < 1e-15
    assert abs(ad.logsumexp([[1000.0, 1000.0]]).item() - (1000 + math.log(2))) < 1e-12
    assert ad.reduce_max([[1.0, 5.0, 3.0]]).item() == 5.0
    assert ad.reduce_sum([[1.0, 2.0], [3.0, 4.0]], axis=0).data.tolist() == [[4.0, 6.0]]
    assert ad.reduce_sum([[1.0, 2.0], [3.0, 4.0]], axis=1).data.tolist() == [[3.0], [7.0]]


def test_empty_reduction_is_domain_error():
    with pytest.raises(DomainError):
        ad.reduce_sum(np.zeros((0, 3)))
    with pytest.raises(DomainError):
        ad.logsumexp(np.zeros((2, 0)), axis=1)


def test_overflow_is_numerical_error():
    with pytest.raises(NumericalError):
        ad.exp(1000.0)


def test_tensors_are_2d_and_read_only():
    t = ad.Tensor([1.0, 2.0])
    assert t.shape == (1, 2)
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0
    with pytest.raises(DimensionError):
        ad.Tensor(np.zeros((2, 2, 2)))


def test_backward_examples():
    tape = ad.Tape()
    x = tape.variable([[3.0]])
    assert tape.backward(x * x)[x][0, 0] == 6.0

    tape = ad.Tape()
    z = tape.variable([[0.0, 0.0]])
    assert np.allclose(tape.backward(ad.logsumexp(z))[z], [[0.5, 0.5]], atol=1e-15)


def test_backward_needs_scalar_root():
    tape = ad.Tape()
    x = tape.variable([[1.0, 2.0]])
    with pytest.raises(UsageError):
        tape.backward(x * 2.0)


def test_relu_subgradient_at_zero_is_zero():
    tape = ad.Tape()
    x = tape.variable([[0.0, 1.0, -1.0]])
    g = tape.backward(ad.reduce_sum(ad.relu(x)))[x]
    assert g.tolist() == [[0.0, 1.0, 0.0]]


def test_unreached_variable_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.variable([[1.0]])
    y = tape.variable([[2.0, 3.0]])
    g = tape.backward(x * x)
    assert g[y].tolist() == [[0.0, 0.0]]


def test_node_ids_are_topological():
    tape = ad.Tape()
    x = tape.variable(np.ones((2, 2)))
    y = ad.reduce_sum(ad.exp(x @ x) * x)
    for node_id, node in enumerate(tape.nodes):
        assert all(i is None or i < node_id for i in node.inputs)
    assert y.node == len(tape.nodes) - 1


def test_gradient_accumulates_over_reuse():
    tape = ad.Tape()
    x = tape.variable([[2.0]])
    y = x * x + x * 3.0 + x
    assert tape.backward(y)[x][0, 0] == 2 * 2.0 + 3.0 + 1.0


# finite-difference checks: one composite per registered operation

_rng = np.random.default_rng(2024)


def _op_cases():
    def unary(op):
        return lambda x: ad.reduce_sum(op(x) * _W)

    cases = {
        "matmul": (lambda x: ad.reduce_sum(ad.matmul(x, _B) * _W2), (3, 4)),
        "matmul_right": (lambda x: ad.reduce_sum(ad.matmul(_B.T, x) * _W3[:, :3]), (4, 3)),
        "add": (lambda x: ad.reduce_sum(ad.add(x, _C) * _W), (3, 4)),
        "add_broadcast": (lambda x: ad.reduce_sum(ad.add(_C, x) * _W), (1, 4)),
        "sub": (lambda x: ad.reduce_sum(ad.sub(_C, x) * _W), (3, 4)),
        "mul": (lambda x: ad.reduce_sum(ad.mul(x, x) * _W), (3, 4)),
        "mul_broadcast": (lambda x: ad.reduce_sum(ad.mul(_C, x) * _W), (3, 1)),
        "exp": (unary(ad.exp), (3, 4)),
        "log": (lambda x: ad.reduce_sum(ad.log(ad.exp(x) + 0.5) * _W), (3, 4)),
        "relu": (unary(ad.relu), (3, 4)),
        "sigmoid": (unary(ad.sigmoid), (3, 4)),
        "maximum": (lambda x: ad.reduce_sum(ad.maximum(x, 0.3) * _W), (3, 4)),
        "power": (lambda x: ad.reduce_sum(ad.power(x * x + 1.0, -0.5) * _W), (3, 4)),
        "reduce_sum_rows": (lambda x: ad.reduce_sum(ad.reduce_sum(x, axis=1) * _W[:, :1]), (3, 4)),
        "reduce_sum_cols": (lambda x: ad.reduce_sum(ad.reduce_sum(x, axis=0) * _W[:1]), (3, 4)),
        "reduce_max": (lambda x: ad.reduce_sum(ad.reduce_max(x, axis=1) * _W[:, :1]), (3, 4)),
        "reduce_max_all": (lambda x: ad.reduce_max(x * _W), (3, 4)),
        "logsumexp_rows": (lambda x: ad.reduce_sum(ad.logsumexp(x, axis=1) * _W[:, :1]), (3, 4)),
        "logsumexp_cols": (lambda x: ad.reduce_sum(ad.logsumexp(x, axis=0) * _W[:1]), (3, 4)),
        "logsumexp_all": (lambda x: ad.logsumexp(x), (3, 4)),
    }
    return cases


_B = _rng.uniform(-1, 1, size=(4, 5))
_W = _rng.uniform(-1, 1, size=(3, 4))
_W2 = _rng.uniform(-1, 1, size=(3, 5))
_W3 = _rng.uniform(-1, 1, size=(5, 4))
_C = _rng.uniform(-1, 1, size=(3, 4))
OP_CASES = _op_cases()


def _check(fn, x):
    tape = ad.Tape()
    v = tape.variable(x)
    analytic = tape.backward(fn(v))[v]
    numeric = numeric_grad(lambda a: fn(ad.Tensor(a)).item(), x)
    return grad_error(analytic, numeric)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    fn, shape = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-3, 3, size=shape)
        if name == "relu" or name == "maximum":
            # keep clear of the kink so the difference quotient is defined
            thresh = 0.0 if name == "relu" else 0.3
            x = np.where(np.abs(x - thresh) < 1e-3, x + 1e-2, x)
        worst = max(worst, _check(fn, x))
    assert worst < 1e-5, f"{name}: worst relative error {worst:.3g}"


def test_mlp_shaped_composite_gradient():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 3))
    w2 = rng.normal(size=(4, 3))

    def loss(w):
        h = ad.relu(ad.matmul(x, w))
        mean = ad.reduce_sum(h, axis=0) * (1 / 5)
        c = h - mean
        var = ad.reduce_sum(c * c, axis=0) * (1 / 5)
        n = c * ad.power(var + 1e-5, -0.5)
        z = ad.matmul(n, w2)
        return ad.reduce_sum(ad.logsumexp(z, axis=1))

    w = rng.normal(size=(3, 4))
    assert _check(loss, w) < 1e-5


def test_backward_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 5))

    def run():
        tape = ad.Tape()
        v = tape.variable(x)
        root = ad.reduce_sum(ad.logsumexp(ad.matmul(v, v.data.T) * v.data[:, :1], axis=1))
        return tape.backward(root)[v]

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=st.floats(-300, 300)),
    st.floats(-300, 300),
)
def test_logsumexp_shift_property(z, c):
    base = ad.logsumexp(z, axis=1).data
    shifted = ad.logsumexp(z + c, axis=1).data
    assert np.allclose(shifted, base + c, rtol=0, atol=1e-10 * max(1.0, abs(c) + np.abs(z).max()))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-700, 700)))
def test_logsumexp_never_overflows_up_to_700(z):
    out = ad.logsumexp(z).item()
    assert math.isfinite(out)
    assert out >= z.max()
