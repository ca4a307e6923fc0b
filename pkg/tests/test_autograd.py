import numpy as np
import pytest

from distilkit import autograd as ag
from distilkit.autograd import Tensor, backward, finite_diff_check, forward_op
from distilkit.errors import ContractError, DimensionError, ParameterError
from distilkit.rng import Rng


def leaf(x):
    return Tensor(x, requires_grad=True)


def test_softmax_examples():
    np.testing.assert_allclose(forward_op("softmax", [[0.0, 0.0, 0.0]]).data, [1 / 3] * 3, atol=1e-15)
    out = forward_op("softmax", [[1.0, 2.0]], {"temperature": 2.0}).data
    e = np.exp(np.array([0.5, 1.0]))
    np.testing.assert_allclose(out, e / e.sum(), atol=1e-15)
    np.testing.assert_allclose(out, [0.3775, 0.6225], atol=1e-4)


def test_softmax_invariants():
    r = Rng(3)
    z = r.normal((5, 7)) * 4
    p = ag.softmax(Tensor(z)).data
    assert np.max(np.abs(p.sum(-1) - 1)) < 1e-12
    np.testing.assert_allclose(ag.softmax(Tensor(z + 123.4)).data, p, atol=1e-10)


def test_matmul_identity():
    A = Rng(0).normal((2, 2))
    np.testing.assert_array_equal(forward_op("matmul", [np.eye(2), A]).data, A)


def test_shape_and_temperature_errors():
    with pytest.raises(DimensionError):
        forward_op("matmul", [np.ones((2, 3)), np.ones((2, 3))])
    with pytest.raises(DimensionError):
        forward_op("add", [np.ones((2, 3)), np.ones((3, 2))])
    with pytest.raises(ParameterError):
        forward_op("softmax", [[1.0, 2.0]], {"temperature": 0.0})
    with pytest.raises(ParameterError):
        forward_op("nope", [[1.0]])


def test_backward_examples():
    x = leaf(3.0)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)

    r = Rng(1)
    A, B = leaf(r.normal((3, 4))), leaf(r.normal((3, 4)))
    backward(ag.tsum(A * B))
    np.testing.assert_array_equal(A.grad, B.data)

    a = Tensor(r.normal((6,)))
    b = leaf(a.data.copy())
    pa = ag.softmax(a)
    kl = ag.tsum(pa * (ag.log_softmax(a) - ag.log_softmax(b)))
    backward(kl)
    assert np.max(np.abs(b.grad)) < 1e-15


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractError):
        backward(leaf(np.ones(3)) * 2.0)


def test_unused_leaf_gets_zero_grad():
    x, y = leaf(np.ones(3)), leaf(np.ones(3))
    backward(ag.tsum(x * 2.0))
    np.testing.assert_array_equal(y.grad, np.zeros(3))


def test_backward_visits_shared_node_once():
    x = leaf(2.0)
    y = x * x
    backward(y * y + y)           # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert x.grad == pytest.approx(4 * 8 + 4)


def test_finite_diff_examples():
    assert finite_diff_check(lambda t: t * t, Tensor(3.0)) < 1e-6
    r = Rng(7)
    z = Tensor(r.normal((8,)))
    target = 3
    assert finite_diff_check(lambda t: -ag.log_softmax(t)[target], z) < 1e-4
    x = Tensor(r.normal((4, 8)))
    w, b = Tensor(r.normal((8,))), Tensor(r.normal((8,)))
    proj = Tensor(r.normal((4, 8)))
    assert finite_diff_check(lambda t: ag.tsum(ag.layernorm(t, w, b) * proj), x) < 1e-4
    with pytest.raises(ParameterError):
        finite_diff_check(lambda t: t, Tensor(1.0), eps=0.1)


def _op_cases(r):
    """(kind, inputs, attrs, index of the input to check) for every op kind."""
    A, B = r.normal((3, 4)), r.normal((3, 4))
    M = r.normal((4, 5))
    pos = r.uniform((3, 4)) + 0.5
    W = r.normal((6, 4))
    Q, K = r.normal((2, 3, 4)), r.normal((2, 3, 4))
    g, b = r.normal((4,)), r.normal((4,))
    return [
        ("add", [A, B], {}, 0), ("sub", [A, B], {}, 1), ("mul", [A, B], {}, 0), ("div", [A, pos], {}, 1),
        ("matmul", [A, M], {}, 0), ("matmul", [A, M], {}, 1),
        ("transpose", [A], {"axes": (1, 0)}, 0), ("reshape", [A], {"shape": (2, 6)}, 0),
        ("softmax", [A], {"temperature": 1.7}, 0), ("log-softmax", [A], {"temperature": 0.6}, 0),
        ("log", [pos], {}, 0), ("exp", [A], {}, 0), ("mean", [A], {"axis": 1}, 0), ("sum", [A], {"axis": 0}, 0),
        ("layernorm", [A, g, b], {}, 0), ("layernorm", [A, g, b], {}, 1), ("layernorm", [A, g, b], {}, 2),
        ("gelu", [A], {}, 0), ("embedding-lookup", [W], {"ids": np.array([[0, 2, 2], [5, 1, 0]])}, 0),
        ("scaled-dot-product", [Q, K], {}, 0), ("scaled-dot-product", [Q, K], {}, 1),
        ("concat", [A, B], {"axis": 1}, 1), ("slice", [A], {"index": (slice(0, 2), slice(1, 3))}, 0),
    ]


@pytest.mark.parametrize("case", range(23))
def test_every_op_passes_finite_difference(case):
    r = Rng(100 + case)
    kind, inputs, attrs, which = _op_cases(r)[case]
    weights = None

    def f(t):
        nonlocal weights
        xs = [Tensor(x) for x in inputs]
        xs[which] = t
        out = forward_op(kind, xs, attrs)
        if weights is None:
            weights = Rng(9).normal(out.shape)
        return ag.tsum(out * Tensor(weights))

    assert finite_diff_check(f, Tensor(inputs[which])) < 1e-4


def test_op_kind_table_is_complete():
    assert set(ag.OP_KINDS) >= {"add", "mul", "matmul", "transpose", "reshape", "softmax", "log", "exp", "mean",
                                "sum", "layernorm", "gelu", "embedding-lookup", "scaled-dot-product",
                                "concat", "slice"}


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with ag.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_seeded_computation_is_bit_reproducible():
    def run():
        r = Rng(42)
        a = Tensor(r.normal((4, 4)), requires_grad=True)
        loss = ag.tsum(ag.gelu(a @ a) * ag.softmax(a))
        backward(loss)
        return loss.data.tobytes(), a.grad.tobytes()

    assert run() == run()


def test_non_finite_results_raise():
    from distilkit.errors import NonFiniteError
    with pytest.raises(NonFiniteError):
        ag.log(Tensor([-1.0]))
