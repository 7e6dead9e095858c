import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from causaltraffic import numerics as nx
from causaltraffic.numerics import NonFiniteError, ShapeError, Tensor


def test_sigmoid_zero():
    assert nx.sigmoid(Tensor(0.0)).item() == 0.5


def test_masked_softmax_example():
    out = nx.masked_softmax(Tensor([1.0, 1.0, 0.0]), np.array([0.0, 0.0, -np.inf]))
    np.testing.assert_array_equal(out.value, [0.5, 0.5, 0.0])


def test_fully_masked_row_is_zero():
    out = nx.masked_softmax(Tensor([[1.0, 2.0]]), np.array([[-np.inf, -np.inf]]))
    np.testing.assert_array_equal(out.value, [[0.0, 0.0]])


def test_tanh_sum_gradient_matches_central_difference():
    err = nx.finite_difference_check(lambda x: nx.tanh(x).sum(), [0.3, -0.7], step=1e-5)
    assert err <= 1e-6


def test_quadratic_check_is_tight():
    assert nx.finite_difference_check(lambda x: (x * x).sum(), [3.0], step=1e-5) <= 1e-8


def test_constant_function_has_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    out = (x * 0.0).sum() + 4.0
    out.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    assert nx.finite_difference_check(lambda x: (x * 0.0).sum() + 4.0, [1.0, 2.0]) == 0.0


def test_nonfinite_rejected_at_construction():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_values_are_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.value[0] = 5.0


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "matmul" in str(exc.value) and "(2, 3)" in str(exc.value)
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_bad_mask_values_rejected():
    with pytest.raises(ValueError):
        nx.masked_softmax(Tensor([1.0, 2.0]), np.array([0.0, 1.0]))


def test_finite_difference_check_names_coordinate():
    with pytest.raises(NonFiniteError, match=r"\(1,\)"):
        nx.finite_difference_check(lambda x: nx.log(x).sum(), [1.0, 1e-7], step=1e-5)


def test_detach_blocks_gradient_and_keeps_values():
    x = Tensor([0.5, -1.0], requires_grad=True)
    y = nx.detach(x * 3.0)
    np.testing.assert_array_equal(y.value, [1.5, -3.0])
    out = (x * 2.0).sum() + (y * x).sum()
    out.backward()
    # only the direct paths through x contribute; y acts as a constant
    np.testing.assert_array_equal(x.grad, 2.0 + y.value)


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_gradient_accumulates_over_shared_subgraph():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(8.0)


# --- randomized per-op gradient checks -------------------------------------

def _weighted(op, shapes, rng, positive=False):
    """Scalar objective sum(op(*args) * R) with a fixed random weighting R."""
    args = [rng.uniform(0.2, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    r = None

    def f_first(x):
        nonlocal r
        out = op(x, *[Tensor(a) for a in args[1:]])
        if r is None:
            r = np.random.default_rng(7).normal(size=out.shape)
        return (out * r).sum()

    return f_first, args[0]


def _causal_mask(t):
    m = np.zeros((t, t))
    m[np.triu_indices(t, 1)] = -np.inf
    return m


OPS = {
    "add": (lambda x, y: x + y, [(3, 4), (4,)], False),
    "add_rhs": (lambda y, x: x + y, [(4,), (3, 4)], False),
    "sub": (lambda x, y: x - y, [(2, 3), (2, 3)], False),
    "mul": (lambda x, y: x * y, [(3, 1), (3, 5)], False),
    "div": (lambda x, y: x / y, [(3, 2), (3, 2)], True),
    "div_rhs": (lambda y, x: x / y, [(3, 2), (3, 2)], True),
    "matmul": (lambda x, y: x @ y, [(2, 3, 4), (4, 5)], False),
    "matmul_rhs": (lambda y, x: x @ y, [(4, 5), (2, 3, 4)], False),
    "sigmoid": (lambda x: nx.sigmoid(x), [(5,)], False),
    "tanh": (lambda x: nx.tanh(x), [(2, 3)], False),
    "exp": (lambda x: nx.exp(x), [(4,)], False),
    "log": (lambda x: nx.log(x), [(4,)], True),
    "xlogx": (lambda x: nx.xlogx(x), [(4,)], True),
    "power": (lambda x: x ** 3, [(3,)], False),
    "softmax": (lambda x: nx.softmax(x, axis=-1), [(3, 5)], False),
    "masked_softmax": (lambda x: nx.masked_softmax(x, _causal_mask(4)), [(2, 4, 4)], False),
    "layer_norm": (lambda x, g, b: nx.layer_norm(x, g, b), [(3, 6), (6,), (6,)], False),
    "layer_norm_gamma": (lambda g, x, b: nx.layer_norm(x, g, b), [(6,), (3, 6), (6,)], False),
    "concat": (lambda x, y: nx.concat([x, y], axis=1), [(2, 3), (2, 2)], False),
    "stack": (lambda x, y: nx.stack([x, y], axis=0), [(2, 3), (2, 3)], False),
    "slice": (lambda x: x[:, 1:3], [(3, 4)], False),
    "fancy_index": (lambda x: x[np.array([0, 2, 0])], [(3, 2)], False),
    "sum": (lambda x: x.sum(axis=1, keepdims=True), [(3, 4)], False),
    "mean": (lambda x: x.mean(axis=0), [(3, 4)], False),
    "reshape": (lambda x: x.reshape(4, 3), [(3, 4)], False),
    "transpose": (lambda x: x.transpose(2, 0, 1), [(2, 3, 4)], False),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_randomized(name):
    op, shapes, positive = OPS[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for _ in range(100):
        f, x0 = _weighted(op, shapes, rng, positive)
        worst = max(worst, nx.finite_difference_check(f, x0, step=1e-6))
    assert worst <= 1e-4, f"{name}: max relative error {worst:.2e}"


# --- invariants ------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-30, 30)),
       arrays(np.bool_, (4, 6)))
def test_masked_softmax_rows(x, keep):
    mask = np.where(keep, 0.0, -np.inf)
    out = nx.masked_softmax(Tensor(x), mask).value
    assert (out >= 0).all()
    assert (out[~keep] == 0.0).all()
    for row, k in zip(out, keep):
        if k.any():
            assert abs(row.sum() - 1.0) <= 1e-9
        else:
            assert (row == 0).all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-50, 50)).filter(
    lambda a: (a.std(axis=1) > 1e-2).all()))
def test_layer_norm_moments(x):
    out = nx.layer_norm(Tensor(x)).value
    assert np.abs(out.mean(axis=1)).max() <= 1e-6
    assert np.abs(out.var(axis=1) - 1.0).max() <= 1e-6
