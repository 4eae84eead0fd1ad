import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from askdlab import functional as F
from askdlab import numkernel as nk
from askdlab.numkernel import Tensor


def triple_loop_matmul(a, b):
    n, k = len(a), len(b)
    m = len(b[0])
    return [[sum(a[i][p] * b[p][j] for p in range(k)) for j in range(m)] for i in range(n)]


def test_matmul_identity():
    a = np.random.default_rng(0).uniform(-2, 2, (3, 3))
    assert np.array_equal(nk.matmul(np.eye(3), a).data, a)


def test_matmul_hand_value():
    a, b = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
    out = nk.primitive_forward("matmul", a, b).data
    assert out.tolist() == [[19, 22], [43, 50]]
    assert out.tolist() == triple_loop_matmul(a, b)


def test_add_shape_mismatch_names_shapes():
    with pytest.raises(nk.ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        nk.add(np.zeros((2, 3)), np.zeros((3, 2)))


def test_no_implicit_broadcast():
    with pytest.raises(nk.ShapeError):
        nk.mul(np.zeros((2, 3)), np.zeros((3,)))


def test_non_finite_input_rejected():
    with pytest.raises(nk.NonFiniteError):
        nk.exp(np.array([1.0, np.nan]))


def test_unknown_primitive():
    with pytest.raises(ValueError):
        nk.primitive_forward("conv", np.zeros(2))


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)), requires_grad=True)
    nk.backward(nk.sum_reduce(x))
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    nk.backward(nk.sum_reduce(nk.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(nk.ShapeError):
        nk.backward(nk.scale(x, 2.0))


def test_unrelated_leaf_gets_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    z = Tensor([3.0], requires_grad=True)
    nk.backward(nk.sum_reduce(nk.mul(x, x)), wrt=[x, z])
    assert np.array_equal(z.grad, [0.0])


def test_graph_is_topological_and_unique():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = nk.mul(x, x)
    root = nk.sum_reduce(nk.add(y, y))  # y consumed twice
    g = nk.Graph(root)
    seen = set()
    for node in g.nodes:
        for t in node.inputs:
            if t.node is not None:
                assert id(t.node) in seen
        assert id(node) not in seen
        seen.add(id(node))
    nk.backward(root, g)
    assert np.array_equal(x.grad, 4 * np.ones((2, 2)))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with nk.no_grad():
        y = nk.exp(x)
    assert y.node is None and not y.requires_grad


# --- finite differences -----------------------------------------------------

RNG = np.random.default_rng(7)


def _rand(*shape):
    return RNG.uniform(-2, 2, shape)


def _weighted(t):
    w = Tensor(np.random.default_rng(99).uniform(0.5, 1.5, t.shape))
    return nk.sum_reduce(nk.mul(t, w))


_W43 = _rand(4, 3)

PRIMITIVE_CASES = {
    "matmul": (lambda x: nk.matmul(x, Tensor(_W43)), (2, 4)),
    "matmul_rhs": (lambda x: nk.matmul(Tensor(np.linspace(-1, 1, 8).reshape(2, 4)), x), (4, 3)),
    "batched_matmul": (lambda x: nk.matmul(x, Tensor(np.linspace(-1, 2, 24).reshape(2, 4, 3))), (2, 3, 4)),
    "add": (lambda x: nk.add(x, Tensor(np.full((3, 2), 0.3))), (3, 2)),
    "sub": (lambda x: nk.sub(Tensor(np.full((3, 2), 0.3)), x), (3, 2)),
    "mul": (lambda x: nk.mul(x, x), (3, 2)),
    "scale": (lambda x: nk.scale(x, -1.7), (5,)),
    "exp": (nk.exp, (4,)),
    "log": (lambda x: nk.log(nk.add(nk.mul(x, x), Tensor(np.ones(x.shape)))), (4,)),
    "reciprocal": (lambda x: nk.reciprocal(nk.add(nk.mul(x, x), Tensor(np.ones(x.shape)))), (4,)),
    "sqrt": (lambda x: nk.sqrt(nk.add(nk.mul(x, x), Tensor(np.ones(x.shape)))), (4,)),
    "sigmoid": (nk.sigmoid, (6,)),
    "max-reduce": (lambda x: nk.max_reduce(x, axis=1), (3, 4)),
    "sum-reduce": (lambda x: nk.sum_reduce(x, axis=0, keepdims=True), (3, 4)),
    "mask-fill": (lambda x: nk.mask_fill(x, np.eye(3, dtype=bool), -5.0), (3, 3)),
    "concat": (lambda x: nk.concat([x, nk.scale(x, 2.0)], axis=1), (2, 3)),
    "slice": (lambda x: nk.slice_(x, (slice(0, 2), 1)), (3, 3)),
    "transpose": (lambda x: nk.transpose(x, (2, 0, 1)), (2, 3, 4)),
    "reshape": (lambda x: nk.reshape(x, (6, 2)), (3, 4)),
    "broadcast": (lambda x: nk.broadcast(x, (2, 3, 4)), (3, 1)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    fn, shape = PRIMITIVE_CASES[name]
    for probe in range(3):
        x = np.random.default_rng([probe, len(name)]).uniform(-2, 2, shape)
        assert nk.finite_diff_check(lambda t: _weighted(fn(t)), x, 1e-5) <= 1e-4


def test_every_primitive_has_a_gradient_case():
    covered = {k.split("_")[0] if k != "batched_matmul" else "matmul" for k in PRIMITIVE_CASES}
    covered.add("matmul")
    assert set(nk.PRIMITIVES) <= covered


def test_two_layer_composition_gradient():
    rng = np.random.default_rng(3)
    w1, w2 = Tensor(rng.uniform(-1, 1, (4, 5))), Tensor(rng.uniform(-1, 1, (5, 2)))

    def f(x):
        h = nk.sigmoid(nk.matmul(x, w1))
        return nk.sum_reduce(nk.mul(nk.matmul(h, w2), nk.matmul(h, w2)))

    assert nk.finite_diff_check(f, rng.uniform(-2, 2, (3, 4)), 1e-5) <= 1e-4


def test_finite_diff_sum_is_exact_enough():
    x = np.random.default_rng(4).uniform(-2, 2, (3, 3))
    assert nk.finite_diff_check(nk.sum_reduce, x, 1e-5) <= 1e-9


def test_finite_diff_softmax_ce():
    y = np.eye(5)[[1, 3, 0]]

    def f(x):
        return nk.scale(nk.sum_reduce(nk.mul(F.log_softmax(x), Tensor(y))), -1.0)

    assert nk.finite_diff_check(f, np.random.default_rng(5).uniform(-2, 2, (3, 5)), 1e-5) <= 1e-4


def test_finite_diff_rejects_zero_step():
    with pytest.raises(ValueError):
        nk.finite_diff_check(nk.sum_reduce, np.ones(2), 0.0)


def test_finite_diff_rejects_nondeterministic_f():
    rng = np.random.default_rng(0)

    def f(x):
        return nk.sum_reduce(nk.scale(x, float(rng.uniform())))

    with pytest.raises(ValueError, match="deterministic"):
        nk.finite_diff_check(f, np.ones(2))


# --- sgd ---------------------------------------------------------------------

def test_sgd_one_step():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([2.0])
    nk.sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)
    assert p.grad is None


def test_sgd_zero_lr_leaves_params():
    p = Tensor([1.5, -2.0], requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    nk.sgd_step([p], 0.0)
    assert p.data.tolist() == [1.5, -2.0]


def test_sgd_rejects_nan_grad_and_missing_grad():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(nk.NonFiniteError):
        nk.sgd_step([p], 0.1)
    assert p.data[0] == 1.0
    q = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        nk.sgd_step([q], 0.1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=6))
def test_runs_are_bit_identical(values):
    def run():
        x = Tensor(values, requires_grad=True)
        y = F.softmax(nk.reshape(x, (1, len(values))))
        loss = nk.sum_reduce(nk.mul(y, y))
        nk.backward(loss)
        return loss.data.tobytes() + x.grad.tobytes()

    assert run() == run()
