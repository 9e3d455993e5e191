import math

import numpy as np
import pytest

from textdiae import tensor as T
from textdiae.errors import DimensionError, NumericError
from textdiae.tensor import Tensor

H = 1e-4
TOL = 1e-5


def t64(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True, dtype=np.float64)


def weighted_sum(out: Tensor, seed=0) -> Tensor:
    # a fixed random projection makes every output coordinate matter
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(w, dtype=np.float64)).sum()


UNARY = {
    "neg": lambda x: -x,
    "exp": lambda x: x.exp(),
    "log": lambda x: x.log(),
    "tanh": lambda x: x.tanh(),
    "sqrt": lambda x: x.sqrt(),
    "pow3": lambda x: x ** 3,
    "sum_axis": lambda x: x.sum(axis=1),
    "mean_keep": lambda x: x.mean(axis=0, keepdims=True),
    "reshape": lambda x: x.reshape(-1),
    "transpose": lambda x: x.transpose(1, 0),
    "swapaxes": lambda x: x.swapaxes(0, 1),
    "getitem": lambda x: x[1:, ::2],
    "gelu": T.gelu,
    "softmax": lambda x: T.softmax(x, axis=-1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    x = t64(rng, 4, 5, positive=name in ("log", "sqrt"))
    assert T.grad_check(lambda a: weighted_sum(UNARY[name](a)), x, h=H) < TOL


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("bshape", [(4, 5), (5,), (1, 5), (4, 1)])
def test_binary_gradients_with_broadcasting(name, bshape, rng):
    a = t64(rng, 4, 5)
    b = t64(rng, *bshape, positive=True)
    errs = T.grad_check_many(lambda: weighted_sum(BINARY[name](a, b)), {"a": a, "b": b}, h=H)
    assert max(errs.values()) < TOL


def test_matmul_matches_numpy_and_gradients(rng):
    a, b = t64(rng, 2, 3, 4), t64(rng, 4, 5)
    np.testing.assert_allclose(T.matmul(a, b).data, a.data @ b.data, rtol=0, atol=0)
    errs = T.grad_check_many(lambda: weighted_sum(T.matmul(a, b)), {"a": a, "b": b}, h=H)
    assert max(errs.values()) < TOL


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_linear_and_concat_gradients(rng):
    x, w, b = t64(rng, 3, 4), t64(rng, 4, 2), t64(rng, 2)
    errs = T.grad_check_many(lambda: weighted_sum(T.linear(x, w, b)), {"x": x, "w": w, "b": b}, h=H)
    assert max(errs.values()) < TOL
    p, q = t64(rng, 2, 3), t64(rng, 4, 3)
    errs = T.grad_check_many(lambda: weighted_sum(T.concat([p, q], axis=0)), {"p": p, "q": q}, h=H)
    assert max(errs.values()) < TOL


def test_embedding_gradient_accumulates_repeated_ids(rng):
    w = t64(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    assert T.grad_check(lambda a: weighted_sum(T.embedding(a, ids)), w, h=H) < TOL
    with pytest.raises(IndexError):
        T.embedding(w, np.array([6]))


def test_layer_norm_matches_formula_and_gradients(rng):
    x, g, b = t64(rng, 3, 4, 8), t64(rng, 8), t64(rng, 8)
    out = T.layer_norm(x, g, b, eps=1e-5).data
    mu = x.data.mean(-1, keepdims=True)
    var = x.data.var(-1, keepdims=True)
    np.testing.assert_allclose(out, (x.data - mu) / np.sqrt(var + 1e-5) * g.data + b.data, rtol=1e-12, atol=1e-12)
    errs = T.grad_check_many(lambda: weighted_sum(T.layer_norm(x, g, b)), {"x": x, "g": g, "b": b}, h=H)
    assert max(errs.values()) < TOL


def test_layer_norm_constant_row_collapses_to_beta():
    x = Tensor(np.full((2, 6), 3.0))
    g, b = Tensor(np.ones(6) * 2.0), Tensor(np.arange(6.0))
    out = T.layer_norm(x, g, b, eps=0.0).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(6.0), (2, 6)))


def test_layer_norm_empty_feature_axis():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


def test_softmax_rows_sum_to_one_and_mask(rng):
    x = t64(rng, 3, 5)
    mask = np.zeros((3, 5))
    mask[:, 3:] = -np.inf
    p = T.softmax(x, axis=-1, mask=mask).data
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=0, atol=1e-15)
    assert np.all(p[:, 3:] == 0)
    assert T.grad_check(lambda a: weighted_sum(T.softmax(a, axis=-1, mask=mask)), x, h=H) < TOL


def test_softmax_is_stable_for_large_inputs():
    p = T.softmax(Tensor(np.array([[1000.0, 1000.0, -1000.0]])), axis=-1).data
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])


def test_gelu_matches_tanh_formula(rng):
    x = rng.standard_normal(100)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(Tensor(x, dtype=np.float64)).data, ref, rtol=1e-14, atol=1e-15)


def test_mse_and_cross_entropy(rng):
    p, y = t64(rng, 4, 3), rng.standard_normal((4, 3))
    assert float(T.mse_loss(p, y).data) == pytest.approx(((p.data - y) ** 2).mean(), rel=1e-14)
    assert T.grad_check(lambda a: T.mse_loss(a, y), p, h=H) < TOL

    logits = t64(rng, 2, 3, 5)
    tgt = np.array([[1, 0, 4], [2, 0, 0]])
    loss = T.cross_entropy_loss(logits, tgt, ignore_index=0)
    m = logits.data
    lse = np.log(np.exp(m).sum(-1))
    nll = lse - np.take_along_axis(m, tgt[..., None], -1)[..., 0]
    keep = tgt != 0
    assert float(loss.data) == pytest.approx(nll[keep].mean(), rel=1e-12)
    assert T.grad_check(lambda a: T.cross_entropy_loss(a, tgt, ignore_index=0), logits, h=H) < TOL


def test_cross_entropy_ignored_positions_receive_no_gradient(rng):
    logits = t64(rng, 1, 3, 4)
    T.cross_entropy_loss(logits, np.array([[2, 0, 0]]), ignore_index=0).backward()
    assert np.all(logits.grad[0, 1:] == 0)
    assert np.any(logits.grad[0, 0] != 0)


def test_shared_subexpression_gradient_accumulates():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True, dtype=np.float64)
    y = x * x
    (y + y * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data ** 2)


def test_backward_requires_scalar_without_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad and y._parents == ()
    assert T.is_grad_enabled()


def test_tape_orders_inputs_before_outputs(rng):
    a = t64(rng, 2, 2)
    b = t64(rng, 2, 2)
    out = ((a @ b).tanh() + a).sum()
    tape = T.Tape.record(out)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(n)]
    assert tape.nodes[-1] is out


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array(1.0), requires_grad=True, dtype=np.float64)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.backward()
    assert x.grad == 1.0


def test_check_finite_names_the_tensor():
    with pytest.raises(NumericError, match="bad"):
        T.check_finite([("good", Tensor(np.ones(2))), ("bad", Tensor(np.array([1.0, np.nan])))])


def test_grad_check_detects_a_wrong_backward(rng):
    x = t64(rng, 5)

    def broken(a):
        out = a.exp()
        out._backward = lambda g: (g * 2.0 * out.data,)
        return out.sum()

    assert T.grad_check(broken, x, h=H) > 0.4


def test_scalar_results_keep_double_precision():
    a = Tensor(np.array(1.0), dtype=np.float64)
    with T.no_grad():
        assert (a + a).dtype == np.float64
        assert (a * 3).dtype == np.float64
    assert Tensor(np.float32(2.0)).dtype == np.float32
