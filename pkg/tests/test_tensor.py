import math

import numpy as np
import pytest

from binmask import tensor as T
from binmask.tensor import DimensionError, Tensor

from oracles import PRIMITIVES, cross_entropy_ref, gelu_ref, gradcheck, layer_norm_ref, softmax_ref


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_gradcheck_50_seeds(name):
    worst = max(gradcheck(PRIMITIVES[name], seed) for seed in range(50))
    assert worst < 1e-4, f"{name}: rel err {worst:.2e}"


def test_matmul_examples():
    out = T.matmul(Tensor([[1, 1]]), Tensor([[1, 0], [0, 4]]))
    assert out.data.tolist() == [[1, 4]]
    W = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)
    assert np.array_equal(T.matmul(Tensor(np.eye(4)), Tensor(W)).data, W)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4, 5))))


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert T.softmax(Tensor([7.0])).data.tolist() == [1.0]
    x = np.array([1.0, 2.0, 3.0])
    assert np.max(np.abs(T.softmax(Tensor(x, dtype=np.float64)).data - softmax_ref(x))) < 1e-6
    big = T.softmax(Tensor([1000.0, 1000.0])).data
    assert np.allclose(big, [0.5, 0.5])


def test_layer_norm_examples(rng):
    d = 8
    one, zero = Tensor(np.ones(d)), Tensor(np.zeros(d))
    assert np.all(T.layer_norm(Tensor(np.full((2, d), 3.25)), one, zero).data == 0)
    b = rng.standard_normal(d).astype(np.float32)
    out = T.layer_norm(Tensor(rng.standard_normal((3, d))), zero, Tensor(b)).data
    assert np.array_equal(out, np.broadcast_to(b, (3, d)))
    x = rng.standard_normal((4, d))
    g, bb = rng.standard_normal(d), rng.standard_normal(d)
    got = T.layer_norm(Tensor(x), Tensor(g), Tensor(bb)).data
    assert np.max(np.abs(got - layer_norm_ref(x, g, bb))) < 1e-5


def test_elementwise_examples(rng):
    W = rng.standard_normal((3, 4)).astype(np.float32)
    assert np.array_equal(T.hadamard(Tensor(W), Tensor(np.ones((3, 4)))).data, W)
    assert np.all(T.hadamard(Tensor(W), Tensor(np.zeros((3, 4)))).data == 0)
    x = rng.standard_normal(20) * 3
    assert np.max(np.abs(T.gelu(Tensor(x, dtype=np.float64)).data - gelu_ref(x))) < 1e-12
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_embedding_lookup():
    table = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3), requires_grad=True)
    assert T.embedding_lookup(table, [0]).data.tolist() == [[0, 1, 2]]
    out = T.embedding_lookup(table, [2, 2, 1])
    T.backward(T.tsum(out))
    assert table.grad[2].tolist() == [2, 2, 2]
    assert table.grad[1].tolist() == [1, 1, 1]
    assert table.grad[0].tolist() == [0, 0, 0]
    with pytest.raises(IndexError, match=r"position \(1, 0\)"):
        T.embedding_lookup(table, [[0, 1], [9, 0]])


def test_embedding_random_vs_gather(rng):
    tab = rng.standard_normal((10, 4)).astype(np.float32)
    ids = rng.integers(0, 10, size=(3, 5))
    out = T.embedding_lookup(Tensor(tab), ids).data
    for i in range(3):
        for j in range(5):
            assert np.array_equal(out[i, j], tab[ids[i, j]])


def test_cross_entropy_examples(rng):
    k = 5
    assert math.isclose(T.cross_entropy(Tensor(np.zeros((3, k))), [0, 1, 2]).item(), math.log(k), rel_tol=1e-6)
    z = np.full((2, 3), -50.0)
    z[0, 1] = z[1, 2] = 50.0
    assert T.cross_entropy(Tensor(z), [1, 2]).item() < 1e-6
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, 6)
    got = T.cross_entropy(Tensor(logits, dtype=np.float64), labels).item()
    assert abs(got - cross_entropy_ref(logits, labels)) < 1e-6
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_backward_examples():
    W = Tensor(np.ones((2, 3)), requires_grad=True)
    T.backward(T.tsum(W))
    assert np.array_equal(W.grad, np.ones((2, 3)))
    x = Tensor([1.0, -2.0], requires_grad=True)
    T.backward(T.tsum(T.scale(x, 0.0)))
    assert np.array_equal(x.grad, [0.0, 0.0])
    with pytest.raises(DimensionError):
        T.backward(T.scale(x, 2.0))


def test_grad_accumulates_exactly(rng):
    W = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 3)))

    def loss():
        return T.mean(T.tanh(T.matmul(x, W)))

    T.backward(loss())
    g1 = W.grad.copy()
    T.backward(loss())
    assert np.array_equal(W.grad, 2 * g1)
    W.zero_grad()
    assert W.grad is None


def test_composite_network_gradcheck(rng):
    """Two-layer net with layernorm and softmax head, float64 finite differences."""
    x = rng.standard_normal((4, 5))
    W1 = rng.standard_normal((5, 6))
    W2 = rng.standard_normal((6, 3))
    g, b = np.ones(6), np.zeros(6)
    y = rng.integers(0, 3, 4)

    def f(w1, w2):
        h = T.gelu(T.layer_norm(T.matmul(T.Tensor(x, dtype=np.float64), w1),
                                T.Tensor(g, dtype=np.float64), T.Tensor(b, dtype=np.float64)))
        return T.cross_entropy(T.matmul(h, w2), y)

    a1 = Tensor(W1, requires_grad=True, dtype=np.float64)
    a2 = Tensor(W2, requires_grad=True, dtype=np.float64)
    T.backward(f(a1, a2))

    def val():
        return f(Tensor(W1, dtype=np.float64), Tensor(W2, dtype=np.float64)).item()

    assert T.rel_error(a1.grad, T.numerical_grad(val, W1)) < 1e-4
    assert T.rel_error(a2.grad, T.numerical_grad(val, W2)) < 1e-4


def test_tape_reverse_order():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = T.scale(a, 2.0)
    c = T.tanh(b)
    loss = T.tsum(c)
    tape = T.Tape.from_loss(loss)
    assert [n is m for n, m in zip(tape.nodes, [a, b, c, loss])] == [True] * 4


def test_no_grad_builds_no_graph():
    a = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        b = T.scale(a, 3.0)
    assert not b.requires_grad and b.is_leaf


def test_forward_bitwise_deterministic(rng):
    x = rng.standard_normal((4, 7, 16)).astype(np.float32)
    g = np.ones(16, np.float32)
    b = np.zeros(16, np.float32)
    outs = [T.softmax(T.gelu(T.layer_norm(Tensor(x), Tensor(g), Tensor(b)))).data for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])


def test_health_check():
    t = Tensor([1.0, np.nan], name="h")
    with pytest.raises(T.NonFiniteError, match="h"):
        t.check_finite()
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))
