import math

import numpy as np
import pytest

from rangepdm.errors import FormatError
from rangepdm.nn import AdamW, BatchNorm, Classifier, Linear, MlpBlock, Tensor, backward, cross_entropy, no_grad
from rangepdm.nn import tensor as T
from rangepdm.nn.checkpoint import load_checkpoint, save_checkpoint
from rangepdm.nn.gradcheck import max_relative_error, numerical_grad

OP_TOL = 1e-6


def gradcheck(fn, arrays, seed=0, tol=OP_TOL):
    """Compare backward() against central differences of sum(fn(...) * R)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with no_grad():
        shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = np.random.default_rng(seed).normal(size=shape)

    def f():
        with no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(T.sum(T.mul(fn(*leaves), Tensor(weights))))
    numeric = numerical_grad(f, arrays, h=1e-5)
    for leaf, num in zip(leaves, numeric):
        err = max_relative_error(leaf.grad, num)
        assert err < tol, f"relative error {err:.3e}"
    return max(max_relative_error(l.grad, n) for l, n in zip(leaves, numeric))


R = np.random.default_rng(7)


def _bn_train(x, g, b):
    return T.batchnorm(x, g, b, np.zeros(x.shape[-1]), np.ones(x.shape[-1]), train=True)


def _bn_eval(x, g, b):
    return T.batchnorm(x, g, b, np.full(x.shape[-1], 0.3), np.full(x.shape[-1], 2.0), train=False)


OPS = {
    "add": (T.add, [(4, 3), (3,)]),
    "sub": (T.sub, [(2, 4, 3), (2, 1, 3)]),
    "mul": (T.mul, [(4, 3), (4, 3)]),
    "scale": (lambda a: T.scale(a, -2.5), [(5,)]),
    "abs": (T.abs, [(6,)]),
    "relu": (T.relu, [(3, 4)]),
    "sum_all": (lambda a: T.sum(a), [(3, 4)]),
    "sum_axis": (lambda a: T.sum(a, axis=1), [(2, 5, 3)]),
    "mean": (lambda a: T.mean(a, axis=0), [(4, 3)]),
    "max": (lambda a: T.max(a, axis=1), [(4, 7, 3)]),
    "softmax": (lambda a: T.softmax(a, axis=1), [(3, 5, 2)]),
    "log_softmax": (lambda a: T.log_softmax(a, axis=-1), [(4, 6)]),
    "matmul": (T.matmul, [(3, 4), (4, 2)]),
    "matmul_batched": (T.matmul, [(2, 5, 3), (2, 3, 1)]),
    "linear": (T.linear, [(2, 3, 4), (4, 5), (5,)]),
    "batchnorm_train": (_bn_train, [(9, 4), (4,), (4,)]),
    "batchnorm_eval": (_bn_eval, [(6, 4), (4,), (4,)]),
    "concat": (lambda a, b: T.concat([a, b], axis=-1), [(2, 3, 2), (2, 3, 4)]),
    "gather": (lambda a: T.gather(a, np.array([[0, 2, 2], [1, 0, 3]])), [(4, 3)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: T.transpose(a, (0, 2, 1)), [(2, 3, 4)]),
    "expand": (lambda a: T.expand(a, (3, 4, 2)), [(3, 1, 2)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, shapes = OPS[name]
    arrays = [R.normal(size=s) for s in shapes]
    gradcheck(fn, arrays)


def test_cross_entropy_gradient():
    logits = R.normal(size=(5, 3))
    targets = np.array([1, 2, 0, 2, 1])
    gradcheck(lambda x: cross_entropy(x, targets, ignore=0), [logits])


def test_mlp_block_and_classifier_gradients():
    rng = np.random.default_rng(3)
    for cls in (MlpBlock, Classifier):
        block = cls(4, 6, 3, rng)
        x = rng.normal(size=(8, 4))
        params = [p.data for p in block.parameters()]
        weights = rng.normal(size=(8, 3))

        def f():
            with no_grad():
                return float(np.sum(block(Tensor(x)).data * weights))

        block.zero_grad()
        backward(T.sum(T.mul(block(Tensor(x)), Tensor(weights))))
        analytic = [p.grad for p in block.parameters()]
        numeric = numerical_grad(f, params)
        for a, n in zip(analytic, numeric):
            assert max_relative_error(a, n) < 1e-6


def test_softmax_examples():
    s = T.softmax(Tensor([0.0, 0.0, 0.0])).data
    np.testing.assert_allclose(s, [1 / 3] * 3, rtol=0, atol=1e-15)
    big = T.softmax(Tensor(R.normal(size=(50, 9)) * 30), axis=1).data
    assert np.all(big > 0)
    np.testing.assert_allclose(big.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.isfinite(T.softmax(Tensor([1000.0, 1001.0])).data).all()


def test_relu_and_matmul_examples():
    assert T.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    a = Tensor([[1, 2, 3], [4, 5, 6]])
    b = Tensor([[7, 8], [9, 10], [11, 12]])
    assert T.matmul(a, b).data.tolist() == [[58, 64], [139, 154]]


def test_simple_backward_examples():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    backward(T.sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    backward(T.scale(T.sum(T.mul(x, x)), 0.5))
    assert x.grad.tolist() == [1.0, -2.0, 3.0]


def test_backward_clears_graph_and_rejects_misuse():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum(T.mul(x, x))
    backward(loss)
    assert loss._parents == () and loss._backward is None
    with pytest.raises(RuntimeError):
        backward(loss)
    with pytest.raises(RuntimeError):
        backward(T.sum(Tensor([1.0, 2.0])))
    with pytest.raises(ValueError):
        backward(T.mul(x, x))


def test_max_routes_to_first_argmax():
    x = Tensor([[1.0, 3.0, 3.0, 0.0]], requires_grad=True)
    out, arg = T.max(x, axis=1, return_argmax=True)
    assert arg.tolist() == [1]
    backward(T.sum(out))
    assert x.grad.tolist() == [[0.0, 1.0, 0.0, 0.0]]


def test_shape_errors_name_the_op():
    with pytest.raises(ValueError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ValueError, match="concat"):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


def test_batchnorm_identical_rows_no_nan():
    bn = BatchNorm(3)
    out = bn(Tensor(np.ones((5, 3)) * 4.0)).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_batchnorm_running_stats_and_eval_affine():
    bn = BatchNorm(2)
    x = R.normal(size=(10, 2)) * 3 + 1
    bn(Tensor(x))
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
    bn.eval()
    y1 = bn(Tensor(x)).data
    y2 = bn(Tensor(x)).data
    assert np.array_equal(y1, y2)
    expect = (x - bn.running_mean) / np.sqrt(bn.running_var + 1e-5)
    np.testing.assert_allclose(y1, expect, rtol=1e-14)


def test_linear_init_bounds():
    lin = Linear(6, 4, np.random.default_rng(0))
    assert np.abs(lin.w.data).max() <= math.sqrt(6 / 6)
    assert (lin.b.data == 0).all()


def test_cross_entropy_values():
    logits = Tensor(np.zeros((3, 4)), requires_grad=True)
    loss = cross_entropy(logits, np.array([1, 2, 3]))
    assert abs(float(loss.data) - math.log(4)) < 1e-15
    sharp = np.full((2, 3), -50.0)
    sharp[0, 1] = sharp[1, 2] = 50.0
    assert float(cross_entropy(Tensor(sharp), np.array([1, 2])).data) < 1e-40
    z = Tensor(R.normal(size=(3, 3)), requires_grad=True)
    loss = cross_entropy(z, np.zeros(3, dtype=int))
    assert float(loss.data) == 0.0
    backward(T.add(loss, T.scale(T.sum(z), 0.0)))
    assert (z.grad == 0).all()
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 2))), np.array([2]))


def test_adamw_matches_hand_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    p.grad = np.array([0.5, -0.25])
    opt.step()
    # first step: m_hat = g, v_hat = g^2, so the step is lr * sign(g) (up to eps)
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.array([0.5, -0.25]) / (
        np.abs([0.5, -0.25]) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=0, atol=1e-15)


def test_adamw_zero_lr_is_identity():
    p = Tensor(R.normal(size=4), requires_grad=True)
    before = p.data.copy()
    opt = AdamW([p], lr=0.0)
    p.grad = np.ones(4)
    opt.step()
    assert np.array_equal(p.data, before)


def test_state_dict_round_trip_and_checkpoint(tmp_path):
    rng = np.random.default_rng(1)
    a = MlpBlock(3, 5, 2, rng)
    a(Tensor(rng.normal(size=(7, 3))))
    b = MlpBlock(3, 5, 2, np.random.default_rng(99))
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, a.state_dict(), {"note": "x"})
    state, meta = load_checkpoint(p)
    assert meta == {"note": "x"}
    b.load_state_dict(state)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and np.array_equal(va, vb)
    assert list(state)[:2] == ["lin1.w", "lin1.b"]
    assert "bn.running_mean" in state


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"nope")
    with pytest.raises(FormatError):
        load_checkpoint(p)
    save_checkpoint(p, {"w": np.ones((2, 2))})
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_load_state_dict_mismatch():
    a = MlpBlock(3, 5, 2, np.random.default_rng(0))
    state = a.state_dict()
    del state["lin2.b"]
    with pytest.raises(ValueError, match="missing"):
        a.load_state_dict(state)
