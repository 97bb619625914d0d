import math

import numpy as np
import pytest

from uniwm import tensor as T
from uniwm.tensor import Graph, Tensor


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_allclose(out.data, [[1, 2], [3, 4]])


def test_matmul_hand_computed():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_allclose(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_symmetry_and_stability():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)
    out = T.softmax(Tensor([1000.0, 1000.0])).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_softmax_direct_evaluation():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-6)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(scale=20, size=(5, 7, 11)))
    sums = T.softmax(x).data.sum(axis=-1)
    np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-6)


def test_rmsnorm_examples():
    gain = Tensor(np.ones(3))
    np.testing.assert_allclose(T.rmsnorm(Tensor([2.0, 2.0, 2.0]), gain).data, [1, 1, 1], atol=1e-5)
    out = T.rmsnorm(Tensor([0.0, 0.0]), Tensor(np.ones(2))).data
    np.testing.assert_allclose(out, [0, 0])
    # direct evaluation: [3,4] / sqrt(12.5 + eps)
    out = T.rmsnorm(Tensor([3.0, 4.0]), Tensor(np.ones(2))).data
    np.testing.assert_allclose(out, [0.84853, 1.13137], atol=1e-4)


def test_backward_linear_and_quadratic():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Graph() as g:
        g.backward(T.sum_(x))
    np.testing.assert_allclose(x.grad, [1, 1, 1])

    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Graph() as g:
        g.backward(T.sum_(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2, 4])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = T.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            g.backward(y)


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(6, 6))
    x = rng.normal(size=(4, 6))

    def run():
        wt = Tensor(w.copy(), requires_grad=True)
        with Graph() as g:
            out = T.softmax(T.matmul(Tensor(x.copy()), wt))
            g.backward(T.sum_(T.mul(out, out)))
        return wt.grad.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)


def _fd_check_op(build, shapes, seed, h=1e-5, tol=1e-6):
    """Central-difference oracle for a single op composed into a scalar."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    # keep relu inputs away from the kink
    arrays = [np.where(np.abs(a) < 0.05, a + 0.1, a) for a in arrays]
    probe = [rng.normal(size=None) for _ in shapes]

    def scalar(arrs):
        ts = [Tensor(a, requires_grad=True) for a in arrs]
        with Graph() as g:
            out = build(ts)
            loss = T.sum_(T.mul(out, out))
            g.backward(loss)
        return float(loss.data), ts

    _, ts = scalar(arrays)
    for ai, a in enumerate(arrays):
        flat_choices = rng.choice(a.size, size=min(6, a.size), replace=False)
        for idx in flat_choices:
            up = [x.copy() for x in arrays]
            dn = [x.copy() for x in arrays]
            up[ai].reshape(-1)[idx] += h
            dn[ai].reshape(-1)[idx] -= h
            fu, _ = scalar(up)
            fd_, _ = scalar(dn)
            fd = (fu - fd_) / (2 * h)
            an = ts[ai].grad.reshape(-1)[idx]
            assert abs(an - fd) / max(abs(an), abs(fd), 1e-6) < tol, (build.__name__, ai, idx)


@pytest.mark.parametrize(
    "name,build,shapes",
    [
        ("matmul", lambda ts: T.matmul(ts[0], ts[1]), [(3, 4), (4, 5)]),
        ("matmul3d", lambda ts: T.matmul(ts[0], ts[1]), [(2, 3, 4), (2, 4, 3)]),
        ("add_broadcast", lambda ts: T.add(ts[0], ts[1]), [(3, 4), (4,)]),
        ("mul", lambda ts: T.mul(ts[0], ts[1]), [(3, 4), (3, 4)]),
        ("scale", lambda ts: T.scale(ts[0], -1.7), [(5,)]),
        ("relu", lambda ts: T.relu(ts[0]), [(4, 4)]),
        ("softmax", lambda ts: T.softmax(ts[0]), [(3, 6)]),
        ("logsumexp", lambda ts: T.logsumexp(ts[0]), [(4, 5)]),
        ("rmsnorm", lambda ts: T.rmsnorm(ts[0], ts[1]), [(3, 8), (8,)]),
        ("transpose", lambda ts: T.transpose(ts[0], (1, 0)), [(3, 4)]),
        ("reshape", lambda ts: T.reshape(ts[0], (2, 6)), [(3, 4)]),
        ("concat", lambda ts: T.concat([ts[0], ts[1]], axis=0), [(2, 3), (4, 3)]),
        ("slice", lambda ts: T.slice_(ts[0], (slice(1, 3), slice(0, 2))), [(4, 4)]),
        ("pick", lambda ts: T.pick(ts[0], np.array([1, 0, 2])), [(3, 4)]),
        ("take_pairs", lambda ts: T.take_pairs(ts[0], np.array([0, 1]), np.array([2, 0])), [(2, 3, 4)]),
        ("mean", lambda ts: T.mean_(ts[0]), [(3, 3)]),
    ],
)
def test_op_gradients_match_finite_differences(name, build, shapes):
    build.__name__ = name
    for seed in range(3):
        _fd_check_op(build, shapes, seed=seed)


def test_rotary_gradient_and_orthogonality():
    rng = np.random.default_rng(1)
    t_len, heads, hd = 5, 2, 8
    angles = rng.normal(size=(t_len, 1, hd // 2))
    cos, sin = np.cos(angles), np.sin(angles)

    def build(ts):
        return T.rotary(ts[0], cos, sin)

    build.__name__ = "rotary"
    _fd_check_op(build, [(t_len, heads, hd)], seed=2)
    # rotation preserves norms
    x = Tensor(rng.normal(size=(t_len, heads, hd)))
    y = T.rotary(x, cos, sin)
    np.testing.assert_allclose((y.data**2).sum(-1), (x.data**2).sum(-1), atol=1e-10)


def test_embedding_gather_and_grad():
    table = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3), requires_grad=True)
    ids = np.array([0, 2, 2])
    with Graph() as g:
        out = T.embedding(table, ids)
        g.backward(T.sum_(out))
    np.testing.assert_allclose(out.data, [[0, 1, 2], [6, 7, 8], [6, 7, 8]])
    np.testing.assert_allclose(table.grad, [[1, 1, 1], [0, 0, 0], [2, 2, 2], [0, 0, 0]])
