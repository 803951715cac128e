import numpy as np
import pytest

from egokit import autodiff as ad
from egokit.autodiff import Tensor


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check(build, *shapes, seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    ts = [Tensor(x, requires_grad=True) for x in xs]
    out = build(*ts)
    proj = rng.normal(size=out.shape)
    ad.sum_all(ad.mul(out, proj)).backward()
    for k, x in enumerate(xs):
        def f(v, k=k):
            args = [Tensor(v if j == k else xs[j]) for j in range(len(xs))]
            return float((build(*args).data * proj).sum())
        num = numeric_grad(f, x)
        assert np.abs(ts[k].grad - num).max() <= tol * max(1.0, np.abs(num).max())


def test_add_mul_broadcast():
    check(lambda a, b: ad.mul(ad.add(a, b), a), (3, 4), (4,))


def test_matmul_batched():
    check(lambda a, b: ad.matmul(a, b), (2, 3, 4), (4, 5))


def test_reshape_transpose_split():
    def build(a):
        parts = ad.split_last(ad.transpose(ad.reshape(a, (2, 3, 4)), (0, 2, 1)), [1, 2])
        return ad.mul(parts[0], ad.reshape(ad.sum_all(parts[1]), (1,)))
    check(build, (6, 4))


def test_gelu():
    check(ad.gelu, (5, 3))


def test_layer_norm():
    check(lambda a, g, b: ad.layer_norm(a, g, b), (4, 6), (6,), (6,))


def test_rope():
    cos, sin = ad.rope_tables(5, 4)
    check(lambda a: ad.rope(a, cos, sin), (2, 5, 4))


def test_attention():
    check(lambda q, k, v: ad.attention(q, k, v), (2, 5, 4), (2, 7, 4), (2, 7, 3))


def test_rope_is_a_rotation():
    cos, sin = ad.rope_tables(9, 8)
    x = np.random.default_rng(0).normal(size=(9, 8))
    y = ad.rope(Tensor(x), cos, sin).data
    assert np.allclose(np.linalg.norm(x, axis=-1), np.linalg.norm(y, axis=-1))


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_shared_node_accumulates():
    a = Tensor(np.array([2.0]), requires_grad=True)
    ad.sum_all(ad.mul(a, a)).backward()
    assert a.grad[0] == pytest.approx(4.0)
