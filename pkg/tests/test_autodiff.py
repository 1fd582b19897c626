import numpy as np
import pytest

from artifact.autodiff import ShapeError, Tape, scatter_sum


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def test_affine_identity():
    X = np.array([[1.0, -2.0], [3.0, 0.5]])
    t = Tape()
    out = t.affine(t.leaf(X), t.leaf(np.eye(2)), t.leaf(np.zeros((1, 2))))
    np.testing.assert_array_equal(t.value(out), X)


def test_affine_hand():
    t = Tape()
    out = t.affine(t.leaf([[1.0, 2.0]]), t.leaf([[1.0], [1.0]]), t.leaf([[1.0]]))
    np.testing.assert_array_equal(t.value(out), [[4.0]])


def test_affine_shape_error():
    t = Tape()
    with pytest.raises(ShapeError):
        t.affine(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 2))), t.leaf(np.zeros((1, 2))))


def test_affine_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    X, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=(1, 2))
    probe = rng.normal(size=(4, 2))

    def f():
        return float(np.sum((X @ W + b) * probe))

    t = Tape()
    hx, hw, hb = t.leaf(X), t.leaf(W), t.leaf(b)
    out = t.affine(hx, hw, hb)
    grads = t.backward(out, seed=probe)
    for h, arr in ((hx, X), (hw, W), (hb, b)):
        assert rel_err(grads[h], central_diff(f, arr)) < 1e-6


def test_relu_values_and_gate():
    t = Tape()
    x = t.leaf([[-1.0, 2.0, 3.0, -3.0]])
    y = t.relu(x)
    np.testing.assert_array_equal(t.value(y), [[0.0, 2.0, 3.0, 0.0]])
    g = t.backward(y)[x]
    np.testing.assert_array_equal(g, [[0.0, 1.0, 1.0, 0.0]])


def test_relu_subgradient_at_zero():
    t = Tape()
    x = t.leaf([[0.0]])
    assert t.backward(t.relu(x))[x][0, 0] == 0.0


def test_relu_finite_difference_away_from_kink():
    rng = np.random.default_rng(1)
    X = rng.uniform(0.1, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    probe = rng.normal(size=X.shape)
    t = Tape()
    hx = t.leaf(X)
    g = t.backward(t.relu(hx), seed=probe)[hx]
    num = central_diff(lambda: float(np.sum(np.maximum(X, 0) * probe)), X)
    assert rel_err(g, num) < 1e-6


class TestScatterSum:
    def test_sum(self):
        out = scatter_sum(np.array([[1.0, 2.0], [3.0, 4.0]]), [0, 0], 2)
        np.testing.assert_array_equal(out, [[4.0, 6.0], [0.0, 0.0]])

    def test_empty(self):
        out = scatter_sum(np.zeros((0, 3)), np.zeros(0, dtype=int), 4)
        np.testing.assert_array_equal(out, np.zeros((4, 3)))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        m = rng.normal(size=(10, 3))
        ids = rng.integers(0, 4, size=10)
        perm = rng.permutation(10)
        np.testing.assert_allclose(scatter_sum(m, ids, 4), scatter_sum(m[perm], ids[perm], 4), atol=1e-15)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            scatter_sum(np.ones((1, 2)), [3], 3)

    def test_adjoint_dot_product(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(12, 3))
        ids = rng.integers(0, 5, size=12)
        y = rng.normal(size=(5, 3))
        t = Tape()
        hx = t.leaf(x)
        out = t.scatter_sum(hx, ids, 5)
        aty = t.backward(out, seed=y)[hx]
        assert abs(np.sum(t.value(out) * y) - np.sum(x * aty)) < 1e-12


class TestL1:
    def test_zero(self):
        t = Tape()
        p = t.leaf([[1.0, 2.0]])
        loss = t.l1_loss(p, [[1.0, 2.0]])
        assert t.value(loss)[0, 0] == 0.0
        np.testing.assert_array_equal(t.backward(loss)[p], 0.0)

    def test_unit(self):
        t = Tape()
        p = t.leaf([[1.0]])
        loss = t.l1_loss(p, [[0.0]])
        assert t.value(loss)[0, 0] == 1.0
        np.testing.assert_array_equal(t.backward(loss)[p], [[1.0]])

    def test_finite_difference(self):
        rng = np.random.default_rng(4)
        P = rng.normal(size=(5, 3))
        T = P + rng.uniform(0.1, 1.0, size=P.shape) * rng.choice([-1, 1], size=P.shape)
        t = Tape()
        hp = t.leaf(P)
        g = t.backward(t.l1_loss(hp, T))[hp]
        num = central_diff(lambda: float(np.mean(np.abs(P - T))), P)
        assert rel_err(g, num) < 1e-5

    def test_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError):
            t.l1_loss(t.leaf(np.ones((2, 2))), np.ones((2, 3)))


def test_add_and_concat_gradients():
    rng = np.random.default_rng(5)
    A, B, C = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 1))
    probe = rng.normal(size=(3, 3))
    t = Tape()
    ha, hb, hc = t.leaf(A), t.leaf(B), t.leaf(C)
    out = t.concat(t.add(ha, hb), hc)
    g = t.backward(out, seed=probe)
    np.testing.assert_array_equal(g[ha], probe[:, :2])
    np.testing.assert_array_equal(g[hb], probe[:, :2])
    np.testing.assert_array_equal(g[hc], probe[:, 2:])


def test_forward_deterministic():
    rng = np.random.default_rng(6)
    X, W, b = rng.normal(size=(50, 8)), rng.normal(size=(8, 8)), rng.normal(size=(1, 8))

    def run():
        t = Tape()
        return t.value(t.relu(t.affine(t.leaf(X), t.leaf(W), t.leaf(b))))

    np.testing.assert_array_equal(run(), run())
