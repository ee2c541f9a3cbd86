import numpy as np
import pytest

from fastcf import autodiff as ad
from fastcf.autodiff import CallCounter, Tensor
from fastcf.errors import ShapeError

from helpers import check_grad, fd_gradient, rel_err


def test_add_sub_mul_examples():
    assert np.array_equal((Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])).data, [4.0, 6.0])
    x = Tensor(np.random.default_rng(0).standard_normal(5).astype(np.float32))
    assert np.array_equal((x * 0.0).data, np.zeros(5, np.float32))
    assert np.array_equal((x - x).data, np.zeros(5, np.float32))


def test_elementwise_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros(3)) * Tensor(np.zeros(4))


def test_only_scalar_and_exact_shape_broadcasting():
    # (2, 3) against (3,) would broadcast in numpy; here it must be rejected
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(3))
    out = Tensor(np.ones((2, 3))) + 1.5
    assert np.all(out.data == 2.5)


def test_matmul_examples():
    eye = Tensor(np.eye(2, dtype=np.float32))
    m = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32))
    assert np.array_equal(ad.matmul(eye, m).data, m.data)
    out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.shape == (1, 1) and out.data[0, 0] == 11.0
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((4, 3)).astype(np.float32)
    b = rng.standard_normal((3, 5)).astype(np.float32)

    def f(arr):
        return float((arr.astype(np.float64) @ b.astype(np.float64)).sum())

    leaf = Tensor(a.copy(), requires_grad=True)
    ad.matmul(leaf, Tensor(b)).sum().backward()
    assert rel_err(leaf.grad, fd_gradient(f, a)) < 1e-3


def test_conv2d_identity_and_zero():
    x = Tensor(np.random.default_rng(2).standard_normal((1, 5, 5)).astype(np.float32))
    k = Tensor(np.ones((1, 1, 1, 1), np.float32))
    assert np.array_equal(ad.conv2d(x, k).data, x.data)
    kz = Tensor(np.random.default_rng(3).standard_normal((2, 1, 3, 3)).astype(np.float32))
    out = ad.conv2d(Tensor(np.zeros((1, 6, 6), np.float32)), kz, padding=1)
    assert np.array_equal(out.data, np.zeros((2, 6, 6), np.float32))


def test_conv2d_matches_naive_oracle():
    from helpers import naive_conv2d

    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 8, 8)).astype(np.float32)
    k = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    for stride, padding in ((1, 0), (1, 1), (2, 1)):
        got = ad.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
        want = naive_conv2d(x, k, stride=stride, padding=padding)
        assert got.shape == want.shape
        assert np.abs(got - want).max() < 1e-4


def test_conv2d_output_extent_and_errors():
    x = Tensor(np.zeros((1, 7, 7), np.float32))
    k = Tensor(np.zeros((1, 1, 3, 3), np.float32))
    assert ad.conv2d(x, k, stride=2, padding=1).data.shape == (1, 4, 4)
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 2, 2), np.float32)), k)  # kernel larger than input
    with pytest.raises(ShapeError):
        ad.conv2d(x, Tensor(np.zeros((1, 1, 4, 4), np.float32)))  # even kernel


def test_backward_examples():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    y = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    (y * y).sum().backward()
    assert np.array_equal(y.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_fanout_accumulates():
    x = Tensor(np.array([3.0], np.float32), requires_grad=True)
    (x + x).sum().backward()
    assert x.grad[0] == 2.0


def test_mlp_param_grads_match_finite_differences():
    rng = np.random.default_rng(5)
    w1 = rng.standard_normal((3, 8)).astype(np.float32)
    w2 = rng.standard_normal((8, 2)).astype(np.float32)
    x = rng.standard_normal((4, 3)).astype(np.float32)

    def run(w1a, w2a):
        h = np.maximum(x.astype(np.float64) @ w1a.astype(np.float64), 0.0)
        return float((h @ w2a.astype(np.float64)).sum())

    t1 = Tensor(w1.copy(), requires_grad=True)
    t2 = Tensor(w2.copy(), requires_grad=True)
    ad.matmul(ad.relu(ad.matmul(Tensor(x), t1)), t2).sum().backward()
    assert rel_err(t1.grad, fd_gradient(lambda a: run(a, w2), w1)) < 1e-3
    assert rel_err(t2.grad, fd_gradient(lambda a: run(w1, a), w2)) < 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients_ten_seeds(seed):
    rng = np.random.default_rng(seed)
    x = (rng.standard_normal((3, 4)) + 0.05).astype(np.float32)  # keep clear of kinks
    k = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    img = rng.standard_normal((3, 6, 6)).astype(np.float32)
    c1 = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    c2 = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    ops = [
        lambda t: t + c1,
        lambda t: t - 1.25,
        lambda t: t * c2,
        lambda t: -t,
        lambda t: t / 3.0,
        lambda t: t.sum(),
        lambda t: t.mean(),
        lambda t: t.abs(),
        ad.relu,
        ad.leaky_relu,
        ad.log_softmax,
        lambda t: t.reshape(4, 3),
        lambda t: ad.take_rows(t, np.array([0, 2, 2])),
        lambda t: ad.pick(t, np.array([1, 0, 3])),
    ]
    for op in ops:
        assert check_grad(op, x, rng) < 1e-3
    assert check_grad(lambda t: ad.conv2d(t, Tensor(k), padding=1), img, rng) < 1e-3
    vec = rng.standard_normal(5).astype(np.float32)
    assert check_grad(lambda t: ad.expand_vector(t, (4, 5), 1), vec, rng) < 1e-3
    nc = rng.standard_normal((2, 3)).astype(np.float32)
    assert check_grad(lambda t: ad.expand_hw(t, (2, 3, 4, 4)), nc, rng) < 1e-3


def test_backward_linearity():
    rng = np.random.default_rng(11)
    x0 = rng.standard_normal(6).astype(np.float32)
    alpha, beta = 0.7, -1.3

    def grads(scale1, scale2):
        x = Tensor(x0.copy(), requires_grad=True)
        loss = (x * x).sum() * scale1 + x.abs().mean() * scale2
        loss.backward()
        return x.grad.copy()

    g1 = grads(1.0, 0.0)
    g2 = grads(0.0, 1.0)
    combined = grads(alpha, beta)
    assert np.abs(combined - (alpha * g1 + beta * g2)).max() < 1e-5


def test_tape_replay_bit_identical():
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
    loss = ad.log_softmax(ad.matmul(ad.relu(x), w)).sum()
    loss.backward()
    gx, gw = x.grad.copy(), w.grad.copy()
    x.zero_grad(), w.zero_grad()
    loss.backward()
    assert np.array_equal(x.grad, gx) and np.array_equal(w.grad, gw)


def test_leaf_grads_accumulate_across_backwards():
    x = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    assert np.array_equal(x.grad, [4.0, 8.0])


def test_values_stay_finite_on_finite_inputs():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((8, 8)).astype(np.float32) * 50.0, requires_grad=True)
    out = ad.log_softmax(ad.relu(x) * 0.25 - 1.0)
    assert np.all(np.isfinite(out.data))
    out.sum().backward()
    assert np.all(np.isfinite(x.grad))


def test_backward_counter_marks_reverse_passes():
    counter = CallCounter()
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    out = ad.count_backward(x * 2.0, counter)
    out.sum().backward()
    assert counter.backward == 1
    # untracked tensors skip the marker entirely
    y = ad.count_backward(Tensor(np.ones(3, np.float32)) * 2.0, counter)
    assert y._vjp is None
