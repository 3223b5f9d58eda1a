import numpy as np
import pytest

from pptac import autodiff as ad
from pptac import checkpoint


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / scale


# -- forward values --------------------------------------------------------


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = ad.matmul(ad.tensor(np.eye(3)), ad.tensor(a))
    assert np.allclose(out.data, a)


def test_mse_self_is_zero():
    x = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert ad.mse(x, x).item() == 0.0


def test_softmax_symmetry():
    out = ad.softmax(ad.tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5])


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.tensor(np.zeros((2, 3))), ad.tensor(np.zeros((2, 3))))


def test_mse_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.mse(ad.tensor(np.zeros(3)), ad.tensor(np.zeros(4)))


# -- backward ---------------------------------------------------------------


def test_square_gradient():
    x = ad.parameter(3.0)
    ad.backward(x * x)
    assert np.allclose(x.grad, 6.0)


def test_gradient_of_constant_is_none():
    x = ad.parameter(np.ones(4))
    c = ad.tensor(np.full(4, 2.0))
    ad.backward((x * 0.0 + c).sum())
    assert np.allclose(x.grad, 0.0)


def test_non_scalar_root_rejected():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.backward(x * 2.0)


def test_nan_root_rejected():
    x = ad.parameter(np.array(0.0))
    with np.errstate(invalid="ignore"):
        bad = x / x
    with pytest.raises(ad.NonFiniteError):
        ad.backward(bad)


def test_mse_linear_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    w = ad.parameter(rng.normal(size=(8, 8)))
    x = ad.tensor(rng.normal(size=(8, 8)))
    y = ad.tensor(rng.normal(size=(8, 8)))

    def loss(wt):
        return ad.mse(ad.matmul(wt, x), y)

    ad.backward(loss(w))
    fd = ad.finite_difference_gradient(loss, [w])[0]
    assert rel_err(w.grad, fd) < 1e-4


def test_backward_deterministic():
    rng = np.random.default_rng(2)
    vals = rng.normal(size=(5, 5))

    def run():
        w = ad.parameter(vals.copy())
        loss = ad.mse(ad.tanh(ad.matmul(w, w)), ad.tensor(np.zeros((5, 5))))
        ad.backward(loss)
        return w.grad

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


# Randomized finite-difference sweep: >= 20 instances per op family.

OP_FAMILIES = {
    "add": lambda a, b: (a + b).sum(),
    "sub": lambda a, b: (a - b).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "matmul": lambda a, b: ad.matmul(a, b.swapaxes(0, 1)).sum(),
    "tanh": lambda a, b: ad.tanh(a + b).sum(),
    "sin": lambda a, b: ad.sin(a * b).sum(),
    "cos": lambda a, b: ad.cos(a - b).sum(),
    "exp": lambda a, b: ad.exp(a * 0.3 + b * 0.1).sum(),
    "sqrt": lambda a, b: ad.sqrt(a * a + b * b + 0.5).sum(),
    "softmax": lambda a, b: (ad.softmax(a + b) * ad.tensor(np.arange(a.shape[-1], dtype=float))).sum(),
    "mse": lambda a, b: ad.mse(a, b),
    "sum_mean": lambda a, b: (a.sum(axis=0) * b.mean(axis=0)).sum(),
    "reshape_swap": lambda a, b: (a.reshape(a.size) * b.swapaxes(0, 1).reshape(b.size)).sum(),
    "getitem": lambda a, b: (a[1:, :2] * b[1:, :2]).sum(),
    "concat": lambda a, b: (ad.concat([a, b], axis=0) ** 2).sum(),
    "stack": lambda a, b: (ad.stack([a, b], axis=0) ** 3).sum(),
    "pow": lambda a, b: ((a * a + b * b) ** 1.5).sum(),
}


@pytest.mark.parametrize("name", sorted(OP_FAMILIES))
def test_finite_difference_sweep(name):
    fn = OP_FAMILIES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(20):
        a = ad.parameter(rng.normal(size=(4, 3)))
        b = ad.parameter(rng.normal(size=(4, 3)))
        ad.backward(fn(a, b))
        fd_a, fd_b = ad.finite_difference_gradient(fn, [a, b])
        assert rel_err(a.grad, fd_a) < 1e-4
        assert rel_err(b.grad, fd_b) < 1e-4


def test_layer_norm_gradients():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = ad.parameter(rng.normal(size=(3, 6)))
        gain = ad.parameter(rng.normal(size=6) + 1.5)
        bias = ad.parameter(rng.normal(size=6))

        def fn(xt, gt, bt):
            return (ad.layer_norm(xt, gt, bt) * ad.tensor(rng2)).sum()

        rng2 = rng.normal(size=(3, 6))
        ad.backward(fn(x, gain, bias))
        fds = ad.finite_difference_gradient(fn, [x, gain, bias])
        for got, want in zip([x.grad, gain.grad, bias.grad], fds):
            assert rel_err(got, want) < 1e-4


def test_batched_matmul_gradients():
    rng = np.random.default_rng(8)
    a = ad.parameter(rng.normal(size=(5, 2, 3)))
    b = ad.parameter(rng.normal(size=(5, 3, 4)))

    def fn(at, bt):
        return (ad.matmul(at, bt) ** 2).sum()

    ad.backward(fn(a, b))
    fd_a, fd_b = ad.finite_difference_gradient(fn, [a, b])
    assert rel_err(a.grad, fd_a) < 1e-4
    assert rel_err(b.grad, fd_b) < 1e-4


def test_broadcast_add_gradients():
    rng = np.random.default_rng(9)
    a = ad.parameter(rng.normal(size=(4, 3)))
    b = ad.parameter(rng.normal(size=(3,)))

    def fn(at, bt):
        return ((at + bt) ** 2).sum()

    ad.backward(fn(a, b))
    fd_a, fd_b = ad.finite_difference_gradient(fn, [a, b])
    assert rel_err(a.grad, fd_a) < 1e-4
    assert rel_err(b.grad, fd_b) < 1e-4


# -- optimizers --------------------------------------------------------------


def test_sgd_single_step():
    p = ad.parameter(1.0)
    p.grad = np.array(2.0)
    ad.SGD([p], lr=0.1).step()
    assert np.allclose(p.data, 0.8)
    assert p.grad is None


def test_adam_zero_grad_keeps_param():
    p = ad.parameter(np.ones(3))
    p.grad = np.zeros(3)
    ad.Adam([p], lr=0.1).step()
    assert np.allclose(p.data, 1.0)


def test_sgd_converges_to_quadratic_minimum():
    p = ad.parameter(0.0)
    opt = ad.SGD([p], lr=0.1)
    for _ in range(200):
        diff = p - 5.0
        ad.backward(diff * diff)
        opt.step()
    assert abs(p.data - 5.0) < 1e-3


def test_missing_grad_raises():
    p = ad.parameter(1.0)
    with pytest.raises(ValueError):
        ad.SGD([p], lr=0.1).step()


def test_bad_learning_rate_rejected():
    with pytest.raises(ValueError):
        ad.SGD([ad.parameter(1.0)], lr=0.0)


# -- checkpoint round trip ----------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    arrays = {
        "enc.w": rng.normal(size=(4, 7)).astype(np.float32),
        "enc.b": rng.normal(size=7),
        "scalar": np.array(3.5),
    }
    path = tmp_path / "model.ptck"
    checkpoint.save(path, arrays, meta={"config_hash": "abc123", "step": 7})
    loaded, meta = checkpoint.load(path)
    assert meta == {"config_hash": "abc123", "step": 7}
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert np.array_equal(loaded[k], arrays[k])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ptck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "absent.ptck")
