import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from graspref.errors import ChecksumError, ShapeMismatch
from graspref.nn import (LEAK, Adam, HyperNet, Mlp, Optimizer, TrainConfig, backward, forward, forward_flat,
                         hyper_backward, hyper_forward, load_checkpoint, n_params, save_checkpoint, sgd_step)
from graspref.recon import chamfer_grad
from scipy.spatial import cKDTree


def oracle_forward(sizes, theta, x):
    # straight-line recomputation, one layer at a time
    off = 0
    h = np.asarray(x, float)
    for k in range(len(sizes) - 1):
        i, o = sizes[k], sizes[k + 1]
        W = theta[off:off + o * i].reshape(o, i)
        off += o * i
        b = theta[off:off + o]
        off += o
        z = W @ h + b
        h = z if k == len(sizes) - 2 else np.maximum(z, 0) + LEAK * np.minimum(z, 0)
    return h


def fd_check(f, p, grad, rng, coords=50, h=1e-5, tol=1e-4):
    idx = rng.choice(len(p), size=min(coords, len(p)), replace=False)
    scale = np.abs(grad).max() + 1e-12
    for i in idx:
        e = np.zeros_like(p)
        e[i] = h
        fd = (f(p + e) - f(p - e)) / (2 * h)
        assert abs(fd - grad[i]) <= tol * max(abs(fd), abs(grad[i]), 1e-3 * scale), (i, fd, grad[i])


def test_zero_net_gives_zero():
    net = Mlp([4, 5, 3], params=np.zeros(n_params([4, 5, 3])))
    assert np.array_equal(forward(net, np.ones(4)), np.zeros(3))


def test_single_linear_layer():
    rng = np.random.default_rng(0)
    W, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4)
    net = Mlp([4, 3], params=np.concatenate([W.reshape(-1), b]))
    assert np.allclose(forward(net, x), W @ x + b, atol=1e-14)


def test_forward_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        net = Mlp([5, 7, 2], seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=5)
        assert np.abs(forward(net, x) - oracle_forward(net.layer_sizes, net.params, x)).max() <= 1e-12


def test_forward_shape_mismatch():
    net = Mlp([3, 2])
    with pytest.raises(ShapeMismatch):
        forward(net, np.zeros(4))
    with pytest.raises(ShapeMismatch):
        backward(net, np.zeros(3), np.zeros(3))
    with pytest.raises(ShapeMismatch):
        Mlp([3, 2], params=np.zeros(5))


def test_flatten_round_trip():
    net = Mlp([3, 4, 2], seed=2)
    back = Mlp.unflatten(net.layer_sizes, net.flatten())
    assert np.array_equal(back.params, net.params)
    x = np.ones(3)
    assert np.array_equal(forward(back, x), forward(net, x))


def test_linear_backward_reproduces_input():
    rng = np.random.default_rng(3)
    net = Mlp([4, 3], seed=3)
    x = rng.normal(size=4)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1
        pg, _ = backward(net, x, e)
        dW = pg[:12].reshape(3, 4)
        assert np.array_equal(dW[i], x)
        assert np.count_nonzero(np.delete(dW, i, axis=0)) == 0
        assert np.array_equal(pg[12:], e)


def test_zero_upstream_zero_grads():
    net = Mlp([4, 6, 2], seed=4)
    pg, dx = backward(net, np.ones(4), np.zeros(2))
    assert not pg.any() and not dx.any()


def test_backward_finite_differences():
    rng = np.random.default_rng(5)
    for case in range(40):
        sizes = [int(s) for s in rng.integers(1, 6, size=rng.integers(2, 5))]
        net = Mlp(sizes, seed=case)
        x = rng.normal(size=(3, sizes[0]))
        g = rng.normal(size=(3, sizes[-1]))
        pg, dx = backward(net, x, g)

        def f_params(p):
            return float(np.sum(g * forward(Mlp(sizes, p), x)))

        def f_input(xf):
            return float(np.sum(g * forward(net, xf.reshape(x.shape))))

        fd_check(f_params, net.params, pg, rng)
        fd_check(f_input, x.reshape(-1), dx.reshape(-1), rng)


def test_hyper_forward_zero_theta():
    h = HyperNet(Mlp([4, 8, n_params([3, 5, 3])], params=np.zeros(n_params([4, 8, n_params([3, 5, 3])]))), [3, 5, 3])
    assert np.array_equal(hyper_forward(h, np.ones(4), np.random.default_rng(0).normal(size=(10, 3))), np.zeros((10, 3)))


def test_hyper_forward_composition():
    rng = np.random.default_rng(6)
    template = [3, 3]
    W, b = rng.normal(size=(3, 3)), rng.normal(size=3)
    theta = np.concatenate([W.reshape(-1), b])
    # a linear hypernet whose bias alone emits the fixed theta
    sizes = [2, 12]
    params = np.concatenate([np.zeros(24), theta])
    h = HyperNet(Mlp(sizes, params), template)
    x = rng.normal(size=(5, 3))
    assert np.allclose(hyper_forward(h, rng.normal(size=2), x), x @ W.T + b, atol=1e-14)
    h = HyperNet.build(4, [3, 6, 3], hidden=(5,), seed=1, out_scale=1.0)
    obs = rng.normal(size=4)
    inner = Mlp([3, 6, 3], forward(h.mlp, obs))
    assert np.array_equal(hyper_forward(h, obs, x), forward(inner, x))


def test_hyper_backward_finite_differences():
    rng = np.random.default_rng(7)
    for case in range(10):
        h = HyperNet.build(4, [3, 5, 3], hidden=(6,), seed=case, out_scale=0.5)
        obs, x, g = rng.normal(size=4), rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
        pg, dx = hyper_backward(h, obs, x, g)

        def f(p):
            return float(np.sum(g * hyper_forward(HyperNet(Mlp(h.mlp.layer_sizes, p), h.template), obs, x)))

        fd_check(f, h.mlp.params, pg, rng)
        fd_check(lambda xf: float(np.sum(g * hyper_forward(h, obs, xf.reshape(x.shape)))), x.reshape(-1),
                 dx.reshape(-1), rng)


def test_hypernet_shape_check():
    with pytest.raises(ShapeMismatch):
        HyperNet(Mlp([2, 5]), [3, 3])


def test_sgd_examples():
    cfg = TrainConfig(learning_rate=0.1)
    p = np.array([0.3, -2.0])
    assert np.array_equal(sgd_step(p, np.zeros(2), cfg), p)
    assert np.allclose(sgd_step(np.zeros(2), np.ones(2), cfg), [-0.1, -0.1])
    with pytest.raises(ShapeMismatch):
        sgd_step(np.zeros(2), np.zeros(3), cfg)


def test_sgd_quadratic_bowl_descends():
    cfg = TrainConfig(learning_rate=0.1, optimizer="sgd")
    p = np.array([1.0, -2.0, 0.5])
    norms = [np.linalg.norm(p)]
    for _ in range(100):
        p = sgd_step(p, 2 * p, cfg)
        norms.append(np.linalg.norm(p))
    assert np.all(np.diff(norms) < 0)


def test_momentum_and_adam_descend():
    for cfg in (TrainConfig(learning_rate=0.05, optimizer="sgd", momentum=0.5),
                TrainConfig(learning_rate=0.05, optimizer="adam")):
        p = np.array([1.0, -2.0])
        opt = Optimizer(2, cfg)
        for _ in range(300):
            p = opt.step(p, 2 * p)
        assert np.linalg.norm(p) < 0.1


def test_adam_matches_textbook_update():
    rng = np.random.default_rng(8)
    p, adam = rng.normal(size=5), Adam(5, lr=0.01)
    m = v = np.zeros(5)
    q = p.copy()
    for t in range(1, 6):
        g = rng.normal(size=5)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        q = q - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        p = adam.step(p, g)
    assert np.allclose(p, q, atol=1e-12)


def test_zero_lr_leaves_params():
    opt = Optimizer(3, TrainConfig(learning_rate=0.0, weight_decay=1.0))
    p = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(opt.step(p, np.ones(3)), p)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)


def test_chamfer_gradient_finite_differences():
    rng = np.random.default_rng(9)
    for _ in range(20):
        pred, target = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        tree = cKDTree(target)
        _, g = chamfer_grad(pred, tree, target)
        fd_check(lambda q: chamfer_grad(q.reshape(5, 3), tree, target)[0], pred.reshape(-1), g.reshape(-1), rng,
                 coords=15, h=1e-7)


def test_checkpoint_round_trip_and_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    vecs = {"params": np.arange(5.0), "extra": np.array([1.5])}
    save_checkpoint(path, "demo", {"layers": [2, 1]}, vecs)
    kind, header, back = load_checkpoint(path)
    assert kind == "demo" and header["layers"] == [2, 1]
    assert np.array_equal(back["params"], vecs["params"]) and np.array_equal(back["extra"], vecs["extra"])
    blob = bytearray(path.read_bytes())
    blob[-10] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_training_trajectory_deterministic():
    def run():
        rng = np.random.default_rng(0)
        net = Mlp([3, 8, 2], seed=11)
        opt = Optimizer(net.n_params, TrainConfig(learning_rate=1e-2))
        X, Y = rng.normal(size=(32, 3)), rng.normal(size=(32, 2))
        for _ in range(20):
            pg, _ = backward(net, X, 2 * (forward(net, X) - Y) / 32)
            net.params = opt.step(net.params, pg)
        return net.params

    assert np.array_equal(run(), run())


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradients_random_nets(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(s) for s in rng.integers(1, 5, size=rng.integers(2, 4))]
    net = Mlp(sizes, seed=seed)
    x, g = rng.normal(size=(2, sizes[0])), rng.normal(size=(2, sizes[-1]))
    # central differences are meaningless across a leaky-relu kink
    _, cache = forward_flat(sizes, net.params, x, return_cache=True)
    assume(all(np.abs(z).min() > 1e-3 for z in cache[1:]))
    pg, dx = backward(net, x, g)
    fd_check(lambda p: float(np.sum(g * forward(Mlp(sizes, p), x))), net.params, pg, rng, coords=10)
    fd_check(lambda xf: float(np.sum(g * forward(net, xf.reshape(x.shape)))), x.reshape(-1), dx.reshape(-1), rng)


def test_lr_decay_schedule():
    cfg = TrainConfig(learning_rate=0.1, optimizer="sgd", lr_decay=0.5)
    opt = Optimizer(1, cfg)
    p = np.array([1.0])
    for e in range(4):
        opt.set_epoch(e)
        assert np.isclose(opt.lr, 0.1 * 0.5 ** e)
        q = opt.step(p, np.array([1.0]))
        assert np.isclose(p[0] - q[0], 0.1 * 0.5 ** e)
        p = q
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=0.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=1.5)
