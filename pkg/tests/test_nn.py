import numpy as np
import pytest

from balm.nn import (
    AdamState,
    Mlp,
    MlpGrads,
    adam_init,
    adam_step,
    copy_params,
    load_arrays,
    load_mlp,
    mlp_backward,
    mlp_copy,
    mlp_forward,
    mlp_forward_cached,
    mlp_init,
    mlp_train_step,
    mse_loss,
    polyak_update,
    save_arrays,
    save_mlp,
)


def loop_forward(net, x):
    """Reference forward pass with explicit python loops."""
    outs = []
    for row in np.atleast_2d(x):
        h = [float(v) for v in row]
        for k in range(net.num_layers):
            w, b = net.weights[k], net.biases[k]
            nxt = []
            for j in range(w.shape[1]):
                s = float(b[j]) + sum(h[i] * w[i, j] for i in range(w.shape[0]))
                if k < net.num_layers - 1:
                    s = max(s, 0.0)
                nxt.append(s)
            h = nxt
        outs.append(h)
    return np.array(outs)


def flatten_params(net):
    return np.concatenate([w.ravel() for w in net.weights] + [b.ravel() for b in net.biases])


class TestInit:
    def test_fan_in_uniform_bounds(self):
        net = mlp_init([64, 32, 4], seed_or_rng=0)
        assert np.max(np.abs(net.weights[0])) <= 1.0 / 8.0
        assert np.max(np.abs(net.weights[1])) <= 1.0 / np.sqrt(32.0)
        # bound should be nearly attained for this many draws
        assert np.max(np.abs(net.weights[0])) > 0.9 / 8.0
        assert all(np.all(b == 0.0) for b in net.biases)

    def test_seeded_reproducibility(self):
        a = mlp_init([4, 8, 2], seed_or_rng=3)
        b = mlp_init([4, 8, 2], seed_or_rng=3)
        c = mlp_init([4, 8, 2], seed_or_rng=4)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)
        assert any(np.any(wa != wc) for wa, wc in zip(a.weights, c.weights))

    def test_rejects_bad_widths(self):
        with pytest.raises(ValueError):
            mlp_init([4])
        with pytest.raises(ValueError):
            mlp_init([4, 0, 2])


class TestForward:
    def test_matches_loop_reference(self):
        net = mlp_init([3, 5, 4, 2], seed_or_rng=1)
        x = np.random.default_rng(2).normal(0, 2, (6, 3))
        fast = mlp_forward(net, x)
        slow = loop_forward(net, x)
        np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-14)

    def test_single_sample_shape(self):
        net = mlp_init([3, 4, 2], seed_or_rng=0)
        out = mlp_forward(net, np.zeros(3))
        assert out.shape == (1, 2)

    def test_relu_gates_hidden_layer(self):
        net = Mlp(
            widths=[1, 1, 1],
            weights=[np.array([[1.0]]), np.array([[1.0]])],
            biases=[np.zeros(1), np.zeros(1)],
        )
        assert mlp_forward(net, [[-3.0]])[0, 0] == 0.0
        assert mlp_forward(net, [[2.0]])[0, 0] == 2.0

    def test_output_layer_is_linear(self):
        net = Mlp(
            widths=[1, 1],
            weights=[np.array([[2.0]])],
            biases=[np.array([1.0])],
        )
        assert mlp_forward(net, [[-3.0]])[0, 0] == -5.0

    def test_rejects_width_mismatch(self):
        net = mlp_init([3, 2], seed_or_rng=0)
        with pytest.raises(ValueError):
            mlp_forward(net, np.zeros((1, 4)))

    def test_cached_matches_plain(self):
        net = mlp_init([3, 5, 2], seed_or_rng=5)
        x = np.random.default_rng(0).normal(0, 1, (4, 3))
        plain = mlp_forward(net, x)
        cached, acts = mlp_forward_cached(net, x)
        np.testing.assert_array_equal(plain, cached)
        assert len(acts) == 3
        np.testing.assert_array_equal(acts[0], x)


class TestBackward:
    def test_gradients_match_finite_differences(self):
        net = mlp_init([3, 5, 2], seed_or_rng=7)
        rng = np.random.default_rng(8)
        x = rng.normal(0, 1, (4, 3))
        target = rng.normal(0, 1, (4, 2))

        pred, cache = mlp_forward_cached(net, x)
        _, grad_out = mse_loss(pred, target)
        grads, grad_x = mlp_backward(net, cache, grad_out)

        h = 1e-6

        def loss_at(net_like, x_like):
            p = mlp_forward(net_like, x_like)
            return mse_loss(p, target)[0]

        for layer in range(net.num_layers):
            for arr, garr in ((net.weights[layer], grads.weights[layer]),
                              (net.biases[layer], grads.biases[layer])):
                flat = arr.reshape(-1)
                gflat = garr.reshape(-1)
                for idx in range(flat.size):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    up = loss_at(net, x)
                    flat[idx] = orig - h
                    down = loss_at(net, x)
                    flat[idx] = orig
                    fd = (up - down) / (2 * h)
                    assert abs(gflat[idx] - fd) / max(abs(fd), 1e-3) < 1e-5

        xflat = x.reshape(-1)
        gx = grad_x.reshape(-1)
        for idx in range(xflat.size):
            orig = xflat[idx]
            xflat[idx] = orig + h
            up = loss_at(net, x)
            xflat[idx] = orig - h
            down = loss_at(net, x)
            xflat[idx] = orig
            fd = (up - down) / (2 * h)
            assert abs(gx[idx] - fd) / max(abs(fd), 1e-3) < 1e-5

    def test_mse_frozen(self):
        loss, grad = mse_loss(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]]))
        assert loss == 2.5
        np.testing.assert_array_equal(grad, [[1.0, 2.0]])


class TestAdam:
    def test_hand_computed_updates(self):
        net = Mlp(widths=[1, 1], weights=[np.array([[1.0]])], biases=[np.array([0.5])])
        state = adam_init(net)
        g1 = MlpGrads(weights=[np.array([[0.3]])], biases=[np.array([-0.2])])
        g2 = MlpGrads(weights=[np.array([[-0.1]])], biases=[np.array([0.4])])

        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        w, bias = 1.0, 0.5
        m_w = v_w = m_b = v_b = 0.0
        for t, (gw, gb) in enumerate([(0.3, -0.2), (-0.1, 0.4)], start=1):
            m_w = b1 * m_w + (1 - b1) * gw
            v_w = b2 * v_w + (1 - b2) * gw * gw
            m_b = b1 * m_b + (1 - b1) * gb
            v_b = b2 * v_b + (1 - b2) * gb * gb
            w -= lr * (m_w / (1 - b1**t)) / (np.sqrt(v_w / (1 - b2**t)) + eps)
            bias -= lr * (m_b / (1 - b1**t)) / (np.sqrt(v_b / (1 - b2**t)) + eps)

        adam_step(net, g1, state, lr=lr)
        adam_step(net, g2, state, lr=lr)
        np.testing.assert_allclose(net.weights[0][0, 0], w, rtol=1e-14)
        np.testing.assert_allclose(net.biases[0][0], bias, rtol=1e-14)
        assert state.step == 2

    def test_zero_loss_is_a_fixed_point(self):
        net = mlp_init([2, 6, 1], seed_or_rng=3)
        adam = adam_init(net)
        x = np.random.default_rng(0).normal(0, 1, (5, 2))
        y = mlp_forward(net, x)
        before = flatten_params(net).copy()
        loss = mlp_train_step(net, adam, x, y)
        assert loss == 0.0
        np.testing.assert_array_equal(flatten_params(net), before)

    def test_regression_learns(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (32, 1))
        y = np.sin(2.0 * x)
        net = mlp_init([1, 32, 1], seed_or_rng=0)
        adam = adam_init(net)
        first = mlp_train_step(net, adam, x, y, lr=1e-2)
        last = first
        for _ in range(300):
            last = mlp_train_step(net, adam, x, y, lr=1e-2)
        assert last < first / 10.0


class TestTargetHelpers:
    def test_copy_params_is_exact(self):
        a = mlp_init([3, 4, 2], seed_or_rng=0)
        b = mlp_init([3, 4, 2], seed_or_rng=1)
        copy_params(b, a)
        np.testing.assert_array_equal(flatten_params(a), flatten_params(b))
        # storage stays separate
        b.weights[0][0, 0] += 1.0
        assert a.weights[0][0, 0] != b.weights[0][0, 0]

    def test_polyak_limits(self):
        a = mlp_init([3, 4, 2], seed_or_rng=0)
        b = mlp_init([3, 4, 2], seed_or_rng=1)
        frozen = flatten_params(b).copy()
        polyak_update(b, a, tau=0.0)
        np.testing.assert_array_equal(flatten_params(b), frozen)
        polyak_update(b, a, tau=1.0)
        np.testing.assert_allclose(flatten_params(b), flatten_params(a), rtol=1e-15)

    def test_polyak_blend(self):
        a = Mlp(widths=[1, 1], weights=[np.array([[2.0]])], biases=[np.array([0.0])])
        b = Mlp(widths=[1, 1], weights=[np.array([[1.0]])], biases=[np.array([1.0])])
        polyak_update(b, a, tau=0.25)
        assert b.weights[0][0, 0] == 1.25
        assert b.biases[0][0] == 0.75

    def test_mlp_copy_is_deep(self):
        a = mlp_init([2, 3, 1], seed_or_rng=0)
        b = mlp_copy(a)
        b.weights[0][0, 0] += 1.0
        assert a.weights[0][0, 0] != b.weights[0][0, 0]


class TestCheckpoints:
    def test_round_trip_is_bitwise(self, tmp_path):
        net = mlp_init([4, 8, 3], seed_or_rng=9)
        path = tmp_path / "net.ckpt"
        save_mlp(path, net, meta={"note": "x"})
        loaded, meta = load_mlp(path)
        assert meta["widths"] == [4, 8, 3]
        assert meta["note"] == "x"
        np.testing.assert_array_equal(flatten_params(loaded), flatten_params(net))

    def test_repeated_saves_are_byte_identical(self, tmp_path):
        net = mlp_init([4, 8, 3], seed_or_rng=9)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_mlp(p1, net)
        save_mlp(p2, net)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"NOTME123" + b"\x00" * 32)
        with pytest.raises(ValueError):
            load_arrays(path)

    def test_truncated_file_rejected(self, tmp_path):
        net = mlp_init([4, 8, 3], seed_or_rng=9)
        path = tmp_path / "net.ckpt"
        save_mlp(path, net)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 16])
        with pytest.raises(ValueError):
            load_arrays(path)

    def test_generic_arrays_round_trip(self, tmp_path):
        arrays = {
            "a": np.arange(6.0).reshape(2, 3),
            "b": np.array(4.0),
        }
        path = tmp_path / "arrays.ckpt"
        save_arrays(path, {"k": [1, 2]}, arrays)
        meta, back = load_arrays(path)
        assert meta == {"k": [1, 2]}
        np.testing.assert_array_equal(back["a"], arrays["a"])
        assert back["b"].shape == ()
        assert float(back["b"]) == 4.0

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "raw.ckpt"
        save_arrays(path, {"kind": "other"}, {"x": np.zeros(2)})
        with pytest.raises(ValueError):
            load_mlp(path)
