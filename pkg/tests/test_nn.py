import numpy as np
import pytest

from remsched import ValidationError
from remsched.nn import (Adam, Mlp, ReplayMemory, adam_step, learning_rate, load_checkpoint,
                         save_checkpoint, sync_target)


def numeric_grads(f, params, h=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            fp = f()
            p[i] = old - h
            fm = f()
            p[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b)))


@pytest.mark.parametrize("sizes,act", [([6, 16, 16, 2], "identity"),   # Q-net (N=2, M=1, 2 actions)
                                       ([6, 16, 16, 2], "tanh"),       # actor
                                       ([8, 16, 16, 1], "identity")])  # critic (state + virtual action)
def test_gradients_match_central_differences(sizes, act):
    rng = np.random.default_rng(0)
    net = Mlp(sizes, act, rng=rng)
    x = rng.normal(size=(5, sizes[0]))
    w = rng.normal(size=(5, sizes[-1]))
    loss = lambda: float((w * net.forward(x)).sum() + 0.5 * (net.forward(x) ** 2).sum())  # noqa: E731
    out, cache = net.forward_train(x)
    grads, gx = net.backward(cache, w + out)
    for a, n in zip(grads, numeric_grads(loss, net.params)):
        assert rel_err(a, n) < 1e-4
    xs = [x]
    num_x = numeric_grads(loss, xs)[0]
    assert rel_err(gx, num_x) < 1e-4


def test_input_gradient_only():
    net = Mlp([3, 4, 1], rng=1)
    out, cache = net.forward_train(np.ones((2, 3)))
    grads, gx = net.backward(cache, np.ones_like(out), param_grads=False)
    assert grads is None and gx.shape == (2, 3)


def test_forward_shape_checks():
    net = Mlp([3, 4, 2], rng=0)
    assert net.forward(np.zeros(3)).shape == (1, 2)
    with pytest.raises(ValidationError):
        net.forward(np.zeros((2, 4)))
    with pytest.raises(ValidationError):
        Mlp([3], rng=0)


def test_adam_two_steps_by_hand():
    p = [np.array([1.0])]
    opt = Adam(p, lr=0.1)
    opt.step([np.array([0.5])])
    # first bias-corrected step has magnitude lr regardless of the gradient scale
    assert p[0][0] == pytest.approx(0.9, abs=1e-8)
    opt.step([np.array([-1.0])])
    m = 0.9 * 0.05 - 0.1
    v = 0.999 * 0.00025 + 0.001
    p1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
    expected = p1 - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert p[0][0] == pytest.approx(expected, rel=1e-12)
    assert p[0][0] == pytest.approx(0.936610, abs=1e-6)


def test_adam_rejects_zero_step():
    with pytest.raises(ValidationError):
        adam_step([np.zeros(1)], [np.zeros(1)], [np.zeros(1)], [np.zeros(1)], 0, 0.1)


def test_learning_rate_decay():
    assert learning_rate(1e-3, 0.001, 0) == 1e-3
    assert learning_rate(1e-3, 0.001, 1000) == pytest.approx(5e-4)


def test_sync_target_modes():
    a, b = Mlp([2, 2], rng=0), Mlp([2, 2], rng=1)
    for p in a.params:
        p[...] = 1.0
    for p in b.params:
        p[...] = 0.0
    sync_target(b, a, "soft", 0.005)
    assert np.all(b.params[0] == 0.005)
    sync_target(b, a, "soft", 0.5)
    assert np.allclose(b.params[0], 0.5025)
    sync_target(b, a, "hard")
    assert np.all(b.params[0] == 1.0)
    with pytest.raises(ValidationError):
        sync_target(Mlp([2, 3], rng=0), a)


def test_replay_memory_evicts_oldest_and_samples_distinct():
    mem = ReplayMemory(4, {"x": ((), np.int64)})
    for k in range(6):
        mem.push(x=k)
    assert len(mem) == 4
    assert int(mem.oldest()["x"]) == 2
    batch = mem.sample(4, np.random.default_rng(0))["x"]
    assert sorted(batch.tolist()) == [2, 3, 4, 5]
    with pytest.raises(ValidationError):
        mem.sample(5, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        mem.push(y=1)


def test_checkpoint_roundtrip(tmp_path):
    net = Mlp([3, 5, 2], "tanh", rng=3)
    save_checkpoint(net, tmp_path / "net.bin")
    back = load_checkpoint(tmp_path / "net.bin")
    assert back.same_architecture(net)
    for p, q in zip(net.params, back.params):
        np.testing.assert_array_equal(p, q)
    assert (tmp_path / "net.bin").stat().st_size == 8 * net.n_params
