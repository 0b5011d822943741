import numpy as np
import pytest
import torch

from ctexplain.lamb import Lamb, LambHyper, LambState, NonFiniteGradientError, lamb_step

from oracles import lamb_reference


def _t(values):
    return torch.tensor(values, dtype=torch.float64)


def test_zero_gradient_is_pure_weight_decay():
    w = _t([1.0])
    lamb_step([w], [_t([0.0])], LambState(), LambHyper(), lr=3e-4)
    assert w.item() == pytest.approx(0.9997, abs=1e-15)


def test_hand_computed_step():
    w = _t([1.0])
    hyper = LambHyper(beta1=0.9, beta2=0.999, epsilon=1e-6, weight_decay=1.0)
    state = LambState()
    lamb_step([w], [_t([0.1])], state, hyper, lr=3e-4)
    u = 0.1 / (0.1 + 1e-6) + 1.0
    assert u == pytest.approx(1.99999, abs=1e-5)
    assert 1.0 / u == pytest.approx(0.500003, abs=1e-6)
    assert w.item() == pytest.approx(0.99970, abs=1e-12)
    assert state.step == 1
    np.testing.assert_allclose(state.m[0].numpy(), [0.01])
    np.testing.assert_allclose(state.v[0].numpy(), [1e-5])


def test_zero_weight_uses_unit_trust_ratio():
    w = torch.zeros(3, dtype=torch.float64)
    g = _t([0.5, -0.2, 0.1])
    lamb_step([w], [g], LambState(), LambHyper(), lr=1e-2)
    u = np.sign([0.5, -0.2, 0.1]) * np.abs([0.5, 0.2, 0.1]) / (np.abs([0.5, 0.2, 0.1]) + 1e-6)
    np.testing.assert_allclose(w.numpy(), -1e-2 * u, rtol=1e-12)


def test_random_tuples_match_reference():
    rng = np.random.default_rng(0)
    for _ in range(150):
        n = int(rng.integers(1, 6))
        t = int(rng.integers(1, 8))
        hyper = LambHyper(beta1=rng.uniform(0.5, 0.99), beta2=rng.uniform(0.9, 0.9999),
                          epsilon=10 ** rng.uniform(-8, -3), weight_decay=rng.choice([0.0, 0.01, 1.0]))
        lr = 10 ** rng.uniform(-5, -1)
        w0 = rng.normal(size=n).tolist()
        grads = [rng.normal(scale=10 ** rng.uniform(-3, 1), size=n).tolist() for _ in range(t)]
        expected = lamb_reference(w0, grads, hyper.beta1, hyper.beta2, hyper.epsilon, hyper.weight_decay, lr)

        w = _t(w0)
        state = LambState()
        for g in grads:
            lamb_step([w], [_t(g)], state, hyper, lr)
        np.testing.assert_allclose(w.numpy(), expected, rtol=0, atol=1e-10)


def test_trust_ratio_off_is_bias_corrected_adam():
    rng = np.random.default_rng(1)
    w0 = rng.normal(size=4).tolist()
    grads = [rng.normal(size=4).tolist() for _ in range(5)]
    expected = lamb_reference(w0, grads, 0.9, 0.999, 1e-6, 0.0, 1e-3, trust_ratio=False)
    w = _t(w0)
    state = LambState()
    hyper = LambHyper(weight_decay=0.0)
    for g in grads:
        lamb_step([w], [_t(g)], state, hyper, 1e-3, trust_ratio=False)
    np.testing.assert_allclose(w.numpy(), expected, atol=1e-12)


def test_trust_ratio_is_per_tensor():
    rng = np.random.default_rng(2)
    a0, b0 = rng.normal(size=3).tolist(), (10 * rng.normal(size=2)).tolist()
    ga, gb = rng.normal(size=3).tolist(), rng.normal(size=2).tolist()
    a, b = _t(a0), _t(b0)
    lamb_step([a, b], [_t(ga), _t(gb)], LambState(), LambHyper(), 1e-2)
    np.testing.assert_allclose(a.numpy(), lamb_reference(a0, [ga], 0.9, 0.999, 1e-6, 1.0, 1e-2), atol=1e-12)
    np.testing.assert_allclose(b.numpy(), lamb_reference(b0, [gb], 0.9, 0.999, 1e-6, 1.0, 1e-2), atol=1e-12)


def test_update_norm_scales_with_weight_norm():
    # with trust ratio, ||delta w|| = lr * ||w|| regardless of gradient scale
    rng = np.random.default_rng(3)
    for scale in (1e-3, 1.0, 1e3):
        w = _t(rng.normal(size=5) * 4)
        before = w.clone()
        lamb_step([w], [_t(rng.normal(size=5) * scale)], LambState(), LambHyper(), 1e-3)
        assert torch.linalg.vector_norm(w - before).item() == pytest.approx(1e-3 * before.norm().item(), rel=1e-10)


def test_non_finite_gradient_names_tensor():
    w = _t([1.0, 2.0])
    with pytest.raises(NonFiniteGradientError, match="head.weight"):
        lamb_step([w], [_t([1.0, float("nan")])], LambState(), LambHyper(), 1e-3, names=["head.weight"])
    np.testing.assert_array_equal(w.numpy(), [1.0, 2.0])


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        lamb_step([torch.zeros(2)], [torch.zeros(3)], LambState(), LambHyper(), 1e-3)


@pytest.mark.parametrize("kwargs", [{"beta1": 1.0}, {"beta2": 0.0}, {"epsilon": 0.0}, {"weight_decay": -1.0}])
def test_invalid_hyper(kwargs):
    with pytest.raises(ValueError):
        LambHyper(**kwargs)


def test_optimizer_wrapper_matches_functional():
    torch.manual_seed(0)
    net = torch.nn.Linear(4, 2).double()
    ref = [p.detach().clone() for p in net.parameters()]
    opt = Lamb(net.parameters(), LambHyper(base_lr=1e-2))
    state = LambState()
    x = torch.randn(8, 4, dtype=torch.float64)
    for _ in range(3):
        opt.zero_grad()
        net(x).pow(2).sum().backward()
        grads = [p.grad.clone() for p in net.parameters()]
        opt.step()
        lamb_step(ref, grads, state, LambHyper(), 1e-2)
    for p, r in zip(net.parameters(), ref):
        torch.testing.assert_close(p.detach(), r, rtol=0, atol=1e-14)
    assert opt.state_dict()["lamb"]["step"] == 3


@pytest.mark.parametrize("c", [0.1, 3.0, 250.0])
def test_trust_ratio_scaling_identity(c):
    # r(cw, cg) = c * r(w, g) * ||u(w, g)|| / ||u(cw, cg)||, with every quantity from the oracle's
    # update rule and the package's step recovered as r * u = (w - w') / lr
    rng = np.random.default_rng(int(c * 10))
    w, g = rng.normal(size=4), rng.normal(size=4)
    eps, lr = 1e-6, 1e-3

    def u_of(wv, gv):
        return gv / (np.abs(gv) + eps) + wv  # first step: m_hat = g, sqrt(v_hat) = |g|

    def r_of(wv, gv):
        return np.linalg.norm(wv) / np.linalg.norm(u_of(wv, gv))

    lhs = r_of(c * w, c * g)
    rhs = c * r_of(w, g) * np.linalg.norm(u_of(w, g)) / np.linalg.norm(u_of(c * w, c * g))
    assert lhs == pytest.approx(rhs, rel=1e-12)

    wt = _t((c * w).tolist())
    lamb_step([wt], [_t((c * g).tolist())], LambState(), LambHyper(epsilon=eps), lr)
    step = (c * w - wt.numpy()) / lr
    np.testing.assert_allclose(step, lhs * u_of(c * w, c * g), rtol=1e-9)
    # the adaptive part is (up to eps) insensitive to the gradient scale
    np.testing.assert_allclose(u_of(c * w, c * g) - c * w, u_of(w, g) - w, atol=1e-4)
