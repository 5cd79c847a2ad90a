import numpy as np
import pytest

from panel_dml.dictionary import Direction
from panel_dml.errors import TrainingError
from panel_dml.learners import Design
from panel_dml.nnet import NNetLearner, celu, celu_grad, fit_nnet, loss_and_grads
from panel_dml.panel import within_transform

torch = pytest.importorskip("torch")


def grouped_design(fn, k=1, n_units=40, per_unit=5, seed=0):
    rng = np.random.default_rng(seed)
    n = n_units * per_unit
    X = rng.uniform(-1, 1, (n, k))
    unit = np.repeat(np.arange(n_units), per_unit)
    y = within_transform(fn(X), unit)
    return Design(X, unit, y, np.zeros((n, 0)), np.ones(n))


def test_zero_weight_network_is_constant():
    k, h = 3, 4
    net = NNetLearner(np.zeros(k), np.ones(k), np.zeros((k, h)), np.zeros(h), np.ones(h), np.zeros(h),
                      np.zeros(h), np.ones(h), np.zeros(h), 0.7, np.zeros(0))
    X = np.random.default_rng(0).normal(size=(5, k))
    np.testing.assert_allclose(net.predict(X), 0.7)
    assert not net.input_gradient(X).any()


def test_learns_known_linear_slope():
    design = grouped_design(lambda X: 2 * X[:, 0])
    net = fit_nnet(design, width=16, seed=1)
    assert net.diagnostics["final_loss"] < 1e-4
    assert net.directional(design.X, Direction.fixed([1.0])).mean() == pytest.approx(2.0, abs=0.05)


def test_gradient_matches_central_differences():
    design = grouped_design(lambda X: np.sin(2 * X[:, 0]) * X[:, 1] + X[:, 2] ** 2, k=3)
    net = fit_nnet(design, width=8, seed=2, epochs=200)
    rng = np.random.default_rng(3)
    for x in rng.uniform(-1, 1, (50, 3)):
        g = net.input_gradient(x)[0]
        h = 1e-5
        fd = np.array([(net.predict(x + h * e)[0] - net.predict(x - h * e)[0]) / (2 * h) for e in np.eye(3)])
        assert np.max(np.abs(fd - g)) / max(np.abs(g).max(), 1e-8) < 1e-4


def torch_eval_net(net):
    k, h = net.W.shape
    lin = torch.nn.Linear(k, h).double()
    bn = torch.nn.BatchNorm1d(h).double()
    out = torch.nn.Linear(h, 1).double()
    with torch.no_grad():
        lin.weight.copy_(torch.tensor(net.W.T))
        lin.bias.copy_(torch.tensor(net.b))
        bn.weight.copy_(torch.tensor(net.gamma))
        bn.bias.copy_(torch.tensor(net.beta))
        bn.running_mean.copy_(torch.tensor(net.running_mean))
        bn.running_var.copy_(torch.tensor(net.running_var))
        out.weight.copy_(torch.tensor(net.v[None, :]))
        out.bias.fill_(net.c)
    model = torch.nn.Sequential(lin, bn, torch.nn.CELU(), out).eval()
    return lambda X: model((torch.as_tensor(X) - torch.tensor(net.x_mean)) / torch.tensor(net.x_sd))[:, 0]


def test_inference_and_gradient_match_autograd():
    design = grouped_design(lambda X: X[:, 0] * X[:, 1], k=2)
    net = fit_nnet(design, width=6, seed=4, epochs=100)
    f = torch_eval_net(net)
    X = torch.tensor(np.random.default_rng(5).normal(size=(20, 2)), requires_grad=True)
    pred = f(X)
    pred.sum().backward()
    np.testing.assert_allclose(net.predict(X.detach().numpy()), pred.detach().numpy(), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(net.input_gradient(X.detach().numpy()), X.grad.numpy(), rtol=1e-10, atol=1e-12)


def test_training_gradients_match_autograd():
    rng = np.random.default_rng(6)
    n, k, h = 24, 3, 5
    xs = rng.normal(size=(n, k))
    unit = np.repeat(np.arange(6), 4)
    D = within_transform(rng.normal(size=(n, 2)), unit)
    y = within_transform(rng.normal(size=n), unit)
    wn = rng.uniform(0.5, 1.5, n)
    wn /= wn.sum()
    params = {"W": rng.normal(size=(k, h)), "b": rng.normal(size=h), "gamma": rng.uniform(0.5, 2, h),
              "beta": rng.normal(size=h), "v": rng.normal(size=h), "delta": rng.normal(size=2)}
    loss, grads, _, _ = loss_and_grads(params, xs, y, D, unit, wn)

    t = {key: torch.tensor(val, requires_grad=True) for key, val in params.items()}
    a = torch.tensor(xs) @ t["W"] + t["b"]
    z = t["gamma"] * (a - a.mean(0)) / torch.sqrt(a.var(0, unbiased=False) + 1e-5) + t["beta"]
    f = torch.nn.functional.celu(z) @ t["v"]
    onehot = torch.tensor((unit[:, None] == np.arange(6)[None, :]).astype(float))
    f_within = f - onehot @ (onehot.T @ f / onehot.sum(0))
    r = torch.tensor(y) - f_within - torch.tensor(D) @ t["delta"]
    tl = (torch.tensor(wn) * r * r).sum()
    tl.backward()
    assert loss == pytest.approx(tl.item(), rel=1e-12)
    for key in params:
        np.testing.assert_allclose(grads[key], t[key].grad.numpy(), rtol=1e-9, atol=1e-12)


def test_celu_matches_torch():
    z = np.linspace(-5, 5, 101)
    np.testing.assert_allclose(celu(z), torch.nn.functional.celu(torch.tensor(z)).numpy(), rtol=1e-14)
    zt = torch.tensor(z, requires_grad=True)
    torch.nn.functional.celu(zt).sum().backward()
    np.testing.assert_allclose(celu_grad(z), zt.grad.numpy(), rtol=1e-14)


def test_seeded_training_is_bit_reproducible():
    design = grouped_design(lambda X: X[:, 0] ** 2)
    a = fit_nnet(design, width=4, seed=9, epochs=50)
    b = fit_nnet(design, width=4, seed=9, epochs=50)
    assert a.to_dict() == b.to_dict()
    assert NNetLearner.from_dict(a.to_dict()).predict(design.X).tolist() == a.predict(design.X).tolist()


@pytest.mark.filterwarnings("ignore:invalid value")
def test_non_finite_loss_reports_seed_and_epoch():
    design = grouped_design(lambda X: X[:, 0])
    design.y[0] = np.inf
    with pytest.raises(TrainingError) as info:
        fit_nnet(design, width=2, seed=5, epochs=3)
    assert info.value.seed == 5 and info.value.epoch == 1
