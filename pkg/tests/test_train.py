import csv
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from weakdyn.errors import NonFiniteLoss
from weakdyn.estimator1d import euler_truncation
from weakdyn.genericnet import GenericModel
from weakdyn.testfn import bump_functions, place_supports
from weakdyn.train import (AdamState, LinearModel, RbaState, TrainConfig, TrainingProblem, adamw_step, lr_at,
                           rba_update, residual_vector, train)
from weakdyn.trajectory import (TimeGrid, TrajectoryDataset, add_noise, damped_oscillator_benchmark,
                                generate_dataset, linear_solution, sample_oscillator_states)


def linear_dataset(lam=-2.0, dt=0.02, K=50, n=2):
    grid = TimeGrid(0.0, dt, K)
    t = grid.points()
    trajs = np.stack([linear_solution(lam, 1.0 + 0.5 * i, t) for i in range(n)])[..., None]
    return TrajectoryDataset(grid, trajs)


def oscillator_dataset(n=3, K=40, dt=0.05, seed=0):
    sysm = damped_oscillator_benchmark()
    x0 = sample_oscillator_states(n, np.random.default_rng(seed))
    return generate_dataset(sysm, x0, TimeGrid(0, dt, K), rtol=1e-10, atol=1e-12)


class TestRba:
    def test_example(self):
        out = rba_update(RbaState(np.ones(2), 0.99, 0.01), [2.0, 1.0])
        np.testing.assert_allclose(out.lam, [1.0, 0.995], rtol=0, atol=1e-15)

    def test_zero_residual(self):
        out = rba_update(RbaState(np.array([1.0, 2.0]), 0.9, 0.5), [0.0, 0.0])
        np.testing.assert_array_equal(out.lam, [0.9, 1.8])

    def test_disabled_is_identity(self):
        st_ = RbaState.ones(3)
        rng = np.random.default_rng(0)
        for _ in range(100):
            st_ = rba_update(st_, rng.uniform(0, 5, 3), rng.uniform(0.1, 3, 3))
        assert np.array_equal(st_.lam, np.ones(3))

    def test_weights_enter_as_square_root(self):
        out = rba_update(RbaState(np.zeros(2), 1.0, 1.0), [1.0, 1.0], [4.0, 1.0])
        np.testing.assert_allclose(out.lam, [1.0, 0.5])

    @given(st.integers(0, 2**31), st.floats(0.5, 0.999), st.floats(0, 1), st.integers(1, 200))
    @settings(max_examples=40, deadline=None)
    def test_geometric_bound(self, seed, gamma, eta, k):
        rng = np.random.default_rng(seed)
        st_ = RbaState.ones(3, gamma, eta)
        for _ in range(k):
            st_ = rba_update(st_, rng.uniform(0, 3, 3) * (rng.uniform() > 0.1), rng.uniform(0.1, 3, 3))
        bound = gamma ** k + eta * (1 - gamma ** k) / (1 - gamma)
        assert np.max(np.abs(st_.lam)) <= bound * (1 + 1e-12)

    @pytest.mark.parametrize("gamma,eta", [(0.0, 0.1), (1.5, 0.1), (0.9, -1.0)])
    def test_invalid(self, gamma, eta):
        with pytest.raises(ValueError):
            RbaState.ones(2, gamma, eta)


class TestSchedule:
    def test_examples(self):
        cfg = TrainConfig(lr=1e-3, decay_rate=0.1, decay_steps=5000)
        assert lr_at(0, cfg) == 1e-3 and lr_at(4999, cfg) == 1e-3
        assert lr_at(10000, cfg) == pytest.approx(1e-5, rel=1e-14)
        assert lr_at(123456, TrainConfig(lr=0.01)) == 0.01
        with pytest.raises(ValueError):
            lr_at(-1, cfg)

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(decay_rate=0.0), dict(decay_rate=1.5), dict(decay_steps=0),
                                    dict(loss="mixed"), dict(weighting="other")])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        p = torch.tensor([1.5, -2.0], dtype=torch.float64)
        st_ = AdamState.zeros_like([p])
        adamw_step([p], [torch.zeros(2, dtype=torch.float64)], st_, 1e-2)
        assert p.tolist() == [1.5, -2.0]

    def test_decoupled_decay(self):
        p = torch.tensor([1.5, -2.0], dtype=torch.float64)
        adamw_step([p], [torch.zeros(2, dtype=torch.float64)], AdamState.zeros_like([p]), 0.1, weight_decay=0.5)
        np.testing.assert_allclose(p.numpy(), np.array([1.5, -2.0]) * (1 - 0.05), rtol=1e-15)

    def test_first_step_hand_trace(self):
        g, lr, eps = 0.3, 1e-2, 1e-8
        p = torch.tensor([1.0], dtype=torch.float64)
        adamw_step([p], [torch.tensor([g], dtype=torch.float64)], AdamState.zeros_like([p]), lr)
        m_hat = (0.1 * g) / 0.1
        v_hat = (0.001 * g * g) / 0.001
        assert float(p) == pytest.approx(1.0 - lr * m_hat / (math.sqrt(v_hat) + eps), rel=1e-15)

    def test_matches_torch_optimizer(self):
        rng = np.random.default_rng(0)
        a = torch.tensor(rng.normal(size=5), dtype=torch.float64, requires_grad=True)
        b = a.detach().clone().requires_grad_(True)
        opt = torch.optim.AdamW([b], lr=3e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
        st_ = AdamState.zeros_like([a])
        for _ in range(200):
            ga = torch.autograd.grad(((a - 1) ** 4).sum(), [a])[0]
            adamw_step([a], [ga], st_, 3e-2, 0.1)
            opt.zero_grad()
            ((b - 1) ** 4).sum().backward()
            opt.step()
        np.testing.assert_allclose(a.detach().numpy(), b.detach().numpy(), rtol=1e-12, atol=1e-14)


class TestResidualVector:
    def test_perfect_model_noiseless(self):
        data = linear_dataset(K=200, dt=0.005)
        e_weak = residual_vector(LinearModel(-2.0), data, loss_kind="weak")
        e_strong = residual_vector(LinearModel(-2.0), data, loss_kind="strong")
        assert e_weak[0] < 1e-5
        # Euler one-step error |exp(lam dt) - 1 - lam dt| times the state
        assert e_strong[0] < 1e-4

    def test_weak_brute_force(self):
        data = linear_dataset(K=60, n=1)
        cfg = TrainConfig(loss="weak", ell=20, p=3, s=0.5)
        plan = place_supports(60, 20, 3, 0.5)
        fns = bump_functions(plan, data.grid)
        y = data.trajectories[0, :, 0]
        t = data.grid.points()
        h = data.grid.dt
        theta = -1.7
        ref = []
        for fn in fns:
            total = 0.0
            for q in range(1, 60):
                v, dv = fn.eval(t[q])
                total += h * dv * y[q] + h * v * theta * y[q]
            ref.append(abs(total))
        e = residual_vector(LinearModel(theta), data, loss_kind="weak", config=cfg)
        assert e[0] == pytest.approx(np.mean(ref), rel=1e-12)

    @pytest.mark.parametrize("kind", ["weak", "strong"])
    def test_homogeneous(self, kind):
        data = add_noise(linear_dataset(), 0.05, 1)
        c = 3.5
        scaled = TrajectoryDataset(data.grid, c * data.trajectories)
        a = residual_vector(LinearModel(-1.0), data, loss_kind=kind)
        b = residual_vector(LinearModel(-1.0), scaled, loss_kind=kind)
        np.testing.assert_allclose(b, c * a, rtol=1e-12)


class TestConfig:
    def test_dotted_and_nested_keys(self):
        a = TrainConfig.from_dict({"rba.eta_star": 0.01, "rba.gamma": 0.99, "testfn.ell": 30, "lr": 5e-4})
        b = TrainConfig.from_dict({"rba": {"eta_star": 0.01, "gamma": 0.99}, "testfn": {"ell": 30}, "lr": 5e-4})
        assert a == b
        assert (a.eta_star, a.gamma, a.ell, a.lr) == (0.01, 0.99, 30, 5e-4)

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            TrainConfig.from_dict({"rba.beta": 1})

    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig(lr=2e-3, loss="strong", batch_size=4)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert TrainConfig.from_json(path) == cfg


def weak_closed_form(data, cfg):
    prob = TrainingProblem.build(data, cfg)
    sys = prob.weak
    a = np.einsum("ndq,qj->ndj", sys.Y, sys.phi)
    b = np.einsum("ndq,qj->ndj", sys.Y, sys.dphi)
    return -float(np.sum(a * b) / np.sum(a * a))


class TestTrainLinear:
    CFG = dict(lr=0.05, decay_rate=0.5, decay_steps=150, iters=2500, weighting="identity")

    def test_weak_converges_to_closed_form(self):
        data = linear_dataset()
        cfg = TrainConfig(loss="weak", **self.CFG)
        model, hist = train(LinearModel(0.0), data, cfg)
        theta = float(model.theta.detach())
        assert abs(theta - weak_closed_form(data, cfg)) < 1e-6
        assert abs(theta + 2.0) < 1e-3

    def test_strong_converges_to_truncated_value(self):
        data = linear_dataset()
        cfg = TrainConfig(loss="strong", **self.CFG)
        model, _ = train(LinearModel(0.0), data, cfg)
        assert abs(float(model.theta.detach()) - (-2.0 + euler_truncation(-2.0, 0.02))) < 1e-6

    def test_strong_rk23_method_trains(self):
        data = linear_dataset(K=20)
        cfg = TrainConfig(loss="strong", method="rk23", lr=0.05, iters=150)
        model, hist = train(LinearModel(0.0), data, cfg)
        assert abs(float(model.theta.detach()) + 2.0) < 0.1
        assert hist.loss[-1] < hist.loss[0]

    def test_non_finite_loss(self):
        data = linear_dataset()
        cfg = TrainConfig(loss="strong", iters=5)
        with pytest.raises(NonFiniteLoss) as err:
            train(LinearModel(float("nan")), data, cfg)
        assert err.value.iteration == 0


class TestTrainGeneric:
    def test_weak_gradient_matches_finite_differences(self):
        data = oscillator_dataset(n=2, K=7, dt=0.1)
        cfg = TrainConfig(loss="weak", ell=4, p=2, s=0.0)
        prob = TrainingProblem.build(data, cfg)
        assert (prob.weak.Q, prob.weak.J) == (6, 2)
        model = GenericModel(3, hidden=6, layers=3, seed=2)
        params = list(model.parameters())

        def loss_at(flat):
            model.set_flat_parameters(flat)
            with torch.no_grad():
                return float(prob.loss_from_residual(prob.residual(model), prob.W))

        flat0 = model.flat_parameters()
        model.set_flat_parameters(flat0)
        val = prob.loss_from_residual(prob.residual(model), prob.W)
        grads = torch.autograd.grad(val, params, allow_unused=True)
        analytic = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1)
                              for g, p in zip(grads, params)]).numpy()
        rng = np.random.default_rng(0)
        for i in rng.choice(flat0.size, 20, replace=False):
            up, dn = flat0.copy(), flat0.copy()
            up[i] += 1e-6
            dn[i] -= 1e-6
            fd = (loss_at(up) - loss_at(dn)) / 2e-6
            assert abs(fd - analytic[i]) <= 1e-5 * max(abs(analytic[i]), 1e-4 * np.max(np.abs(analytic)))

    @pytest.mark.parametrize("loss", ["weak", "strong"])
    def test_reproducible(self, loss):
        data = oscillator_dataset()
        cfg = TrainConfig(loss=loss, iters=20, batch_size=2, eta_star=0.01, gamma=0.99)
        a, ha = train(GenericModel(3, hidden=8, layers=3, seed=1), data, cfg)
        b, hb = train(GenericModel(3, hidden=8, layers=3, seed=1), data, cfg)
        assert np.array_equal(a.flat_parameters(), b.flat_parameters())
        assert ha.rows == hb.rows

    def test_disabled_rba_matches_plain_loop(self):
        data = oscillator_dataset()
        cfg = TrainConfig(loss="weak", iters=30, lr=1e-2, eta_star=0.0, gamma=1.0)
        trained, _ = train(GenericModel(3, hidden=8, layers=3, seed=4), data, cfg)
        model = GenericModel(3, hidden=8, layers=3, seed=4)
        prob = TrainingProblem.build(data, cfg)
        params = list(model.parameters())
        adam = AdamState.zeros_like(params)
        for it in range(cfg.iters):
            loss = prob.loss_from_residual(prob.residual(model), prob.W)
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            adamw_step(params, grads, adam, lr_at(it, cfg), cfg.weight_decay)
        assert np.array_equal(trained.flat_parameters(), model.flat_parameters())

    def test_loss_decreases_on_average(self):
        data = add_noise(oscillator_dataset(n=4, K=60), 0.01, 0)
        _, hist = train(GenericModel(3, hidden=10, layers=3, seed=0), data, TrainConfig(loss="weak", iters=300))
        means = hist.loss.reshape(3, 100).mean(1)
        assert means[0] > means[1] > means[2]

    def test_history_csv(self, tmp_path):
        data = oscillator_dataset()
        _, hist = train(GenericModel(3, hidden=8, layers=2), data,
                        TrainConfig(loss="strong", iters=7, log_every=3, eta_star=0.01, gamma=0.9))
        path = hist.write_csv(tmp_path / "h.csv")
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["iter", "loss", "lr", "lambda_1", "lambda_2", "lambda_3", "e_1", "e_2", "e_3"]
        assert [int(r[0]) for r in rows[1:]] == [0, 3, 6]
        assert float(rows[1][3]) != 1.0
