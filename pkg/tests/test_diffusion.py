import math

import numpy as np
import pytest

from igdslab.data import LabeledDataset, make_synthetic_dataset
from igdslab.diffusion import (DenoiserNet, DiffusionSchedule, TrainingDiverged, ancestral_step, build_schedule,
                               forward_noise, load_denoiser, posterior_coefficients, predict_x0, reverse_step, sample,
                               save_denoiser, scaled_linear_schedule, score_from_eps, train_denoiser)
from igdslab.ndnum import DomainError, StructuralError
from igdslab.nn import param_checksum


class PointDenoiser:
    """Exact ε-predictor for a dataset concentrated at one point."""

    def __init__(self, sched, point):
        self.sched, self.point, self.dim = sched, np.asarray(point, dtype=float), len(point)

    def predict(self, x_t, t, y):
        ab = self.sched.alpha_bar[t - 1]
        return (x_t - math.sqrt(ab) * self.point) / math.sqrt(1 - ab)


def test_schedule_examples():
    assert np.allclose(build_schedule(1, 0.02, 0.02).alpha_bar, [0.98], rtol=0, atol=1e-15)
    s = build_schedule(1000, 1e-4, 0.02)
    oracle = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        oracle *= 1.0 - float(b)
    assert s.alpha_bar[-1] == pytest.approx(oracle, rel=1e-10)
    assert s.alpha_bar[-1] == pytest.approx(4.0e-5, rel=0.02)
    for sch in (s, scaled_linear_schedule(100), build_schedule(7, 0.1, 0.3)):
        assert np.all(np.diff(sch.alpha_bar) < 0)
        assert np.all(sch.sigma_tilde >= 0) and sch.sigma_tilde[0] == 0


def test_schedule_validation():
    for args in ((0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)):
        with pytest.raises(StructuralError):
            build_schedule(*args)


def test_forward_noise_limits_and_moments():
    s = build_schedule(10, 1e-4, 0.5)
    x0, eps = np.array([1.0, -2.0]), np.array([0.3, 0.4])
    with pytest.raises(StructuralError):
        forward_noise(s, x0, 0, eps)
    with pytest.raises(StructuralError):
        forward_noise(s, x0, 11, eps)
    tiny = DiffusionSchedule.from_betas([1e-12])
    assert np.allclose(forward_noise(tiny, x0, 1, eps), x0, rtol=0, atol=1e-6)
    huge = DiffusionSchedule.from_betas([1 - 1e-12])
    assert np.allclose(forward_noise(huge, x0, 1, eps), eps, rtol=0, atol=1e-5)
    rng = np.random.default_rng(0)
    t = 5
    xs = forward_noise(s, x0, t, rng.standard_normal((10_000, 2)))
    ab = s.alpha_bar[t - 1]
    sd = math.sqrt(1 - ab)
    assert np.all(np.abs(xs.mean(0) - math.sqrt(ab) * x0) <= 3 * sd / 100)
    assert np.allclose(xs.var(0), 1 - ab, rtol=0.05)


def test_forward_marginal_at_T_is_standard_normal():
    s = scaled_linear_schedule(100)
    rng = np.random.default_rng(1)
    data = make_synthetic_dataset(2, 1, 5000, 2.0, rng)
    xs = forward_noise(s, data.x, s.T, rng.standard_normal(data.x.shape))
    for c in range(2):
        comp = xs[data.y == c]
        assert np.all(np.abs(comp.mean(0)) <= 0.05)
        assert np.all((comp.var(0) >= 0.9) & (comp.var(0) <= 1.1))


def test_predict_x0_examples():
    s = DiffusionSchedule.from_betas([0.75])
    assert predict_x0(s, np.array([1.0]), 1, score_from_eps(s, 1, np.array([0.5]))) == pytest.approx((1 - math.sqrt(0.75) * 0.5) / 0.5)
    assert predict_x0(s, np.array([1.0]), 1, np.array([0.5 / -math.sqrt(0.75)]))[0] == pytest.approx(1.133975, abs=1e-6)
    near_one = DiffusionSchedule.from_betas([1e-12])
    assert predict_x0(near_one, np.array([2.5]), 1, np.zeros(1))[0] == pytest.approx(2.5, abs=1e-11)
    rng = np.random.default_rng(2)
    s = scaled_linear_schedule(50)
    for t in (1, 10, 50):
        x0, eps = rng.normal(size=3), rng.normal(size=3)
        xt = forward_noise(s, x0, t, eps)
        assert np.max(np.abs(predict_x0(s, xt, t, score_from_eps(s, t, eps)) - x0)) <= 1e-10
    with pytest.raises(DomainError):
        predict_x0(DiffusionSchedule.from_betas([1 - 1e-13]), np.ones(1), 1, np.zeros(1))


def test_ancestral_coefficients():
    s = build_schedule(5, 0.1, 0.3)
    with pytest.raises(StructuralError):
        ancestral_step(s, np.ones(2), np.ones(2), 0, np.zeros(2))
    # t=1: ᾱ_0 = 1, so the x_t weight vanishes and the x̃_0 weight is β_1/(1-ᾱ_1) = 1
    c_xt, c_x0, sig = posterior_coefficients(s, 1)
    assert c_xt == 0 and c_x0 == pytest.approx(s.beta[0] / (1 - s.alpha_bar[0]), abs=1e-15) and sig == 0
    for t in range(2, 6):
        a, ab, abp, b = s.alpha[t - 1], s.alpha_bar[t - 1], s.alpha_bar[t - 2], s.beta[t - 1]
        c_xt, c_x0, sig = posterior_coefficients(s, t)
        assert c_xt == pytest.approx(math.sqrt(a) * (1 - abp) / (1 - ab), abs=1e-15)
        assert c_x0 == pytest.approx(math.sqrt(abp) * b / (1 - ab), abs=1e-15)
        assert sig == pytest.approx(math.sqrt((1 - abp) / (1 - ab) * b), abs=1e-15)
        x = np.array([0.7, -1.2])
        assert np.allclose(ancestral_step(s, x, x, t, np.zeros(2)), (c_xt + c_x0) * x, rtol=1e-15)
        z = np.array([1.0, 2.0])
        lin = ancestral_step(s, x, 2 * x, t, z) - sig * z
        assert np.allclose(lin, c_xt * x + c_x0 * 2 * x, rtol=1e-14)
    # the final step ignores z
    assert np.array_equal(ancestral_step(s, np.ones(2), np.ones(2), 1, np.full(2, 9.0)),
                          ancestral_step(s, np.ones(2), np.ones(2), 1, np.zeros(2)))


def test_perfect_denoiser_concentrates_on_point():
    s = scaled_linear_schedule(100)
    pt = np.array([0.8, -0.3])
    xs = sample(PointDenoiser(s, pt), s, 1000, 0, np.random.default_rng(3))
    assert np.linalg.norm(xs.mean(0) - pt) <= 0.05


def test_zero_data_reaches_near_zero_mse():
    rng = np.random.default_rng(4)
    s = scaled_linear_schedule(100)
    data = LabeledDataset(np.zeros((200, 2)), np.zeros(200, dtype=int), 1)
    net = DenoiserNet(2, 1, 100, rng)
    train_denoiser(net, s, data, 3000, rng)
    t = rng.integers(1, 101, size=20_000)
    eps = rng.standard_normal((20_000, 2))
    xt = np.sqrt(1 - s.alpha_bar[t - 1])[:, None] * eps
    # the optimum is exact (ε = x_t / sqrt(1-ᾱ_t)), so the excess over it is the raw MSE
    assert np.mean((net.predict(xt, t, 0) - eps) ** 2) <= 0.05 * np.var(eps)


def test_mixture_training_loss_decreases():
    rng = np.random.default_rng(5)
    data = make_synthetic_dataset(2, 2, 300, 2.0, rng)
    s = scaled_linear_schedule(100)
    losses = np.array(train_denoiser(DenoiserNet(2, 2, 100, rng), s, data, 3000, rng).losses)
    assert losses[:300].mean() > losses[-300:].mean()


def test_zero_steps_leave_net_unchanged():
    rng = np.random.default_rng(6)
    net = DenoiserNet(2, 2, 10, rng)
    before = param_checksum(net.parameters())
    train_denoiser(net, build_schedule(10), make_synthetic_dataset(2, 1, 10, 1.0, rng), 0, rng)
    assert param_checksum(net.parameters()) == before
    with pytest.raises(StructuralError):
        train_denoiser(net, build_schedule(10), LabeledDataset(np.zeros((0, 2)), np.zeros(0), 2), 5, rng)


def test_divergence_aborts():
    rng = np.random.default_rng(0)
    data = LabeledDataset(np.zeros((50, 2)), np.zeros(50, dtype=int), 1)
    with pytest.raises(TrainingDiverged):
        train_denoiser(DenoiserNet(2, 1, 100, rng), scaled_linear_schedule(100), data, 400, rng, lr=50.0, patience=50)


def test_sampling_is_reproducible_and_shaped(tmp_path):
    rng = np.random.default_rng(7)
    s = scaled_linear_schedule(20)
    net = DenoiserNet(2, 3, 20, rng).freeze()
    a = sample(net, s, 5, 1, np.random.default_rng(11))
    b = sample(net, s, 5, 1, np.random.default_rng(11))
    assert a.shape == (5, 2) and np.array_equal(a, b)
    assert net(np.zeros((4, 2)), 3, [0, 1, 2, 0]).shape == (4, 2)
    save_denoiser(tmp_path / "d.npz", net, s)
    net2, s2 = load_denoiser(tmp_path / "d.npz")
    assert param_checksum(net2.parameters()) == param_checksum(net.parameters())
    assert np.array_equal(s2.alpha_bar, s.alpha_bar)
    assert np.array_equal(sample(net2, s2, 5, 1, np.random.default_rng(11)), a)
    x = np.ones((2, 2))
    assert np.array_equal(reverse_step(net, s, x, 1, 0, np.random.default_rng(0)),
                          reverse_step(net, s, x, 1, 0, np.random.default_rng(99)))
