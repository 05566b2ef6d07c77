"""Toy class-conditional DDPM: schedule, forward corruption, ε-network, ancestral sampling.

Time indices run over t = 1..T with ᾱ_0 = 1; arrays are stored 0-based so
``alpha_bar[t - 1]`` is ᾱ_t.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import ndnum as nd
from .data import LabeledDataset
from .ndnum import DomainError, StructuralError, Tensor
from .nn import Adam, init_linear, set_trainable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    sigma_tilde: np.ndarray

    @property
    def T(self) -> int:
        return self.beta.size

    @classmethod
    def from_betas(cls, betas) -> DiffusionSchedule:
        beta = np.asarray(betas, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0 or np.any(beta <= 0) or np.any(beta >= 1):
            raise StructuralError("betas must be a non-empty sequence in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma_tilde = np.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta)
        return cls(beta, alpha, alpha_bar, alpha_bar_prev, sigma_tilde)

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise StructuralError(f"time index {t} outside [1, {self.T}]")


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear ramp of β from ``beta_start`` to ``beta_end`` over T steps."""
    if T < 1 or not 0 < beta_start <= beta_end < 1:
        raise StructuralError(f"bad schedule parameters T={T}, beta=[{beta_start}, {beta_end}]")
    return DiffusionSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def scaled_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """The 1000-step linear ramp rescaled to T steps, so ᾱ_T stays near zero for short chains."""
    scale = 1000.0 / T
    return build_schedule(T, beta_start * scale, min(beta_end * scale, 0.999))


def forward_noise(sched: DiffusionSchedule, x0, t: int, eps) -> np.ndarray:
    sched.check_t(t)
    ab = sched.alpha_bar[t - 1]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def score_from_eps(sched: DiffusionSchedule, t: int, eps_hat) -> np.ndarray:
    return -np.asarray(eps_hat) / np.sqrt(1.0 - sched.alpha_bar[t - 1])


def predict_x0(sched: DiffusionSchedule, x_t, t: int, s_hat) -> np.ndarray:
    """x̃_0 = (x_t + (1 - ᾱ_t)·ŝ) / √ᾱ_t."""
    sched.check_t(t)
    ab = sched.alpha_bar[t - 1]
    if ab < 1e-12:
        raise DomainError(f"alpha_bar at t={t} is {ab:g}, too small to invert")
    return (np.asarray(x_t) + (1.0 - ab) * np.asarray(s_hat)) / np.sqrt(ab)


def posterior_coefficients(sched: DiffusionSchedule, t: int) -> tuple[float, float, float]:
    """Weights on x_t and x̃_0, and the noise scale, for the step t -> t-1."""
    sched.check_t(t)
    i = t - 1
    ab, ab_prev = sched.alpha_bar[i], sched.alpha_bar_prev[i]
    c_xt = np.sqrt(sched.alpha[i]) * (1.0 - ab_prev) / (1.0 - ab)
    c_x0 = np.sqrt(ab_prev) * sched.beta[i] / (1.0 - ab)
    return float(c_xt), float(c_x0), float(sched.sigma_tilde[i])


def ancestral_step(sched: DiffusionSchedule, x_t, x0_tilde, t: int, z) -> np.ndarray:
    if t < 1:
        raise StructuralError("no reverse step below t = 1")
    c_xt, c_x0, sigma = posterior_coefficients(sched, t)
    out = c_xt * np.asarray(x_t) + c_x0 * np.asarray(x0_tilde)
    if t > 1:
        out = out + sigma * np.asarray(z)
    return out


def time_features(t, dim: int, T: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = np.exp(np.linspace(0.0, np.log(100.0), dim // 2))
    ang = t[:, None] * freqs[None, :] * np.pi
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class DenoiserNet:
    """ε̂(x_t, t, y): x projection plus (time + class) embedding, then a ReLU MLP."""

    def __init__(self, dim: int, n_classes: int, T: int, rng: np.random.Generator,
                 hidden: int = 64, temb_dim: int = 16):
        self.dim, self.n_classes, self.T, self.temb_dim = dim, n_classes, T, temb_dim
        self.w_x, self.b_x = init_linear(rng, dim, hidden)
        self.w_t, _ = init_linear(rng, temb_dim, hidden)
        self.class_emb = Tensor(0.1 * rng.standard_normal((n_classes, hidden)), requires_grad=True)
        self.w1, self.b1 = init_linear(rng, hidden, hidden)
        self.w2, self.b2 = init_linear(rng, hidden, hidden)
        self.w_out, self.b_out = init_linear(rng, hidden, dim)

    def parameters(self) -> list[Tensor]:
        return [self.w_x, self.b_x, self.w_t, self.class_emb, self.w1, self.b1, self.w2, self.b2, self.w_out, self.b_out]

    def freeze(self) -> DenoiserNet:
        set_trainable(self.parameters(), False)
        return self

    def __call__(self, x_t, t, y) -> Tensor:
        x_t = np.asarray(x_t, dtype=np.float64)
        n = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        y = np.broadcast_to(np.asarray(y, dtype=int), (n,))
        onehot = np.zeros((n, self.n_classes))
        onehot[np.arange(n), y] = 1.0
        emb = time_features(t, self.temb_dim, self.T) @ self.w_t + onehot @ self.class_emb
        h = nd.relu(x_t @ self.w_x + self.b_x + emb)
        h = nd.relu(h @ self.w1 + self.b1)
        h = nd.relu(h @ self.w2 + self.b2)
        return h @ self.w_out + self.b_out

    def predict(self, x_t, t, y) -> np.ndarray:
        with nd.no_grad():
            return self(x_t, t, y).data


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DenoiserTrace:
    losses: list = field(default_factory=list)


def train_denoiser(net: DenoiserNet, sched: DiffusionSchedule, data: LabeledDataset, steps: int,
                   rng: np.random.Generator, batch_size: int = 128, lr: float = 2e-3,
                   patience: int = 100) -> DenoiserTrace:
    """Minimize E||ε - ε̂(x_t, t, y)||² with uniform t; aborts on sustained divergence."""
    if len(data) == 0:
        raise StructuralError("cannot train on an empty dataset")
    set_trainable(net.parameters(), True)
    opt = Adam(net.parameters(), lr)
    trace = DenoiserTrace()
    bs = min(batch_size, len(data))
    bad = 0
    for step in range(steps):
        idx = rng.integers(0, len(data), size=bs)
        x0, y = data.x[idx], data.y[idx]
        t = rng.integers(1, sched.T + 1, size=bs)
        eps = rng.standard_normal(x0.shape)
        ab = sched.alpha_bar[t - 1][:, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        loss = nd.mean(nd.square(net(x_t, t, y) - eps))
        loss.backward()
        opt.step()
        val = loss.item()
        trace.losses.append(val)
        bad = bad + 1 if val > 10 * trace.losses[0] else 0
        if bad >= patience:
            raise TrainingDiverged(f"loss above 10x its initial value for {patience} steps (step {step}, loss {val:.3g})")
    return trace


def reverse_step(net: DenoiserNet, sched: DiffusionSchedule, x_t, t: int, y, rng: np.random.Generator) -> np.ndarray:
    """Unguided reverse transition x_t -> x_{t-1}."""
    eps_hat = net.predict(x_t, t, y)
    x0 = predict_x0(sched, x_t, t, score_from_eps(sched, t, eps_hat))
    z = rng.standard_normal(np.shape(x_t)) if t > 1 else np.zeros(np.shape(x_t))
    return ancestral_step(sched, x_t, x0, t, z)


def sample(net: DenoiserNet, sched: DiffusionSchedule, n: int, y, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n, net.dim))
    for t in range(sched.T, 0, -1):
        x = reverse_step(net, sched, x, t, y, rng)
    return x


def save_denoiser(path, net: DenoiserNet, sched: DiffusionSchedule) -> None:
    arrays = {f"p{i}": p.data for i, p in enumerate(net.parameters())}
    arrays["schedule_beta"] = sched.beta
    meta = {"dim": net.dim, "n_classes": net.n_classes, "T": net.T,
            "hidden": net.w1.shape[0], "temb_dim": net.temb_dim}
    checkpoint.save(path, "denoiser", arrays, meta)


def load_denoiser(path) -> tuple[DenoiserNet, DiffusionSchedule]:
    arrays, meta = checkpoint.load(path, "denoiser")
    net = DenoiserNet(meta["dim"], meta["n_classes"], meta["T"], np.random.default_rng(0),
                      hidden=meta["hidden"], temb_dim=meta["temb_dim"])
    for i, p in enumerate(net.parameters()):
        p.data = arrays[f"p{i}"]
    return net, DiffusionSchedule.from_betas(arrays["schedule_beta"])
