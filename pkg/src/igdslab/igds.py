"""Information-guided reverse diffusion.

At every reverse step the candidate batch for one class is pushed through the
frozen encoder and classifier, the guidance objective

    mean log p(target | x) + H(mean prediction) + β · mean_i KL(H_i || mean_j H_j)

is differentiated with respect to the batch, and the batch takes a gradient
ascent step. H_i is the temperature softmax of sample i's features.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import infotheory as it
from . import ndnum as nd
from .diffusion import DenoiserNet, DiffusionSchedule, ancestral_step, predict_x0, score_from_eps
from .ndnum import StructuralError, Tensor
from .ve import ClassifierHead, VeModel


@dataclass
class GuidanceConfig:
    beta: float = 0.0
    eta: float = 0.1
    tau: float = 0.07
    ipc: int = 1
    target_class: int = 0
    # False drops the H(mean prediction) term; on single-class batches that term pulls samples toward the boundary
    pred_entropy: bool = True
    # multiply the ascent step by the step's posterior noise scale
    scale_by_sigma: bool = True

    def __post_init__(self):
        if self.ipc < 1:
            raise StructuralError("ipc must be at least 1")
        if not math.isfinite(self.eta) or self.eta < 0:
            raise StructuralError("eta must be finite and non-negative")
        if self.beta < 0 or self.tau <= 0:
            raise StructuralError("need beta >= 0 and tau > 0")


def igds_loss(features: Tensor, logits: Tensor, cfg: GuidanceConfig) -> tuple[Tensor, dict[str, float]]:
    features, logits = nd.as_tensor(features), nd.as_tensor(logits)
    n = features.shape[0]
    if n != cfg.ipc or logits.shape[0] != n:
        raise StructuralError(f"batch of {n} samples / {logits.shape[0]} logits does not match ipc={cfg.ipc}")
    h = nd.softmax(features * (1.0 / cfg.tau))
    # shifted mean: a single-sample batch gets a centroid bitwise equal to its sample
    q = h[0] + nd.mean(h - h[0], axis=0)
    contextual = nd.mean(nd.kl(h, q))
    proto = nd.mean(nd.log_softmax(logits)[:, cfg.target_class])
    total = proto + cfg.beta * contextual
    terms = {"proto": proto.item(), "contextual": contextual.item(), "entropy": 0.0}
    if cfg.pred_entropy:
        ent = nd.entropy(nd.mean(nd.softmax(logits), axis=0))
        total = total + ent
        terms["entropy"] = ent.item()
    terms["total"] = total.item()
    terms["centroid_identity_gap"] = terms["contextual"] - (
        it.entropy(q.data / q.data.sum()) - float(np.mean([it.entropy(r / r.sum()) for r in h.data])))
    return total, terms


def guidance_objective(ve: VeModel, head: ClassifierHead, x, cfg: GuidanceConfig) -> tuple[Tensor, dict]:
    feats = ve.encode(x)
    return igds_loss(feats, head(feats), cfg)


@dataclass
class GuidanceTrace:
    step: list = field(default_factory=list)
    total: list = field(default_factory=list)
    proto: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    contextual: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    identity_gap: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    COLUMNS = ("step", "total", "proto", "entropy", "contextual", "grad_norm")

    def record(self, t: int, terms: dict, grad_norm: float, skipped: bool = False) -> None:
        self.step.append(t)
        self.total.append(terms["total"])
        self.proto.append(terms["proto"])
        self.entropy.append(terms["entropy"])
        self.contextual.append(terms["contextual"])
        self.identity_gap.append(terms["centroid_identity_gap"])
        self.grad_norm.append(grad_norm)
        self.skipped.append(skipped)

    def __len__(self) -> int:
        return len(self.step)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, c) for c in self.COLUMNS)):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def igds_sample_step(x_t: np.ndarray, t: int, denoiser: DenoiserNet, sched: DiffusionSchedule,
                     ve: VeModel, head: ClassifierHead, cfg: GuidanceConfig, rng: np.random.Generator,
                     trace: GuidanceTrace | None = None) -> np.ndarray:
    """One reverse step x_t -> x_{t-1} followed by a guidance ascent step."""
    if x_t.shape[0] != cfg.ipc:
        raise StructuralError(f"batch of {x_t.shape[0]} does not match ipc={cfg.ipc}")
    eps_hat = denoiser.predict(x_t, t, cfg.target_class)
    x0 = predict_x0(sched, x_t, t, score_from_eps(sched, t, eps_hat))
    z = rng.standard_normal(x_t.shape) if t > 1 else np.zeros(x_t.shape)
    x_prev = ancestral_step(sched, x_t, x0, t, z)

    if cfg.eta == 0:
        if trace is not None:
            with nd.no_grad():
                _, terms = guidance_objective(ve, head, x_prev, cfg)
            trace.record(t, terms, 0.0)
        return x_prev

    xv = Tensor(x_prev, requires_grad=True)
    loss, terms = guidance_objective(ve, head, xv, cfg)
    loss.backward()
    grad = xv.grad
    if grad is None or not np.all(np.isfinite(grad)):
        if trace is not None:
            trace.record(t, terms, float("nan"), skipped=True)
        return x_prev
    step = cfg.eta * (sched.sigma_tilde[t - 1] if cfg.scale_by_sigma else 1.0)
    if trace is not None:
        trace.record(t, terms, float(np.linalg.norm(grad)))
    return x_prev + step * grad


def igds_generate(denoiser: DenoiserNet, sched: DiffusionSchedule, ve: VeModel, head: ClassifierHead,
                  cfg: GuidanceConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, GuidanceTrace]:
    """Full reverse chain for one class; the ipc samples evolve as a single batch."""
    trace = GuidanceTrace()
    x = rng.standard_normal((cfg.ipc, denoiser.dim))
    for t in range(sched.T, 0, -1):
        x = igds_sample_step(x, t, denoiser, sched, ve, head, cfg, rng, trace)
    return x, np.full(cfg.ipc, cfg.target_class), trace
