"""Variational estimator: momentum-contrast encoder, class centroids and a linear head.

The encoder is trained with an InfoNCE term against a queue of momentum-encoded
keys plus a KL term that pushes softmaxed features away from their class
centroid. Once frozen, it supplies lower bounds on I(X;Y) and H(X|Y).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import infotheory as it
from . import ndnum as nd
from .data import LabeledDataset
from .ndnum import LOG_FLOOR, StructuralError, Tensor
from .nn import MLP, SGD, copy_into, set_trainable

log = logging.getLogger(__name__)


@dataclass
class VeConfig:
    input_dim: int = 2
    hidden: int = 64
    featdim: int = 16
    lam: float = 0.1
    queue_size: int = 256
    momentum: float = 0.99
    tau: float = 0.07
    lr: float = 1e-2
    batch_size: int = 64
    sharpness: float = 3.0
    # "centroid": KL against the running class centroid; "two_view": against (H_q + H_k) / 2
    kl_target: str = "centroid"
    use_labels: bool = True
    centroid_decay: float = 0.99
    jitter: float = 0.05
    scale_low: float = 0.9
    scale_high: float = 1.1


class CentroidTable:
    """Per-class mean of softmaxed features (batch mode) or its moving average."""

    def __init__(self, n_classes: int, dim: int, decay: float = 0.99):
        self.dim = dim
        self.decay = decay
        self.q = np.full((n_classes, dim), 1.0 / dim)
        self.counts = np.zeros(n_classes, dtype=int)

    @property
    def n_classes(self) -> int:
        return self.q.shape[0]

    def _grow(self, n_classes: int) -> None:
        extra = n_classes - self.n_classes
        if extra > 0:
            self.q = np.vstack([self.q, np.full((extra, self.dim), 1.0 / self.dim)])
            self.counts = np.concatenate([self.counts, np.zeros(extra, dtype=int)])

    def update(self, probs: np.ndarray, labels: np.ndarray, mode: str = "batch") -> CentroidTable:
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(labels, dtype=int)
        if probs.ndim != 2 or probs.shape[1] != self.dim or labels.shape != (probs.shape[0],):
            raise StructuralError("centroid update needs (n, dim) probabilities and n labels")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1) > 1e-9):
            raise StructuralError("centroid update expects rows on the simplex")
        if labels.size:
            self._grow(int(labels.max()) + 1)
        for c in np.unique(labels):
            rows = probs[labels == c]
            if mode == "batch":
                self.q[c] = it.shifted_mean(rows)
            elif mode == "ema":
                for r in rows:
                    self.q[c] = self.decay * self.q[c] + (1 - self.decay) * r
            else:
                raise ValueError(f"unknown centroid mode {mode!r}")
            self.counts[c] += rows.shape[0]
        return self

    def copy(self) -> CentroidTable:
        t = CentroidTable(self.n_classes, self.dim, self.decay)
        t.q = self.q.copy()
        t.counts = self.counts.copy()
        return t


def update_centroids(table: CentroidTable, probs, labels, mode: str = "batch") -> CentroidTable:
    return table.copy().update(probs, labels, mode)


class VeModel:
    def __init__(self, cfg: VeConfig, n_classes: int, rng: np.random.Generator):
        self.cfg = cfg
        sizes = [cfg.input_dim, cfg.hidden, cfg.hidden, cfg.featdim]
        self.encoder = MLP(sizes, rng, "softplus", cfg.sharpness)
        self.momentum_encoder = MLP(sizes, rng, "softplus", cfg.sharpness)
        copy_into(self.momentum_encoder.parameters(), self.encoder.parameters())
        set_trainable(self.momentum_encoder.parameters(), False)
        self.queue = np.zeros((0, cfg.featdim))
        self.centroids = CentroidTable(n_classes, cfg.featdim, cfg.centroid_decay)
        self.steps = 0

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters()

    def freeze(self) -> VeModel:
        set_trainable(self.encoder.parameters(), False)
        return self

    def encode(self, x, momentum: bool = False) -> Tensor:
        """Zero-mean, unit-norm features."""
        net = self.momentum_encoder if momentum else self.encoder
        return nd.l2_normalize(nd.center(net(x)))

    def soft(self, feats: Tensor) -> Tensor:
        return nd.softmax(feats * (1.0 / self.cfg.tau))

    def features(self, x) -> np.ndarray:
        with nd.no_grad():
            return self.encode(np.asarray(x, dtype=np.float64)).data

    def probs(self, x) -> np.ndarray:
        with nd.no_grad():
            return self.soft(self.encode(np.asarray(x, dtype=np.float64))).data


def augment(x: np.ndarray, rng: np.random.Generator, cfg: VeConfig) -> np.ndarray:
    scale = rng.uniform(cfg.scale_low, cfg.scale_high, size=x.shape)
    return x * scale + cfg.jitter * rng.standard_normal(x.shape)


def infonce_logits(q: Tensor, k: np.ndarray, queue: np.ndarray, tau: float) -> Tensor:
    """Column 0 holds <q_i, k_i>; the rest hold q_i against each queued key."""
    pos = nd.reshape(nd.inner(q, k), (-1, 1))
    cols = [pos]
    if queue.shape[0]:
        cols.append(q @ queue.T)
    return nd.concat(cols, axis=1) * (1.0 / tau)


def ve_loss(model: VeModel, x_q, x_k, labels) -> tuple[Tensor, dict]:
    """InfoNCE cross-entropy minus λ·KL(σ(q) || target)."""
    cfg = model.cfg
    q = model.encode(x_q)
    with nd.no_grad():
        k = model.encode(x_k, momentum=True).data
    logits = infonce_logits(q, k, model.queue, cfg.tau)
    ce = nd.cross_entropy(logits, np.zeros(logits.shape[0], dtype=int))
    h_q = model.soft(q)
    labels = np.asarray(labels, dtype=int)
    if cfg.kl_target == "two_view":
        h_k = it.softmax(k / cfg.tau)
        target = 0.5 * (h_q.data + h_k)
    elif cfg.kl_target == "centroid":
        keys = labels if cfg.use_labels else np.zeros_like(labels)
        model.centroids._grow(int(keys.max()) + 1)
        target = model.centroids.q[keys]
    else:
        raise ValueError(f"unknown kl_target {cfg.kl_target!r}")
    kl = nd.mean(nd.kl(h_q, target))
    loss = ce - cfg.lam * kl
    parts = {"ce": ce.item(), "kl": kl.item(), "k": k, "h_q": h_q.data,
             "queue_underfilled": model.queue.shape[0] < cfg.queue_size}
    return loss, parts


@dataclass
class StepInfo:
    loss: float
    ce: float
    kl: float
    queue_underfilled: bool


def ve_train_step(model: VeModel, x, labels, rng: np.random.Generator, opt: SGD | None = None) -> StepInfo:
    cfg = model.cfg
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise StructuralError("empty batch")
    x_q, x_k = augment(x, rng, cfg), augment(x, rng, cfg)
    loss, parts = ve_loss(model, x_q, x_k, labels)
    loss.backward()
    (opt or SGD(model.parameters(), cfg.lr)).step()
    m = cfg.momentum
    for pm, pq in zip(model.momentum_encoder.parameters(), model.parameters()):
        pm.data = m * pm.data + (1 - m) * pq.data
    model.queue = np.vstack([model.queue, parts["k"]])[-cfg.queue_size:]
    keys = np.asarray(labels, dtype=int) if cfg.use_labels else np.zeros(len(labels), dtype=int)
    model.centroids.update(parts["h_q"], keys, mode="ema")
    model.steps += 1
    return StepInfo(loss.item(), parts["ce"], parts["kl"], parts["queue_underfilled"])


def train_ve(model: VeModel, data: LabeledDataset, steps: int, rng: np.random.Generator) -> list[StepInfo]:
    """Run ``steps`` minibatch updates, then refresh centroids over the full dataset."""
    opt = SGD(model.parameters(), model.cfg.lr)
    bs = min(model.cfg.batch_size, len(data))
    trace = []
    for _ in range(steps):
        idx = rng.choice(len(data), size=bs, replace=False)
        trace.append(ve_train_step(model, data.x[idx], data.y[idx], rng, opt))
    refresh_centroids(model, data)
    return trace


def refresh_centroids(model: VeModel, data: LabeledDataset) -> None:
    table = CentroidTable(data.n_classes, model.cfg.featdim, model.cfg.centroid_decay)
    model.centroids = table.update(model.probs(data.x), data.y, mode="batch")


class ClassifierHead:
    """Linear map from features to class logits."""

    def __init__(self, featdim: int, n_classes: int, rng: np.random.Generator | None = None, init_scale: float = 0.01):
        if rng is None:
            psi = np.zeros((featdim, n_classes))
        else:
            psi = init_scale * rng.standard_normal((featdim, n_classes))
        self.psi = Tensor(psi, requires_grad=True)
        self.bias = Tensor(np.zeros(n_classes), requires_grad=True)

    def __call__(self, feats) -> Tensor:
        return nd.as_tensor(feats) @ self.psi + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.psi, self.bias]

    def freeze(self) -> ClassifierHead:
        set_trainable(self.parameters(), False)
        return self

    def rank(self, threshold: float = 1e-8) -> int:
        return int(np.sum(np.linalg.svd(self.psi.data, compute_uv=False) > threshold))

    def predict(self, feats) -> np.ndarray:
        with nd.no_grad():
            return np.argmax(self(feats).data, axis=1)


@dataclass
class HeadReport:
    accuracy: float
    rank: int
    losses: list = field(default_factory=list)


def train_classifier(model: VeModel, head: ClassifierHead, data: LabeledDataset, epochs: int,
                     rng: np.random.Generator, lr: float = 0.5, batch_size: int = 64) -> HeadReport:
    """Cross-entropy training of ``head`` on frozen encoder features."""
    feats = model.features(data.x)
    set_trainable(head.parameters(), True)
    opt = SGD(head.parameters(), lr)
    losses = []
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = nd.cross_entropy(head(feats[idx]), data.y[idx])
            loss.backward()
            opt.step()
        with nd.no_grad():
            losses.append(nd.cross_entropy(head(feats), data.y).item())
    acc = float(np.mean(head.predict(feats) == data.y))
    rank = head.rank()
    if rank < min(head.psi.shape):
        log.warning("classifier matrix is rank deficient: rank %d of %s", rank, head.psi.shape)
    return HeadReport(acc, rank, losses)


def prototype_info_lb(model: VeModel, head: ClassifierHead, data: LabeledDataset, form: str = "pred_entropy") -> float:
    """Plug-in lower bound on I(X;Y) from hard predictions.

    ``pred_entropy``: H(Ŷ) + E log P(Ŷ|Y). ``label_entropy``: H(Y) + E log P(Y|Ŷ).
    Conditionals are empirical one-hot frequencies, floored inside the log.
    """
    if len(data) == 0:
        raise StructuralError("prototype bound of an empty dataset")
    pred = head.predict(model.features(data.x))
    n_pred = max(head.psi.shape[1], data.n_classes)
    counts = np.zeros((n_pred, n_pred))
    np.add.at(counts, (pred, data.y), 1.0)
    if form == "pred_entropy":
        cond = counts / np.maximum(counts.sum(axis=0, keepdims=True), 1)
        marginal = counts.sum(axis=1) / len(data)
        ll = np.log(np.maximum(cond[pred, data.y], LOG_FLOOR))
    elif form == "label_entropy":
        cond = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
        marginal = counts.sum(axis=0) / len(data)
        ll = np.log(np.maximum(cond[pred, data.y], LOG_FLOOR))
    else:
        raise ValueError(f"unknown form {form!r}")
    return it.entropy(marginal) + float(np.mean(ll))


def contextual_info_lb(model: VeModel, data: LabeledDataset, table: CentroidTable | None = None) -> float:
    """E KL(σ(x̂) || Q^y). Centroids are recomputed from ``data`` unless ``table`` is given."""
    if len(data) == 0:
        raise StructuralError("contextual bound of an empty dataset")
    probs = model.probs(data.x)
    if table is None:
        table = CentroidTable(data.n_classes, model.cfg.featdim).update(probs, data.y, mode="batch")
    scores = [it.kl_divergence(p, table.q[c]) for p, c in zip(probs, data.y)]
    return float(np.mean(scores))


# checkpoints -------------------------------------------------------------

def save_ve(path, model: VeModel, head: ClassifierHead | None = None) -> None:
    arrays = {f"enc{i}": p.data for i, p in enumerate(model.encoder.parameters())}
    arrays.update({f"mom{i}": p.data for i, p in enumerate(model.momentum_encoder.parameters())})
    arrays.update(queue=model.queue, centroids=model.centroids.q, centroid_counts=model.centroids.counts)
    if head is not None:
        arrays.update(psi=head.psi.data, bias=head.bias.data)
    meta = {"config": asdict(model.cfg), "n_classes": model.centroids.n_classes, "steps": model.steps}
    checkpoint.save(path, "ve", arrays, meta)


def load_ve(path) -> tuple[VeModel, ClassifierHead | None]:
    arrays, meta = checkpoint.load(path, "ve")
    cfg = VeConfig(**meta["config"])
    model = VeModel(cfg, meta["n_classes"], np.random.default_rng(0))
    for i, p in enumerate(model.encoder.parameters()):
        p.data = arrays[f"enc{i}"]
    for i, p in enumerate(model.momentum_encoder.parameters()):
        p.data = arrays[f"mom{i}"]
    model.queue = arrays["queue"]
    model.centroids.q = arrays["centroids"]
    model.centroids.counts = arrays["centroid_counts"]
    model.steps = meta["steps"]
    head = None
    if "psi" in arrays:
        head = ClassifierHead(*arrays["psi"].shape)
        head.psi.data = arrays["psi"]
        head.bias.data = arrays["bias"]
    return model, head
