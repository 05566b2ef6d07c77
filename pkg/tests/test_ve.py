import math

import numpy as np
import pytest

from igdslab import infotheory as it
from igdslab import ndnum as nd
from igdslab.data import LabeledDataset, make_synthetic_dataset
from igdslab.ndnum import StructuralError
from igdslab.nn import SGD, param_checksum
from igdslab.ve import (CentroidTable, ClassifierHead, VeConfig, VeModel, contextual_info_lb, infonce_logits, load_ve,
                        prototype_info_lb, save_ve, train_classifier, train_ve, update_centroids, ve_loss, ve_train_step)


class StubVe:
    """Identity 'encoder': features and probabilities are the inputs themselves."""

    def __init__(self, dim):
        self.cfg = VeConfig(featdim=dim)

    def features(self, x):
        return np.asarray(x, dtype=float)

    probs = features


def identity_head(c):
    head = ClassifierHead(c, c)
    head.psi.data = np.eye(c)
    return head


@pytest.fixture
def data3():
    return make_synthetic_dataset(3, 3, 100, 1.0, np.random.default_rng(0), mode_std=0.25)


def test_lambda_zero_is_pure_infonce(data3):
    rng = np.random.default_rng(1)
    model = VeModel(VeConfig(lam=0.0), 3, rng)
    model.queue = rng.normal(size=(20, 16))
    x = data3.x[:8]
    loss, parts = ve_loss(model, x, x + 0.01, data3.y[:8])
    assert loss.item() == parts["ce"]
    assert parts["kl"] > 0


def test_orthogonal_negatives_small_tau_drive_ce_to_zero():
    q = np.eye(4)[:2]
    queue = np.eye(4)[2:]
    ce = nd.cross_entropy(infonce_logits(nd.Tensor(q), q, queue, 0.01), [0, 0]).item()
    assert ce < 1e-40 or ce == 0.0
    ce_warm = nd.cross_entropy(infonce_logits(nd.Tensor(q), q, queue, 1.0), [0, 0]).item()
    assert ce_warm == pytest.approx(math.log(1 + 2 / math.e), abs=1e-14)


def test_training_reduces_loss():
    drops = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        data = make_synthetic_dataset(3, 3, 150, 1.0, rng, mode_std=0.25)
        model = VeModel(VeConfig(), 3, rng)
        losses = [s.loss for s in train_ve(model, data, 500, rng)]
        drops.append(np.mean(losses[:50]) - np.mean(losses[-50:]))
    assert np.mean(drops) > 0 and all(d > 0 for d in drops)


def test_queue_fifo_and_momentum(data3):
    rng = np.random.default_rng(2)
    cfg = VeConfig(queue_size=100, batch_size=64)
    model = VeModel(cfg, 3, rng)
    opt = SGD(model.parameters(), cfg.lr)
    infos = [ve_train_step(model, data3.x[i * 40:(i + 1) * 40], data3.y[i * 40:(i + 1) * 40], rng, opt) for i in range(4)]
    assert model.queue.shape == (100, 16)
    assert infos[0].queue_underfilled and not infos[-1].queue_underfilled
    # momentum encoder never receives gradients; the key branch is detached
    assert all(p.grad is None for p in model.momentum_encoder.parameters())
    # with the online encoder held fixed, the momentum update contracts the gap
    gaps = []
    for _ in range(5):
        gaps.append(sum(np.sum((a.data - b.data) ** 2) for a, b in
                        zip(model.momentum_encoder.parameters(), model.parameters())))
        for pm, pq in zip(model.momentum_encoder.parameters(), model.parameters()):
            pm.data = cfg.momentum * pm.data + (1 - cfg.momentum) * pq.data
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))
    assert [p.shape for p in model.momentum_encoder.parameters()] == [p.shape for p in model.parameters()]


def test_features_zero_mean_unit_norm(data3):
    model = VeModel(VeConfig(), 3, np.random.default_rng(3))
    f = model.features(data3.x)
    assert np.max(np.abs(f.mean(axis=1))) <= 1e-10
    assert np.allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-12)


def test_centroid_updates():
    rng = np.random.default_rng(4)
    probs = rng.dirichlet(np.ones(5), size=3)
    t = update_centroids(CentroidTable(3, 5), probs, [0, 1, 2])
    assert np.array_equal(t.q, probs)
    ema = CentroidTable(2, 5, decay=0.9)
    q0 = ema.q[1].copy()
    ema.update(probs[:1], [1], mode="ema")
    assert np.allclose(ema.q[1], 0.9 * q0 + 0.1 * probs[0], atol=0, rtol=1e-15)
    for row in t.q:
        it.as_prob_vector(row, tol=1e-12)
    grown = update_centroids(CentroidTable(1, 5), probs[:1], [3])
    assert grown.n_classes == 4 and np.allclose(grown.q[2], 0.2)
    with pytest.raises(StructuralError):
        CentroidTable(2, 5).update(np.ones((1, 5)), [0])


def test_head_uniform_init_and_accuracy():
    rng = np.random.default_rng(5)
    y = np.repeat(np.arange(3), 60)
    feats = np.eye(16)[y] * 0.5 + 0.05 * rng.normal(size=(180, 16))
    model = StubVe(16)
    head = ClassifierHead(16, 3)
    with nd.no_grad():
        assert nd.cross_entropy(head(feats), y).item() == pytest.approx(math.log(3), abs=1e-14)
    data = LabeledDataset(feats, y, 3)
    rep = train_classifier(model, head, data, 100, rng)
    assert rep.accuracy >= 0.95
    # from uniform logits the CE gradients sum to zero over classes, so the columns of ψ do too
    assert np.allclose(head.psi.data.sum(axis=1), 0, atol=1e-12) and rep.rank == 2
    rep = train_classifier(model, ClassifierHead(16, 3, rng), data, 100, rng)
    assert rep.accuracy >= 0.95 and rep.rank == min(16, 3)


def test_rank_deficiency_is_reported_not_fatal(caplog):
    model = StubVe(4)
    data = LabeledDataset(np.ones((30, 4)), np.repeat(np.arange(3), 10), 3)
    rep = train_classifier(model, ClassifierHead(4, 3), data, 5, np.random.default_rng(0))
    assert rep.rank < 3
    assert "rank deficient" in caplog.text


def test_prototype_bound_examples():
    rng = np.random.default_rng(6)
    y = np.repeat(np.arange(4), 50)
    perfect = LabeledDataset(np.eye(4)[y], y, 4)
    assert prototype_info_lb(StubVe(4), identity_head(4), perfect) == pytest.approx(math.log(4), abs=1e-12)
    vals = []
    for _ in range(20):
        noise = LabeledDataset(rng.normal(size=(400, 4)), np.repeat(np.arange(4), 100), 4)
        vals.append(prototype_info_lb(StubVe(4), identity_head(4), noise))
    assert abs(np.mean(vals)) < 0.05
    single = LabeledDataset(np.tile([1.0, 0, 0], (10, 1)), np.zeros(10, dtype=int), 3)
    assert prototype_info_lb(StubVe(3), identity_head(3), single) == 0.0
    with pytest.raises(StructuralError):
        prototype_info_lb(StubVe(3), identity_head(3), LabeledDataset(np.zeros((0, 3)), np.zeros(0), 3))


def test_prototype_bound_forms_agree_and_stay_below_label_entropy():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n, c = int(rng.integers(5, 200)), int(rng.integers(2, 6))
        y = rng.integers(0, c, size=n)
        d = LabeledDataset(rng.normal(size=(n, c)), y, c)
        a = prototype_info_lb(StubVe(c), identity_head(c), d, "pred_entropy")
        b = prototype_info_lb(StubVe(c), identity_head(c), d, "label_entropy")
        assert a == pytest.approx(b, abs=1e-10)
        assert a <= it.entropy(np.bincount(y, minlength=c) / n) + 1e-6


def test_contextual_bound_examples():
    rng = np.random.default_rng(8)
    base = rng.dirichlet(np.ones(4), size=2)
    y = np.array([0, 0, 0, 1, 1])
    collapsed = LabeledDataset(base[y], y, 2)
    assert contextual_info_lb(StubVe(4), collapsed) == 0.0
    onehot = LabeledDataset(np.array([[1.0, 0], [0, 1], [1, 0], [0, 1]]), [0, 0, 1, 1], 2)
    assert contextual_info_lb(StubVe(2), onehot) == pytest.approx(math.log(2), abs=1e-15)
    probs = rng.dirichlet(np.full(5, 0.7), size=12)
    one = LabeledDataset(probs, np.zeros(12, dtype=int), 1)
    c = probs.mean(axis=0)
    expect = it.entropy(c / c.sum()) - np.mean([it.entropy(p) for p in probs])
    assert contextual_info_lb(StubVe(5), one) == pytest.approx(expect, abs=1e-10)
    assert contextual_info_lb(StubVe(5), one) >= -1e-12


def test_kl_target_variants(data3):
    rng = np.random.default_rng(9)
    for cfg in (VeConfig(kl_target="two_view"), VeConfig(use_labels=False)):
        model = VeModel(cfg, 3, rng)
        info = train_ve(model, data3, 5, rng)
        assert np.isfinite(info[-1].loss)
    with pytest.raises(ValueError):
        ve_loss(VeModel(VeConfig(kl_target="bogus"), 3, rng), data3.x[:4], data3.x[:4], data3.y[:4])


def test_checkpoint_roundtrip_bit_exact(tmp_path, data3):
    rng = np.random.default_rng(10)
    model = VeModel(VeConfig(), 3, rng)
    train_ve(model, data3, 10, rng)
    head = ClassifierHead(16, 3, rng)
    save_ve(tmp_path / "ve.npz", model, head)
    m2, h2 = load_ve(tmp_path / "ve.npz")
    assert param_checksum(m2.parameters()) == param_checksum(model.parameters())
    assert param_checksum(m2.momentum_encoder.parameters()) == param_checksum(model.momentum_encoder.parameters())
    assert np.array_equal(m2.queue, model.queue) and np.array_equal(m2.centroids.q, model.centroids.q)
    assert np.array_equal(h2.psi.data, head.psi.data)
    assert np.array_equal(m2.features(data3.x), model.features(data3.x))
