import csv
import math

import numpy as np
import pytest

from igdslab import igds
from igdslab import infotheory as it
from igdslab import ndnum as nd
from igdslab.diffusion import reverse_step
from igdslab.igds import GuidanceConfig, GuidanceTrace, guidance_objective, igds_generate, igds_loss, igds_sample_step
from igdslab.ndnum import StructuralError
from igdslab.nn import param_checksum


def _terms_only(features, logits, cfg):
    return igds_loss(features, logits, cfg)[1]


def test_beta_zero_keeps_only_proto_and_entropy():
    rng = np.random.default_rng(0)
    f, z = rng.normal(size=(4, 6)), rng.normal(size=(4, 3))
    total, terms = igds_loss(f, z, GuidanceConfig(beta=0.0, ipc=4, target_class=1))
    proto = np.mean(z[:, 1] - np.log(np.exp(z).sum(1)))
    pbar = (np.exp(z) / np.exp(z).sum(1, keepdims=True)).mean(0)
    assert total.item() == pytest.approx(proto + it.entropy(pbar / pbar.sum()), abs=1e-12)
    assert terms["contextual"] > 0


def test_identical_features_give_zero_contextual():
    f = np.tile(np.random.default_rng(1).normal(size=5), (3, 1))
    assert _terms_only(f, np.zeros((3, 2)), GuidanceConfig(beta=0.5, ipc=3))["contextual"] == 0.0


def test_opposite_one_hot_features_give_ln2():
    f = np.array([[100.0, 0.0], [0.0, 100.0]])
    c = _terms_only(f, np.zeros((2, 2)), GuidanceConfig(beta=1.0, ipc=2))["contextual"]
    assert c == pytest.approx(math.log(2), abs=1e-12)


def test_ipc_mismatch():
    with pytest.raises(StructuralError):
        igds_loss(np.zeros((3, 4)), np.zeros((3, 2)), GuidanceConfig(ipc=2))


def test_config_validation():
    for kw in ({"ipc": 0}, {"eta": float("inf")}, {"eta": -1.0}, {"beta": -0.1}, {"tau": 0.0}):
        with pytest.raises(StructuralError):
            GuidanceConfig(**kw)


def test_terms_sum_to_total():
    rng = np.random.default_rng(2)
    for pe in (True, False):
        cfg = GuidanceConfig(beta=0.3, ipc=5, target_class=2, pred_entropy=pe)
        _, t = igds_loss(rng.normal(size=(5, 8)), rng.normal(size=(5, 3)), cfg)
        assert abs(t["proto"] + t["entropy"] + cfg.beta * t["contextual"] - t["total"]) <= 1e-12


def test_eta_zero_matches_unguided_step(toy):
    _, m = toy
    cfg = GuidanceConfig(eta=0.0, ipc=4, target_class=1)
    x = np.random.default_rng(3).normal(size=(4, 2))
    for t in (m.sched.T, 5, 1):
        a = igds_sample_step(x, t, m.denoiser, m.sched, m.ve, m.head, cfg, np.random.default_rng(t))
        b = reverse_step(m.denoiser, m.sched, x, t, 1, np.random.default_rng(t))
        assert np.array_equal(a, b)
    xs, _, _ = igds_generate(m.denoiser, m.sched, m.ve, m.head, cfg, np.random.default_rng(8))
    r = np.random.default_rng(8)
    x = r.standard_normal((4, 2))
    for t in range(m.sched.T, 0, -1):
        x = reverse_step(m.denoiser, m.sched, x, t, 1, r)
    assert np.array_equal(xs, x)


@pytest.mark.parametrize("beta", [0.0, 0.5])
def test_small_step_ascends(toy, beta):
    _, m = toy
    cfg = GuidanceConfig(beta=beta, eta=1e-3, ipc=4, target_class=0)
    x = np.random.default_rng(4).normal(size=(4, 2))
    for t in (40, 10, 2):
        pre = reverse_step(m.denoiser, m.sched, x, t, 0, np.random.default_rng(t))
        post = igds_sample_step(x, t, m.denoiser, m.sched, m.ve, m.head, cfg, np.random.default_rng(t))
        with nd.no_grad():
            lo = guidance_objective(m.ve, m.head, pre, cfg)[0].item()
            hi = guidance_objective(m.ve, m.head, post, cfg)[0].item()
        assert hi >= lo


@pytest.mark.parametrize("pred_entropy", [True, False])
def test_guidance_gradient_matches_finite_differences(toy, pred_entropy):
    _, m = toy
    cfg = GuidanceConfig(beta=0.5, ipc=4, target_class=2, pred_entropy=pred_entropy)
    x = np.random.default_rng(5).normal(size=(4, 2))
    rep = nd.grad_check(lambda x: guidance_objective(m.ve, m.head, x, cfg)[0], {"x": x}, "x")
    assert rep.max_rel_error <= 1e-4


def test_generate_shapes_trace_and_invariants(toy, tmp_path):
    _, m = toy
    params = m.denoiser.parameters() + m.ve.parameters() + m.ve.momentum_encoder.parameters() + m.head.parameters()
    before = param_checksum(params)
    cfg = GuidanceConfig(beta=0.5, eta=40.0, ipc=6, target_class=2, pred_entropy=False)
    x, y, trace = igds_generate(m.denoiser, m.sched, m.ve, m.head, cfg, np.random.default_rng(6))
    assert x.shape == (6, 2) and np.all(y == 2)
    assert len(trace) == m.sched.T and trace.step == list(range(m.sched.T, 0, -1))
    assert max(abs(g) for g in trace.identity_gap) <= 1e-10
    assert not any(trace.skipped)
    assert param_checksum(params) == before
    trace.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert tuple(rows[0]) == GuidanceTrace.COLUMNS and len(rows) == m.sched.T + 1


def test_single_sample_contextual_gradient_is_exactly_zero(toy):
    _, m = toy
    x = np.random.default_rng(7).normal(size=(1, 2))
    grads = []
    for beta in (0.0, 0.5):
        xv = nd.Tensor(x, requires_grad=True)
        guidance_objective(m.ve, m.head, xv, GuidanceConfig(beta=beta, ipc=1))[0].backward()
        grads.append(xv.grad)
    assert np.array_equal(grads[0], grads[1])


def test_nonfinite_gradient_skips_step(toy, monkeypatch):
    _, m = toy

    def broken(ve, head, x, cfg):
        x = nd.as_tensor(x)
        terms = {"total": 0.0, "proto": 0.0, "entropy": 0.0, "contextual": 0.0, "centroid_identity_gap": 0.0}
        return nd.tsum(x * np.nan), terms

    monkeypatch.setattr(igds, "guidance_objective", broken)
    cfg = GuidanceConfig(eta=1.0, ipc=2)
    x = np.ones((2, 2))
    trace = GuidanceTrace()
    out = igds_sample_step(x, 3, m.denoiser, m.sched, m.ve, m.head, cfg, np.random.default_rng(0), trace)
    assert np.array_equal(out, reverse_step(m.denoiser, m.sched, x, 3, 0, np.random.default_rng(0)))
    assert trace.skipped == [True] and math.isnan(trace.grad_norm[0])
