import numpy as np
import pytest

from igdslab.data import make_synthetic_dataset
from igdslab.diffusion import DenoiserNet, scaled_linear_schedule, train_denoiser
from igdslab.distill import FrozenModels
from igdslab.ve import ClassifierHead, VeConfig, VeModel, train_classifier, train_ve


def build_toy(seed, n_classes=3, ve_steps=300, denoiser_steps=1500, T=50):
    """Small trained pipeline shared by several test modules."""
    rng = np.random.default_rng(seed)
    data = make_synthetic_dataset(n_classes, 3, 200, 1.0, rng, mode_std=0.25)
    ve = VeModel(VeConfig(), n_classes, rng)
    train_ve(ve, data, ve_steps, rng)
    ve.freeze()
    head = ClassifierHead(16, n_classes, rng)
    train_classifier(ve, head, data, 30, rng)
    head.freeze()
    sched = scaled_linear_schedule(T)
    net = DenoiserNet(2, n_classes, T, rng)
    train_denoiser(net, sched, data, denoiser_steps, rng)
    net.freeze()
    return data, FrozenModels(net, sched, ve, head)


@pytest.fixture(scope="session")
def toy():
    return build_toy(7)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        ok, detail = results[num]
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
