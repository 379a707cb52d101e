import numpy as np
import pytest

from pate_tgan.data import split, synth_mixture
from pate_tgan.trainer import TrainConfig, Trainer


def small_config(**kw):
    base = dict(classes=3, k=5, n_c=16, n_g=8, n_s=2, n_k=1, hidden_units=6, noise_dim=3,
                sigma2=2.0, noise_multiplier=1.0, learning_rate=0.05, mu_cap=1.0, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def small_data(m=3, n_per_class=40, seed=0, percent=0.5):
    ds = synth_mixture(m, n_per_class, 2, 6.0, seed)
    return split(ds, percent, seed)


def small_trainer(**kw):
    cfg = small_config(**kw)
    s_l, s_d = small_data(cfg.classes)
    return Trainer(cfg, s_l, s_d)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
