from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from advmal import harness, nn
from advmal.attacks import AttackConfig, AttackKind
from advmal.config import ExperimentConfig
from advmal.malgan import MalganConfig, train_blackbox, train_malgan

TESTS = Path(__file__).parent
GOLDEN = TESTS / "golden"
DATA = TESTS / "data"

# Adversarial-training inner attack used by the acceptance run: fewer, larger
# steps than the evaluation attack keep training time reasonable.
AT_INNER = AttackConfig(AttackKind.DFGSM_K, budget=10, step_size=0.1)
AT_EPOCHS = 20


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        results = item.config._acceptance.setdefault(marker.args[0], [])
        results.append((item.name, rep.passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config._acceptance
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok = all(passed for _, passed in results[n])
        names = ", ".join(name for name, _ in results[n])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({names})")


def small_net(seed: int, d: int = 8, hidden=(6,), n_out: int = 2, head: str = "softmax") -> nn.Network:
    return nn.init_network(nn.dense_specs(d, hidden, n_out, head=head), seed)


def random_bits(rng: np.random.Generator, n: int, d: int, p: float = 0.4) -> np.ndarray:
    return (rng.random((n, d)) < p).astype(np.uint8)


@pytest.fixture(scope="session")
def experiment_cfg() -> ExperimentConfig:
    cfg = ExperimentConfig()
    defense = replace(cfg.defense, adv_inner=AT_INNER, adv_epochs=AT_EPOCHS)
    return replace(cfg, defense=defense)


@pytest.fixture(scope="session")
def splits(experiment_cfg):
    parts, _ = harness.prepare_splits(experiment_cfg)
    return parts


@pytest.fixture(scope="session")
def victim(experiment_cfg, splits):
    return harness.train_victim(experiment_cfg, splits[0])


@pytest.fixture(scope="session")
def adv_trained(experiment_cfg, splits):
    return harness.train_defense(experiment_cfg, "adv_training", splits[0])


@pytest.fixture(scope="session")
def malgan_run(splits):
    train, val, _ = splits
    cfg = MalganConfig(seed=5)
    blackbox = train_blackbox(train, cfg)
    art = train_malgan(train.malware(), train.benign(), blackbox, cfg, malware_val=val.malware())
    return blackbox, art, val
