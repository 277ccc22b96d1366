import numpy as np
import pytest

from adanec.backbone import BackboneConfig, TrainConfig, train_expert
from adanec.synthesis import DomainSpec, generate_dataset

# small domains sized for 32x32 unit-test images (blur kept short)
TINY_SPECS = [
    DomainSpec(0, omega_range=(0.85, 0.95), phi_range=(0.15, 0.30),
               blur_sigma_range=(0.0, 0.6), gamma=2.2),
    DomainSpec(1, omega_range=(0.80, 0.90), phi_range=(0.40, 0.55),
               blur_sigma_range=(1.4, 2.0), gamma=2.2),
    DomainSpec(2, omega_range=(0.75, 0.85), phi_range=(0.60, 0.75),
               blur_sigma_range=(2.6, 3.4), gamma=2.2),
]

TINY_BACKBONE = BackboneConfig(width=8, depth=2)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinydata")
    return generate_dataset(TINY_SPECS, 12, seed=101, out_dir=str(out),
                            height=32, width=32)


@pytest.fixture(scope="session")
def tiny_experts(tiny_manifest):
    cfg = TrainConfig(steps=60, batch=6)
    return [train_expert(tiny_manifest, d, cfg, seed=200 + d,
                         backbone=TINY_BACKBONE) for d in range(3)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one pass/fail line per acceptance criterion, printed at session end
_ACCEPTANCE_RESULTS = []


def record_criterion(number, name, passed):
    _ACCEPTANCE_RESULTS.append((number, name, passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed in sorted(_ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {name}: {status}")
