import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from posdiffae.diffusion import build_schedule
from posdiffae.geometry import PatchPosition
from posdiffae.datagen import PatchRecord
from posdiffae.networks import NetworkConfig, build_bundle

settings.register_profile(
    "default", max_examples=50, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def schedule():
    return build_schedule()


TINY_CFG = NetworkConfig(patch_size=8, f_dim=8, base_channels=4, time_dim=8, encoder_stages=2, T=50)


@pytest.fixture
def tiny_bundle():
    return build_bundle(TINY_CFG, seed=0)


def random_records(n, size=8, seed=0, constant=None):
    rng = np.random.default_rng(seed)
    recs = []
    for _ in range(n):
        img = (np.full((size, size, 3), constant, np.float32) if constant is not None
               else rng.uniform(size=(size, size, 3)).astype(np.float32))
        pos = PatchPosition((0, 0), float(rng.uniform()), float(rng.uniform(0, 360)))
        recs.append(PatchRecord(image=img, position=pos, region=0, section_id="t"))
    return recs


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
