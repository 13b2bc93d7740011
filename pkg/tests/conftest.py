import numpy as np
import pytest
import torch

from hqsnet.pipeline.phantoms import cardiac_phantom

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")


def random_image(rng, H=8, W=8, dtype=torch.float64):
    return torch.from_numpy(rng.standard_normal((2, H, W))).to(dtype)


def phantom_image(H=96, W=96, seed=0, dtype=torch.float64):
    z = cardiac_phantom(H, W, np.random.default_rng(seed))
    return torch.from_numpy(np.stack([z.real, z.imag])).to(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
