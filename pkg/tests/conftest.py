import pytest
import torch

from xmrs.config import ModelConfig
from xmrs.dataset import Modality, generate_synthetic

torch.set_num_threads(1)

TINY_DIMS = {Modality.TEXT: (3, 5), Modality.VISUAL: (3, 4), Modality.ACOUSTIC: (3, 3)}
TINY_CONFIG = ModelConfig(d_model=8, d_shared=6, prompt_len=2, ffn_mult=2, epochs=2, seed=0)

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS = {}


@pytest.fixture
def tiny_dims():
    return dict(TINY_DIMS)


@pytest.fixture
def tiny_config():
    return TINY_CONFIG


@pytest.fixture
def tiny_dataset():
    return generate_synthetic(24, TINY_DIMS, 2.0, seed=5)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
