import warnings

import pytest
import torch

from smartmim.config import parse_config

warnings.filterwarnings("ignore", category=UserWarning)
torch.set_num_threads(1)

TINY_OVERRIDES = [
    "data.crop_size=16", "data.phantom_size=20", "data.size_min=3", "data.size_max=6",
    "model.base_embed=8", "model.depths=1,1,1,1", "model.heads=1,2,2,4", "model.head_dim_K=16",
    "model.drop_path=0.0", "train.batch_size=2", "train.steps=10",
]


def tiny_config(*extra, dtype="float32"):
    return parse_config(overrides=TINY_OVERRIDES + [f"train.dtype={dtype}", *extra], env={})


@pytest.fixture
def tiny_cfg():
    return tiny_config()


# acceptance lines, echoed again at the end of the session
ACCEPTANCE = []


def report(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":").rstrip("ab"))):
            terminalreporter.write_line(line)
