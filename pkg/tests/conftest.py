import numpy as np
import pytest

from gridvit.data import SyntheticSpec, synthetic_records
from gridvit.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(cases_per_class=3, depth=6, height=16, width=16, seed=11)


@pytest.fixture(scope="session")
def small_records(small_spec, tmp_path_factory):
    return synthetic_records(small_spec, tmp_path_factory.mktemp("syn_small"))


@pytest.fixture
def tiny_cfg():
    # 2x2 grid of 16x16 slices -> 32x32 image, P=8 -> 16 patches
    return ModelConfig(k=4, slice_h=16, slice_w=16, patch_size=8, channels=2, embed_dim=16,
                       layers=2, heads=2, mlp_ratio=2)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def verdict():
    """Record and print one pass/fail line per acceptance criterion."""
    def emit(number, title, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
