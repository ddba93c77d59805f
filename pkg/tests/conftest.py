import numpy as np
import pytest

from malloc_bench.backbone import ModelConfig, init_params
from malloc_bench.numerics import Rng

_criteria: dict[int, tuple[str, str]] = {}


def small_model(d=16, H=2, blocks=2, max_len=32, items=20, seed=0):
    config = ModelConfig(d_model=d, n_heads=H, n_blocks=blocks, max_seq_len=max_len, n_items=items)
    return config, init_params(config, Rng(seed))


def random_tokens(config, params, L, seed):
    rng = np.random.default_rng(seed)
    items = rng.integers(0, config.n_items, L)
    labels = rng.integers(0, 2, L)
    return (params.item_emb[items].astype(np.float64) + params.label_emb[labels]).astype(np.float32)


@pytest.fixture
def model():
    return small_model()


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _criteria[props["criterion"]] = (props["title"], "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")
