import numpy as np
import pytest

from selfq.model import AdapterSettings, ModelConfig, VisionLanguageModel

_acceptance: list[tuple[str, str, str]] = []


def small_model(seed: int = 0, adapters: bool = True, rank: int = 4) -> VisionLanguageModel:
    m = VisionLanguageModel(ModelConfig(adapters=AdapterSettings(llm_rank=rank, llm_alpha=2.0 * rank,
                                                                 vit_rank=rank, vit_alpha=2.0 * rank),
                                        init_seed=seed))
    if adapters:
        m.attach_adapters(seed)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    detail = dict(report.user_properties).get("detail", "")
    _acceptance.append((name, "PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _acceptance:
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
