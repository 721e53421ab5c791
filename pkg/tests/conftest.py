import sys

import pytest

from tsi_kit.synth import GeneratorConfig, generate_scenes


@pytest.fixture(scope="session")
def generated_100():
    return generate_scenes(GeneratorConfig(n_scenes=100, seed=11))


@pytest.fixture(scope="session")
def corpus_100(generated_100):
    return [g.scene for g in generated_100]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
