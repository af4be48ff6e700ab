import numpy as np
import pytest

from fedprov.lm import ArchConfig, TokenSeq, build_model


@pytest.fixture
def tiny_arch():
    return ArchConfig(vocab_size=7, context_length=3, hidden=5, n_layers=2, embed_dim=2)


@pytest.fixture
def tiny_model(tiny_arch):
    return build_model(tiny_arch, seed=3)


def random_docs(rng, n_docs, length, vocab_size, origin="natural"):
    return [TokenSeq(rng.integers(1, vocab_size, length), origin=origin) for _ in range(n_docs)]


@pytest.fixture
def docs():
    return random_docs(np.random.default_rng(0), 6, 40, 7)


# ---------------------------------------------------------------------------
# acceptance summary: tests append "criterion N: PASS|FAIL ..." lines here


def pytest_configure(config):
    config._acceptance_lines = {}


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config._acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
