"""Shared fixtures: a small synthetic world and tiny models.

Also collects the acceptance-criterion results that tests in
test_acceptance.py register, and prints one line per criterion at the end
of the run so the verdicts are visible in plain test output.
"""

import pytest

from mlmcal.corpus import (
    Domain,
    SyntheticTaskSpec,
    build_vocabulary,
    generate_corpus,
    generate_labeled,
)
from mlmcal.model import EncoderConfig, init_params, snapshot_pretrained

CRITERION_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str = ""):
    tag = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    CRITERION_LINES.append(f"criterion {number:02d} {tag} {name}{suffix}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_LINES:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for line in sorted(CRITERION_LINES):
        terminalreporter.write_line(line)


def tiny_config(task_spec: SyntheticTaskSpec, **overrides) -> EncoderConfig:
    base = dict(
        vocab_size=task_spec.vocab_size,
        num_classes=task_spec.num_classes,
        num_layers=1,
        num_heads=2,
        d_model=16,
        d_ff=16,
        max_len=24,
    )
    base.update(overrides)
    return EncoderConfig(**base)


@pytest.fixture(scope="session")
def task_spec():
    return SyntheticTaskSpec()


@pytest.fixture(scope="session")
def vocab(task_spec):
    return build_vocabulary(task_spec)


@pytest.fixture
def tiny_cfg(task_spec):
    return tiny_config(task_spec)


@pytest.fixture
def tiny_store(tiny_cfg):
    return init_params(tiny_cfg, seed=11)


@pytest.fixture
def anchored_store(tiny_cfg):
    """A fresh model whose snapshot equals its current parameters."""
    store = init_params(tiny_cfg, seed=11)
    snapshot_pretrained(store)
    return store


@pytest.fixture(scope="session")
def id_train(task_spec):
    return generate_labeled(task_spec, 96, Domain.ID, seed=5)


@pytest.fixture(scope="session")
def id_eval(task_spec):
    return generate_labeled(task_spec, 48, Domain.ID, seed=15)


@pytest.fixture(scope="session")
def od_eval(task_spec):
    return generate_labeled(task_spec, 48, Domain.OD, seed=16)


@pytest.fixture(scope="session")
def outlier_eval(task_spec):
    return generate_corpus(task_spec, 32, Domain.OUTLIER, seed=17)


@pytest.fixture(scope="session")
def pretrain_text(task_spec):
    return generate_corpus(task_spec, 96, Domain.PRETRAIN, seed=6)
