import pytest

from ema2s.synthdata import SyntheticCorpusConfig, build_corpus


@pytest.fixture(scope="session")
def small_corpus_config():
    return SyntheticCorpusConfig(n_utterances=6, duration_s=0.8, seed=3, gl_iterations=4)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory, small_corpus_config):
    root = tmp_path_factory.mktemp("corpus")
    manifest = build_corpus(small_corpus_config, root)
    return root, manifest


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.VERDICTS, key=lambda v: int(v.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
