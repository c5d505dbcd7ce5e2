"""Shared fixtures: one small corpus and one default corpus per session."""
import time

import pytest

from kwspot.data import CorpusConfig, generate_corpus, load_corpus


def small_config(**overrides):
    """A corpus that generates in well under a second."""
    base = dict(
        speakers_per_cell={
            "A:adult": 4, "B:adult": 4, "C:adult": 4, "D:adult": 4,
            "A:child": 4, "C:child": 4, "B:child": 2, "D:child": 2,
        },
        positives_per_speaker=4,
        negatives_per_speaker=4,
        frame_len_range=(40, 60),
        keyword_len_range=(30, 36),
        augment_copies=1,
        seed=7,
    )
    base.update(overrides)
    return CorpusConfig(**base)


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("small-corpus")
    generate_corpus(small_config(), d)
    return d


@pytest.fixture(scope="session")
def small_corpus(small_corpus_dir):
    return load_corpus(small_corpus_dir)


@pytest.fixture(scope="session")
def default_corpus_dir(tmp_path_factory):
    """The full default corpus; generated once, timed for the budget check."""
    d = tmp_path_factory.mktemp("default-corpus")
    t0 = time.perf_counter()
    generate_corpus(CorpusConfig(), d)
    (d / "generation_seconds.txt").write_text(f"{time.perf_counter() - t0:.3f}")
    return d


@pytest.fixture(scope="session")
def default_corpus(default_corpus_dir):
    return load_corpus(default_corpus_dir)
