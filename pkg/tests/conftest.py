import numpy as np
import pytest

from anchored_absa.corpus import Vocabulary, build_vocab
from anchored_absa.embeddings import EmbeddingMatrix, SgnsConfig, train_sgns
from anchored_absa.synthetic import SyntheticSpec, generate


def toy_embeddings(table: dict) -> EmbeddingMatrix:
    words = list(table)
    return EmbeddingMatrix(Vocabulary(words), np.array([table[w] for w in words], dtype=np.float64))


@pytest.fixture(scope="session")
def small_synthetic():
    """Small 3-topic corpus with trained embeddings, shared by the slower tests."""
    sents, topics = generate(SyntheticSpec(n_sentences=1200, words_per_topic=60, n_background=40, seed=7))
    vocab = build_vocab(sents, min_count=1)
    sents = vocab.encode_all(sents)
    E = train_sgns(sents, vocab, SgnsConfig(dim=24, epochs=3, seed=7)).embeddings
    return sents, topics, E


# acceptance criteria record one line each here; printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
