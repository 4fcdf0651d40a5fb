"""Topic-structured toy review corpora for tests and demos without real data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import GoldCategory, Sentence, Token
from .numerics import make_rng

TOPICS = (GoldCategory.FOOD, GoldCategory.STAFF, GoldCategory.AMBIENCE)


@dataclass
class SyntheticSpec:
    n_sentences: int = 5000
    words_per_topic: int = 200
    n_background: int = 100
    min_len: int = 6
    max_len: int = 12
    topic_rate: float = 0.4  # share of tokens drawn from the sentence's own topic
    cross_rate: float = 0.1  # share drawn from one other topic
    zipf: float = 1.0  # exponent within each topic's vocabulary
    background_zipf: float = 0.0
    topic_weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    n_registers: int = 1  # topic-independent styles; each sentence uses one register's background words
    seed: int = 0


def topic_vocabulary(topic: GoldCategory, n: int) -> list[str]:
    """First word is the lowercase category name, so it can act as a seed word."""
    name = topic.value.lower()
    return [name] + [f"{name}{i:03d}" for i in range(1, n)]


def _zipf_probs(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def generate(spec: SyntheticSpec | None = None) -> tuple[list[Sentence], np.ndarray]:
    """Sentences with gold categories and coarse POS tags, plus their topic indices.

    Topic words are 75% NOUN / 25% ADJ; background words alternate VERB/OTHER.
    """
    spec = spec or SyntheticSpec()
    rng = make_rng(spec.seed)
    vocab = [topic_vocabulary(t, spec.words_per_topic) for t in TOPICS]
    n_noun = (3 * spec.words_per_topic) // 4
    background = [f"bg{i:03d}" for i in range(spec.n_background)]
    bg_pos = ["VERB" if i % 2 else "OTHER" for i in range(spec.n_background)]
    p_topic = _zipf_probs(spec.words_per_topic, spec.zipf)
    per_register = spec.n_background // spec.n_registers
    p_bg = _zipf_probs(per_register, spec.background_zipf)

    weights = np.asarray(spec.topic_weights, dtype=np.float64)
    topics = rng.choice(len(TOPICS), size=spec.n_sentences, p=weights / weights.sum())
    sentences = []
    for n, t in enumerate(topics):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        other = (t + 1 + int(rng.integers(0, len(TOPICS) - 1))) % len(TOPICS)
        register = int(rng.integers(0, spec.n_registers)) * per_register
        kinds = rng.random(length)
        toks = []
        for kind in kinds:
            if kind < spec.topic_rate + spec.cross_rate:
                src = t if kind < spec.topic_rate else other
                j = int(rng.choice(spec.words_per_topic, p=p_topic))
                toks.append(Token(vocab[src][j], vocab[src][j], "NOUN" if j < n_noun else "ADJ"))
            else:
                j = register + int(rng.choice(per_register, p=p_bg))
                toks.append(Token(background[j], background[j], bg_pos[j]))
        sentences.append(
            Sentence(
                id=f"syn-{n}",
                text=" ".join(tok.surface for tok in toks),
                tokens=tuple(toks),
                categories=(TOPICS[t],),
            )
        )
    return sentences, topics
