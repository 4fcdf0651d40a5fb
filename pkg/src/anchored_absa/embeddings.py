"""Skip-gram with negative sampling, and the plain-text ``V d`` vector format."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Sentence, Vocabulary
from .numerics import make_rng

log = logging.getLogger(__name__)

MEMORY_BUDGET_BYTES = 4 * 1024**3


class EmbeddingFormatError(ValueError):
    pass


class OutOfVocabularyError(KeyError):
    pass


@dataclass
class EmbeddingMatrix:
    vocab: Vocabulary
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.vocab):
            raise ValueError(f"expected {len(self.vocab)} rows, got shape {self.vectors.shape}")
        if self.vectors.shape[1] < 2:
            raise ValueError("embedding dimension must be at least 2")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding matrix has non-finite entries")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def words(self) -> list[str]:
        return self.vocab.words

    def __len__(self) -> int:
        return len(self.vocab)

    def __contains__(self, word: str) -> bool:
        return word in self.vocab

    def __getitem__(self, word: str) -> np.ndarray:
        try:
            return self.vectors[self.vocab.index[word]]
        except KeyError:
            raise OutOfVocabularyError(word) from None


@dataclass
class SgnsConfig:
    dim: int = 200
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    min_learning_rate: float = 0.0001
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "window", "negatives", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class SgnsResult:
    embeddings: EmbeddingMatrix
    loss_history: list[float] = field(default_factory=list)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _pairs(sentences: Sequence[np.ndarray], window: int, rng: np.random.Generator) -> np.ndarray:
    # word2vec-style shrunk window: each centre draws its own span in [1, window]
    centres, contexts = [], []
    for ids in sentences:
        n = len(ids)
        if n < 2:
            continue
        spans = rng.integers(1, window + 1, size=n)
        for i in range(n):
            lo, hi = max(0, i - spans[i]), min(n, i + spans[i] + 1)
            for j in range(lo, hi):
                if j != i:
                    centres.append(ids[i])
                    contexts.append(ids[j])
    return np.array([centres, contexts], dtype=np.int64).T.reshape(-1, 2)


def train_sgns(sentences: Sequence[Sentence], vocab: Vocabulary, config: SgnsConfig | None = None) -> SgnsResult:
    """Train input vectors with mini-batched SGD on the negative-sampling objective.

    Sentences must already be encoded against ``vocab``. Single threaded and
    fully determined by ``config.seed``.
    """
    config = config or SgnsConfig()
    V, d = len(vocab), config.dim
    if V == 0:
        raise ValueError("empty vocabulary")
    if 2 * V * d * 8 > MEMORY_BUDGET_BYTES:
        raise MemoryError(f"{V}x{d} embedding tables exceed the {MEMORY_BUDGET_BYTES} byte budget")
    ids = [np.asarray(s.token_ids, dtype=np.int64) for s in sentences if len(s.token_ids)]
    if not ids:
        raise ValueError("empty corpus: no in-vocabulary tokens")

    rng = make_rng(config.seed)
    if vocab.counts is not None and min(vocab.counts, default=0) > 0:
        freq = np.asarray(vocab.counts, dtype=np.float64)
    else:
        freq = np.bincount(np.concatenate(ids), minlength=V).astype(np.float64)
    noise = freq**0.75
    noise_cdf = np.cumsum(noise / noise.sum())
    noise_cdf[-1] = 1.0

    w_in = (rng.random((V, d)) - 0.5) / d
    w_out = np.zeros((V, d))

    epoch_pairs = [_pairs(ids, config.window, rng) for _ in range(config.epochs)]
    total = sum(len(p) for p in epoch_pairs)
    if total == 0:
        raise ValueError("corpus has no sentence with two or more in-vocabulary tokens")
    lr_span = config.learning_rate - config.min_learning_rate
    seen = 0
    history = []
    bs = config.batch_size
    for epoch, pairs in enumerate(epoch_pairs):
        pairs = pairs[rng.permutation(len(pairs))]
        epoch_loss = 0.0
        for start in range(0, len(pairs), bs):
            chunk = pairs[start : start + bs]
            lr = config.learning_rate - lr_span * (seen / total)
            seen += len(chunk)
            c, o = chunk[:, 0], chunk[:, 1]
            negs = np.searchsorted(noise_cdf, rng.random((len(chunk), config.negatives)), side="right")
            v = w_in[c]
            u_pos = w_out[o]
            u_neg = w_out[negs]
            s_pos = sigmoid(np.einsum("bd,bd->b", v, u_pos))
            s_neg = sigmoid(np.einsum("bd,bnd->bn", v, u_neg))
            epoch_loss -= np.sum(np.log(np.maximum(s_pos, 1e-300)))
            epoch_loss -= np.sum(np.log(np.maximum(1.0 - s_neg, 1e-300)))
            g_pos = s_pos - 1.0
            grad_v = g_pos[:, None] * u_pos + np.einsum("bn,bnd->bd", s_neg, u_neg)
            np.add.at(w_out, o, -lr * g_pos[:, None] * v)
            np.add.at(w_out, negs, -lr * s_neg[:, :, None] * v[:, None, :])
            np.add.at(w_in, c, -lr * grad_v)
        history.append(epoch_loss / len(pairs))
        log.info("sgns epoch %d/%d loss %.4f", epoch + 1, config.epochs, history[-1])
    return SgnsResult(EmbeddingMatrix(vocab, w_in), history)


def save_text(emb: EmbeddingMatrix) -> bytes:
    lines = [f"{len(emb)} {emb.dim}"]
    for word, row in zip(emb.words, emb.vectors):
        lines.append(word + " " + " ".join(f"{x:.9g}" for x in row))
    return ("\n".join(lines) + "\n").encode("utf-8")


def load_text(data: bytes) -> EmbeddingMatrix:
    lines = [ln for ln in data.decode("utf-8").split("\n") if ln.strip()]
    if not lines:
        raise EmbeddingFormatError("empty embedding file")
    header = lines[0].split()
    try:
        V, d = int(header[0]), int(header[1])
        if len(header) != 2:
            raise ValueError
    except (ValueError, IndexError):
        raise EmbeddingFormatError(f"line 1: expected header 'V d', got {lines[0]!r}") from None
    if len(lines) - 1 != V:
        raise EmbeddingFormatError(f"header declares {V} words but file has {len(lines) - 1} vector lines")
    words, seen = [], set()
    vectors = np.empty((V, d))
    for i, line in enumerate(lines[1:]):
        parts = line.rstrip().split(" ")
        word, vals = parts[0], parts[1:]
        if len(vals) != d:
            raise EmbeddingFormatError(f"line {i + 2}: word {word!r} has {len(vals)} values, expected {d}")
        if word in seen:
            raise EmbeddingFormatError(f"line {i + 2}: duplicate word {word!r}")
        try:
            vectors[i] = [float(x) for x in vals]
        except ValueError:
            raise EmbeddingFormatError(f"line {i + 2}: non-numeric field for word {word!r}") from None
        seen.add(word)
        words.append(word)
    return EmbeddingMatrix(Vocabulary(words), vectors)
