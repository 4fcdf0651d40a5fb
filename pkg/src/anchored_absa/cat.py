"""Contrastive-attention (CAt) prior: RBF attention over frequent nouns, cosine labelling.

The prior only knows Food, Staff and Ambience. Everything else goes to a
placeholder label (``None`` here, ``"None"`` in files) whose vector is the
vocabulary word closest to the negated mean of the three label vectors.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import GoldCategory, Sentence
from .numerics import l2_normalize, l2_normalize_rows

PRIOR_CATEGORIES = (GoldCategory.FOOD, GoldCategory.STAFF, GoldCategory.AMBIENCE)
NONE_LABEL = "None"

DEFAULT_SEED_WORDS: dict[GoldCategory, tuple[str, ...]] = {
    GoldCategory.FOOD: ("food",),
    GoldCategory.STAFF: ("staff",),
    GoldCategory.AMBIENCE: ("ambience",),
}


def label_name(label: GoldCategory | None) -> str:
    return NONE_LABEL if label is None else label.value


def parse_label(name: str) -> GoldCategory | None:
    return None if name == NONE_LABEL else GoldCategory.parse(name)


@dataclass(frozen=True)
class PriorPrediction:
    id: str
    label: GoldCategory | None  # None is the placeholder label
    label_emb: np.ndarray


@dataclass
class CatModel:
    label_embs: dict[GoldCategory | None, np.ndarray]  # Food, Staff, Ambience, then None
    candidates: tuple[int, ...]
    gamma: float
    placeholder_word: str | None = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        for label, v in self.label_embs.items():
            if not np.linalg.norm(v) > 0:
                raise ValueError(f"label embedding for {label_name(label)} is zero")


def _matrix(E) -> np.ndarray:
    return np.asarray(getattr(E, "vectors", E), dtype=np.float64)


def label_embeddings(E, seed_words: Mapping[GoldCategory, Sequence[str]] | None = None) -> dict[GoldCategory, np.ndarray]:
    """Mean embedding of each category's seed words (raises KeyError if one is unknown)."""
    seed_words = seed_words or DEFAULT_SEED_WORDS
    return {cat: np.mean([E[w] for w in words], axis=0) for cat, words in seed_words.items()}


def candidate_aspects(sentences: Iterable[Sentence], vocab, top_n: int = 200) -> tuple[int, ...]:
    """The top_n most frequent in-vocabulary nouns; ties go to the lexicographically smaller word."""
    freq = Counter(t.norm for s in sentences for t in s.tokens if t.pos == "NOUN" and t.norm in vocab)
    if not freq:
        raise ValueError("no NOUN-tagged in-vocabulary tokens; candidate selection needs POS tags")
    ranked = sorted(freq.items(), key=lambda wc: (-wc[1], wc[0]))[:top_n]
    return tuple(vocab.index[w] for w, _ in ranked)


def attention_weights(X: np.ndarray, C: np.ndarray, gamma: float) -> np.ndarray:
    sq = np.sum(X * X, axis=1)[:, None] - 2 * X @ C.T + np.sum(C * C, axis=1)[None, :]
    mass = np.exp(-gamma * np.maximum(sq, 0.0)).sum(axis=1)
    total = mass.sum()
    if not total > 0:
        return np.full(X.shape[0], 1.0 / X.shape[0])
    return mass / total


def cat_attention(ids: Sequence[int], candidates: Sequence[int], E, gamma: float) -> np.ndarray:
    """Attended sentence vector: words weighted by summed RBF similarity to the candidates."""
    if len(ids) == 0:
        raise ValueError("empty sentence")
    mat = _matrix(E)
    X = mat[np.asarray(ids, dtype=np.int64)]
    C = mat[np.asarray(candidates, dtype=np.int64)]
    return attention_weights(X, C, gamma) @ X


def assign_label(sentence, model: CatModel, E) -> PriorPrediction:
    """Label whose embedding has the highest cosine with the attended vector.

    Ties resolve in the order Food, Staff, Ambience, None. A sentence with no
    in-vocabulary words gets the placeholder.
    """
    ids = tuple(getattr(sentence, "token_ids", sentence))
    sid = getattr(sentence, "id", "")
    labels = list(model.label_embs)
    unit = l2_normalize_rows(np.stack([model.label_embs[lab] for lab in labels]))
    none_emb = l2_normalize(model.label_embs[None]) if None in model.label_embs else unit[-1]
    if len(ids) == 0:
        return PriorPrediction(sid, None, none_emb)
    v = cat_attention(ids, model.candidates, E, model.gamma)
    norm = np.linalg.norm(v)
    if norm == 0:
        return PriorPrediction(sid, None, none_emb)
    scores = unit @ (v / norm)
    best = int(np.argmax(scores))
    return PriorPrediction(sid, labels[best], unit[best])


def make_none_label(label_embs: Mapping[GoldCategory, np.ndarray], E) -> tuple[str, np.ndarray]:
    """Vocabulary word nearest (by cosine) to minus the mean of the three label vectors."""
    missing = [c for c in PRIOR_CATEGORIES if c not in label_embs]
    if missing:
        raise ValueError(f"missing label embeddings for {missing}")
    words = getattr(E, "words", None)
    mat = _matrix(E)
    if mat.shape[0] == 0:
        raise ValueError("empty vocabulary")
    target = l2_normalize(-np.mean([label_embs[c] for c in PRIOR_CATEGORIES], axis=0))
    norms = np.linalg.norm(mat, axis=1)
    sims = np.where(norms > 0, (mat @ target) / np.where(norms > 0, norms, 1.0), -np.inf)
    best = int(np.argmax(sims))
    return (words[best] if words is not None else str(best)), mat[best].copy()


def build_cat_model(
    sentences: Sequence[Sentence],
    E,
    seed_words: Mapping[GoldCategory, Sequence[str]] | None = None,
    top_n: int = 200,
    gamma: float | None = None,
) -> CatModel:
    """Candidates from tagged sentences, seed-word labels, and the placeholder label.

    ``gamma`` defaults to 1 / embedding dimension.
    """
    mat = _matrix(E)
    embs: dict[GoldCategory | None, np.ndarray] = dict(label_embeddings(E, seed_words))
    word, none_vec = make_none_label(embs, E)
    embs[None] = none_vec
    return CatModel(
        label_embs=embs,
        candidates=candidate_aspects(sentences, E.vocab, top_n),
        gamma=gamma if gamma is not None else 1.0 / mat.shape[1],
        placeholder_word=word,
    )


def predict_all(sentences: Sequence[Sentence], model: CatModel, E) -> list[PriorPrediction]:
    return [assign_label(s, model, E) for s in sentences]


def predictions_to_jsonl(preds: Iterable[PriorPrediction]) -> bytes:
    lines = [json.dumps({"id": p.id, "label": label_name(p.label)}, sort_keys=True) for p in preds]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def predictions_from_jsonl(data: bytes) -> list[tuple[str, GoldCategory | None]]:
    out = []
    for lineno, line in enumerate(data.decode("utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "id" not in rec or "label" not in rec:
            raise ValueError(f"line {lineno}: prior prediction needs 'id' and 'label'")
        out.append((str(rec["id"]), parse_label(rec["label"])))
    return out
