"""Combining the CAt prior with ABAE: a rule-based vote and anchored regularization."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import abae
from ._anchor import anchored_penalty, anchored_penalty_grad  # noqa: F401  (re-exported)
from .cat import DEFAULT_SEED_WORDS, PRIOR_CATEGORIES, label_embeddings
from .corpus import GoldCategory, Sentence
from .numerics import l2_normalize, l2_normalize_rows


class EnsembleError(ValueError):
    pass


class CandidateMode(str, enum.Enum):
    NOUNS_AND_ADJECTIVES = "nn-adj"
    NOUNS_ONLY = "nn"

    @property
    def tags(self) -> frozenset[str]:
        return frozenset({"NOUN", "ADJ"}) if self is CandidateMode.NOUNS_AND_ADJECTIVES else frozenset({"NOUN"})


class Fallback(str, enum.Enum):
    ABAE_THEN_MISC = "abae-misc"
    MISC_ONLY = "misc"


class Provenance(str, enum.Enum):
    AGREEMENT = "Agreement"
    DISAMBIGUATED = "Disambiguated"
    ABAE_FALLBACK = "AbaeFallback"
    MISCELLANEOUS = "Miscellaneous"


@dataclass(frozen=True)
class RuleConfig:
    candidate_mode: CandidateMode = CandidateMode.NOUNS_AND_ADJECTIVES
    disambiguation_scope: frozenset[GoldCategory] = frozenset(PRIOR_CATEGORIES)  # empty disables it
    fallback: Fallback = Fallback.ABAE_THEN_MISC

    def __post_init__(self):
        extra = set(self.disambiguation_scope) - set(PRIOR_CATEGORIES)
        if extra:
            raise EnsembleError(f"disambiguation scope may only contain {PRIOR_CATEGORIES}, got {sorted(extra)}")

    @property
    def scope_in_order(self) -> list[GoldCategory]:
        return [c for c in PRIOR_CATEGORIES if c in self.disambiguation_scope]


# The four rule-ensemble experiment variants.
PRESETS = {
    "NN-ADJ": RuleConfig(CandidateMode.NOUNS_AND_ADJECTIVES),
    "Only-NN": RuleConfig(CandidateMode.NOUNS_ONLY),
    "ABAE-misc": RuleConfig(disambiguation_scope=frozenset()),
    "NN-ADJ-FoSt": RuleConfig(disambiguation_scope=frozenset({GoldCategory.FOOD, GoldCategory.STAFF})),
}


@dataclass(frozen=True)
class EnsemblePrediction:
    id: str
    category: GoldCategory
    provenance: Provenance


def candidate_words(sentence: Sentence, mode: CandidateMode, E) -> list[str]:
    """Nouns (and adjectives) of the sentence that have embeddings, in sentence order."""
    tags = mode.tags
    return [t.norm for t in sentence.tokens if t.pos in tags and t.norm in E]


def most_similar_category(words: Sequence[str], categories: Sequence[GoldCategory], label_embs, E) -> GoldCategory:
    """Category of the (word, category) pair with the highest cosine.

    Ties keep the earliest category, then the earliest word.
    """
    W = l2_normalize_rows(np.stack([E[w] for w in words]))
    L = l2_normalize_rows(np.stack([label_embs[c] for c in categories]))
    sims = L @ W.T  # categories x words, row-major argmax gives the tie order
    return categories[int(np.argmax(sims)) // len(words)]


def _as_map(preds) -> dict:
    items = preds.items() if isinstance(preds, Mapping) else preds
    out = {}
    for sid, label in items:
        if sid in out:
            raise EnsembleError(f"duplicate prediction for sentence {sid!r}")
        out[sid] = label
    return out


def rule_ensemble(
    cat_preds,
    abae_preds,
    sentences: Sequence[Sentence],
    E,
    config: RuleConfig | None = None,
    label_embs: Mapping[GoldCategory, np.ndarray] | None = None,
) -> list[EnsemblePrediction]:
    """Vote between the prior and ABAE, one category per sentence.

    ``cat_preds`` / ``abae_preds`` map sentence id to a category or ``None``
    (CAt's placeholder label, or a sentence ABAE could not score). Agreement
    wins outright. A conflict touching the disambiguation scope goes to the
    most similar in-scope category of the sentence's candidate words, or to
    Miscellaneous when there are none. Other conflicts take ABAE's answer
    (``Fallback.ABAE_THEN_MISC``) or Miscellaneous.
    """
    config = config or RuleConfig()
    cat_map, abae_map = _as_map(cat_preds), _as_map(abae_preds)
    ids = [s.id for s in sentences]
    if set(cat_map) != set(abae_map) or set(cat_map) != set(ids):
        missing = sorted((set(ids) ^ set(cat_map)) | (set(ids) ^ set(abae_map)))
        raise EnsembleError(f"prediction sets do not cover the same sentence ids (e.g. {missing[:5]})")
    scope = config.scope_in_order
    if scope and label_embs is None:
        label_embs = label_embeddings(E, {c: DEFAULT_SEED_WORDS[c] for c in scope})

    out = []
    for s in sentences:
        c, a = cat_map[s.id], abae_map[s.id]
        if c is not None and c == a:
            out.append(EnsemblePrediction(s.id, c, Provenance.AGREEMENT))
        elif scope and (c in scope or a in scope):
            words = candidate_words(s, config.candidate_mode, E)
            if words:
                best = most_similar_category(words, scope, label_embs, E)
                out.append(EnsemblePrediction(s.id, best, Provenance.DISAMBIGUATED))
            else:
                out.append(EnsemblePrediction(s.id, GoldCategory.MISCELLANEOUS, Provenance.MISCELLANEOUS))
        elif config.fallback is Fallback.ABAE_THEN_MISC and a is not None:
            out.append(EnsemblePrediction(s.id, a, Provenance.ABAE_FALLBACK))
        else:
            out.append(EnsemblePrediction(s.id, GoldCategory.MISCELLANEOUS, Provenance.MISCELLANEOUS))
    return out


def fill_unassigned(
    preds,
    sentences: Sequence[Sentence],
    E,
    mode: CandidateMode | None = None,
    categories: Sequence[GoldCategory] = PRIOR_CATEGORIES,
    label_embs: Mapping[GoldCategory, np.ndarray] | None = None,
) -> list[EnsemblePrediction]:
    """Complete a prediction set that has gaps (``None``), e.g. from the anchored model.

    With a candidate mode, gaps get the most similar category of the
    sentence's candidate words; otherwise (or without candidates) Miscellaneous.
    """
    pred_map = _as_map(preds)
    if mode is not None and label_embs is None:
        label_embs = label_embeddings(E, {c: DEFAULT_SEED_WORDS[c] for c in categories})
    out = []
    for s in sentences:
        if s.id not in pred_map:
            raise EnsembleError(f"no prediction for sentence {s.id!r}")
        p = pred_map[s.id]
        if p is not None:
            out.append(EnsemblePrediction(s.id, p, Provenance.ABAE_FALLBACK))
            continue
        words = candidate_words(s, mode, E) if mode is not None else []
        if words:
            out.append(EnsemblePrediction(s.id, most_similar_category(words, categories, label_embs, E), Provenance.DISAMBIGUATED))
        else:
            out.append(EnsemblePrediction(s.id, GoldCategory.MISCELLANEOUS, Provenance.MISCELLANEOUS))
    return out


def ensemble_to_jsonl(preds: Iterable[EnsemblePrediction]) -> bytes:
    lines = [
        json.dumps({"id": p.id, "category": p.category.value, "provenance": p.provenance.value}, sort_keys=True)
        for p in preds
    ]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


@dataclass
class AnchorSet:
    """Frozen prior-label directions, one row per training sentence.

    ``mask[i] == 1`` exactly when sentence i's prior label is Food, Staff or
    Ambience; placeholder-labelled rows never contribute to the penalty.
    """

    ids: list[str]
    rows: np.ndarray
    mask: np.ndarray
    sigma: float = 0.1
    labels: list[GoldCategory | None] = field(default_factory=list)

    def __post_init__(self):
        if self.sigma < 0:
            raise EnsembleError("sigma must be non-negative")
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.rows.shape[0] != len(self.ids) or self.mask.shape != (len(self.ids),):
            raise EnsembleError("anchor rows, mask and ids differ in length")
        norms = np.linalg.norm(self.rows[self.mask > 0], axis=1)
        if not np.allclose(norms, 1.0, atol=1e-12):
            raise EnsembleError("masked-in anchor rows must have unit norm")

    def align(self, sentence_ids: Sequence[str]) -> "AnchorSet":
        """Reorder to match a training corpus; every sentence needs an anchor."""
        pos = {sid: i for i, sid in enumerate(self.ids)}
        missing = [sid for sid in sentence_ids if sid not in pos]
        if missing:
            raise EnsembleError(f"{len(missing)} training sentences have no prior label (e.g. {missing[:5]})")
        order = [pos[sid] for sid in sentence_ids]
        labels = [self.labels[i] for i in order] if self.labels else []
        return AnchorSet(list(sentence_ids), self.rows[order], self.mask[order], self.sigma, labels)


def build_anchors(
    prior_preds,
    E,
    sigma: float = 0.1,
    seed_words: Mapping[GoldCategory, Sequence[str]] | None = None,
    placeholder_word: str | None = None,
) -> AnchorSet:
    """Unit label vectors for each prior prediction, masked to Food/Staff/Ambience.

    ``prior_preds`` is a sequence of (sentence id, label) with ``None`` for
    the placeholder. Label vectors come from the seed words; a seed word
    missing from the embeddings is an error.
    """
    seed_words = seed_words or DEFAULT_SEED_WORDS
    unknown = [w for c in PRIOR_CATEGORIES for w in seed_words[c] if w not in E]
    if unknown:
        raise EnsembleError(f"label words missing from the embedding vocabulary: {unknown}")
    unit = {c: l2_normalize(v) for c, v in label_embeddings(E, seed_words).items()}
    if placeholder_word is not None:
        if placeholder_word not in E:
            raise EnsembleError(f"placeholder word {placeholder_word!r} missing from the embedding vocabulary")
        none_row = l2_normalize(E[placeholder_word])
    else:
        none_row = np.zeros(np.asarray(getattr(E, "vectors", E)).shape[1])
    pairs = list(prior_preds.items() if isinstance(prior_preds, Mapping) else prior_preds)
    ids, rows, mask, labels = [], [], [], []
    for sid, label in pairs:
        if label is not None and label not in unit:
            raise EnsembleError(f"sentence {sid!r}: prior label {label} is outside {PRIOR_CATEGORIES}")
        ids.append(sid)
        labels.append(label)
        rows.append(none_row if label is None else unit[label])
        mask.append(0.0 if label is None else 1.0)
    d = len(none_row)
    return AnchorSet(ids, np.array(rows).reshape(len(ids), d), np.array(mask), sigma, labels)


def anchored_train(corpus: Sequence[Sentence], E, hyper: abae.AbaeHyper | None = None, anchors: AnchorSet | None = None):
    """ABAE training with the anchor penalty added to every batch loss."""
    if anchors is not None and anchors.ids and [s.id for s in corpus] != anchors.ids:
        anchors = anchors.align([s.id for s in corpus])
    return abae.train(corpus, E, hyper, anchors)
