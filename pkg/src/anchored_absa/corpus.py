"""Review corpus ingestion: tokenization, SemEval/JSONL parsing, vocabulary."""

from __future__ import annotations

import enum
import json
import re
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Iterable, Sequence


class CorpusError(ValueError):
    """Malformed or inconsistent corpus input."""


class UnknownCategoryError(CorpusError):
    pass


class GoldCategory(str, enum.Enum):
    FOOD = "Food"
    STAFF = "Staff"
    AMBIENCE = "Ambience"
    PRICE = "Price"
    MISCELLANEOUS = "Miscellaneous"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, name: str) -> "GoldCategory":
        key = name.strip().lower()
        if key in _CATEGORY_ALIASES:
            return _CATEGORY_ALIASES[key]
        raise UnknownCategoryError(
            f"unknown aspect category {name!r} (expected one of {[c.value for c in cls]} or a SemEval name)"
        )


# SemEval-2014 restaurant category names, plus our own enum values.
SEMEVAL_CATEGORIES = {
    "food": GoldCategory.FOOD,
    "service": GoldCategory.STAFF,
    "ambience": GoldCategory.AMBIENCE,
    "price": GoldCategory.PRICE,
    "anecdotes/miscellaneous": GoldCategory.MISCELLANEOUS,
}
_CATEGORY_ALIASES = {
    **SEMEVAL_CATEGORIES,
    **{c.value.lower(): c for c in GoldCategory},
    "misc": GoldCategory.MISCELLANEOUS,
}

CATEGORY_ORDER = {c: i for i, c in enumerate(GoldCategory)}

POS_TAGS = ("NOUN", "ADJ", "VERB", "OTHER")


def coarse_pos(tag: str) -> str:
    """Collapse Universal / Penn Treebank tags onto NOUN, ADJ, VERB, OTHER."""
    t = tag.strip().upper()
    if t in POS_TAGS:
        return t
    if t in ("PROPN",) or t.startswith("NN"):
        return "NOUN"
    if t.startswith("JJ"):
        return "ADJ"
    if t == "AUX" or t.startswith("VB"):
        return "VERB"
    return "OTHER"


@dataclass(frozen=True)
class Token:
    surface: str
    norm: str
    pos: str | None = None

    def __post_init__(self):
        if not self.norm:
            raise CorpusError("token norm must be non-empty")
        if self.pos is not None and self.pos not in POS_TAGS:
            raise CorpusError(f"POS tag {self.pos!r} not in {POS_TAGS}")


@dataclass(frozen=True)
class Sentence:
    """One review sentence.

    ``categories`` holds every distinct annotated category; ``gold`` is only
    defined for single-aspect sentences. ``token_ids`` is filled by
    :meth:`Vocabulary.encode` and omits out-of-vocabulary tokens.
    """

    id: str
    text: str
    tokens: tuple[Token, ...]
    categories: tuple[GoldCategory, ...] = ()
    token_ids: tuple[int, ...] = ()

    @property
    def gold(self) -> GoldCategory | None:
        return self.categories[0] if len(self.categories) == 1 else None

    @property
    def words(self) -> list[str]:
        return [t.norm for t in self.tokens]

    @property
    def tagged(self) -> bool:
        return bool(self.tokens) and all(t.pos is not None for t in self.tokens)


_WORD_RE = re.compile(r"[^\W_]+(?:['’\-][^\W_]+)*")


def _split(text: str) -> list[str]:
    return _WORD_RE.findall(text)


def _norm(surface: str) -> str:
    return surface.lower().replace("’", "'")


def tokenize(text: str, stopwords: Iterable[str] = ()) -> list[Token]:
    """Lowercase, strip punctuation (internal hyphens/apostrophes survive), drop stopwords."""
    stop = stopwords if isinstance(stopwords, (set, frozenset)) else set(stopwords)
    out = []
    for surface in _split(text):
        norm = _norm(surface)
        if norm not in stop:
            out.append(Token(surface, norm))
    return out


def load_stopwords(path=None) -> frozenset[str]:
    """Read one word per line; ``None`` gives the bundled English list."""
    if path is None:
        text = resources.files("anchored_absa.data").joinpath("stopwords_en.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip())


def _dedupe(cats: Iterable[GoldCategory]) -> tuple[GoldCategory, ...]:
    return tuple(dict.fromkeys(cats))


def parse_semeval_xml(data: bytes, stopwords: Iterable[str] = ()) -> list[Sentence]:
    """Parse a SemEval-2014 ABSA restaurant file (aspectCategory annotations only)."""
    stop = frozenset(stopwords)
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, col = exc.position
        raise CorpusError(f"malformed XML at line {line}, column {col}: {exc}") from exc
    sentences = []
    for n, elem in enumerate(root.iter("sentence")):
        text_elem = elem.find("text")
        text = text_elem.text if text_elem is not None and text_elem.text else ""
        cats = []
        for ac in elem.iter("aspectCategory"):
            name = ac.get("category", "")
            if name.lower() not in SEMEVAL_CATEGORIES:
                raise UnknownCategoryError(
                    f"sentence {elem.get('id', n)!s}: unknown category {name!r} "
                    f"(expected one of {sorted(SEMEVAL_CATEGORIES)})"
                )
            cats.append(SEMEVAL_CATEGORIES[name.lower()])
        sentences.append(
            Sentence(
                id=elem.get("id", str(n)),
                text=text,
                tokens=tuple(tokenize(text, stop)),
                categories=_dedupe(cats),
            )
        )
    return sentences


def _attach_pos(tokens: list[Token], raw: list[str], pos: Sequence, stop: frozenset, where: str) -> list[Token]:
    tags = [None if p is None else coarse_pos(p) for p in pos]
    if len(tags) == len(tokens):
        return [replace(t, pos=p) for t, p in zip(tokens, tags)]
    if len(tags) == len(raw):
        # tags aligned with the text before stopword removal
        kept = [p for w, p in zip(raw, tags) if _norm(w) not in stop]
        return [replace(t, pos=p) for t, p in zip(tokens, kept)]
    raise CorpusError(
        f"{where}: pos has {len(tags)} tags but the text has {len(tokens)} tokens "
        f"({len(raw)} before stopword removal)"
    )


def parse_jsonl(data: bytes, stopwords: Iterable[str] = ()) -> list[Sentence]:
    """Parse one JSON object per line: ``text`` plus optional ``id``, ``pos``,
    ``tokens``, ``category`` or ``categories``.

    When ``tokens`` is present it is used verbatim instead of re-tokenizing.
    """
    stop = frozenset(stopwords)
    sentences = []
    for lineno, line in enumerate(data.decode("utf-8").split("\n"), start=1):
        if not line.strip():
            continue
        where = f"line {lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{where}: invalid JSON: {exc.msg}") from exc
        if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
            raise CorpusError(f"{where}: missing required string field 'text'")
        text = rec["text"]
        if "tokens" in rec:
            tokens = [Token(s, _norm(s)) for s in rec["tokens"]]
            raw = list(rec["tokens"])
        else:
            tokens = tokenize(text, stop)
            raw = _split(text)
        if rec.get("pos") is not None:
            tokens = _attach_pos(tokens, raw, rec["pos"], stop, where)
        if rec.get("categories") is not None:
            cats = [GoldCategory.parse(c) for c in rec["categories"]]
        elif rec.get("category") is not None:
            cats = [GoldCategory.parse(rec["category"])]
        else:
            cats = []
        sentences.append(
            Sentence(
                id=str(rec.get("id", lineno - 1)),
                text=text,
                tokens=tuple(tokens),
                categories=_dedupe(cats),
            )
        )
    return sentences


def to_jsonl(sentences: Iterable[Sentence]) -> bytes:
    """Serialize in the form :func:`parse_jsonl` reads back unchanged."""
    lines = []
    for s in sentences:
        rec: dict = {"id": s.id, "text": s.text, "tokens": [t.surface for t in s.tokens]}
        if any(t.pos is not None for t in s.tokens):
            rec["pos"] = [t.pos for t in s.tokens]
        if len(s.categories) == 1:
            rec["category"] = s.categories[0].value
        elif s.categories:
            rec["categories"] = [c.value for c in s.categories]
        lines.append(json.dumps(rec, ensure_ascii=False, sort_keys=True))
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def tag_sentences(sentences: Iterable[Sentence], tagger: Callable[[list[str]], Sequence[str]]) -> list[Sentence]:
    """Attach coarse POS tags using any callable mapping surfaces to tags."""
    out = []
    for s in sentences:
        tags = list(tagger([t.surface for t in s.tokens]))
        if len(tags) != len(s.tokens):
            raise CorpusError(f"sentence {s.id}: tagger returned {len(tags)} tags for {len(s.tokens)} tokens")
        toks = tuple(replace(t, pos=coarse_pos(p)) for t, p in zip(s.tokens, tags))
        out.append(replace(s, tokens=toks))
    return out


def filter_single_aspect(sentences: Iterable[Sentence]) -> list[Sentence]:
    """Drop sentences annotated with more than one category; unlabeled ones stay."""
    return [s for s in sentences if len(s.categories) <= 1]


@dataclass
class Vocabulary:
    words: list[str]
    counts: list[int] | None = None
    min_count: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            dup = [w for w, c in Counter(self.words).items() if c > 1]
            raise CorpusError(f"duplicate vocabulary words: {dup[:5]}")
        if self.counts is not None and len(self.counts) != len(self.words):
            raise CorpusError("counts and words differ in length")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index[word]

    def encode(self, sentence: Sentence) -> Sentence:
        ids = tuple(self.index[t.norm] for t in sentence.tokens if t.norm in self.index)
        return replace(sentence, token_ids=ids)

    def encode_all(self, sentences: Iterable[Sentence]) -> list[Sentence]:
        return [self.encode(s) for s in sentences]

    def to_text(self) -> bytes:
        counts = self.counts if self.counts is not None else [0] * len(self.words)
        return "".join(f"{w}\t{c}\n" for w, c in zip(self.words, counts)).encode("utf-8")

    @classmethod
    def from_text(cls, data: bytes) -> "Vocabulary":
        words, counts = [], []
        for lineno, line in enumerate(data.decode("utf-8").split("\n"), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"vocabulary line {lineno}: expected 'word<TAB>count'")
            words.append(parts[0])
            counts.append(int(parts[1]))
        return cls(words, counts, min_count=min(counts) if counts else 1)


def build_vocab(sentences: Iterable[Sentence], min_count: int = 10) -> Vocabulary:
    """Ids in descending frequency, ties broken lexicographically."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    freq = Counter(t.norm for s in sentences for t in s.tokens)
    if not freq:
        raise CorpusError("empty corpus: no tokens to build a vocabulary from")
    kept = sorted(((w, c) for w, c in freq.items() if c >= min_count), key=lambda wc: (-wc[1], wc[0]))
    return Vocabulary([w for w, _ in kept], [c for _, c in kept], min_count=min_count)
