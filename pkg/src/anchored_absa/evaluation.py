"""Aspect-to-category mapping and per-category P/R/F1 reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from .corpus import CATEGORY_ORDER, GoldCategory
from .numerics import l2_normalize_rows

AUTO_MAPPING_SEEDS: dict[GoldCategory, tuple[str, ...]] = {
    GoldCategory.FOOD: ("food",),
    GoldCategory.STAFF: ("staff",),
    GoldCategory.AMBIENCE: ("ambience",),
    GoldCategory.PRICE: ("price",),
}


class EvaluationError(ValueError):
    pass


def load_mapping(text: str) -> dict[int, GoldCategory]:
    """Parse ``aspect_id<TAB>Category`` lines."""
    mapping = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise EvaluationError(f"mapping line {lineno}: expected 'aspect_id<TAB>Category'")
        aid = int(parts[0])
        if aid in mapping:
            raise EvaluationError(f"mapping line {lineno}: aspect {aid} mapped twice")
        mapping[aid] = GoldCategory.parse(parts[1])
    return mapping


def dump_mapping(mapping: Mapping[int, GoldCategory]) -> str:
    return "".join(f"{aid}\t{mapping[aid].value}\n" for aid in sorted(mapping))


def check_mapping(mapping: Mapping[int, GoldCategory], k: int) -> None:
    missing = [a for a in range(k) if a not in mapping]
    if missing:
        raise EvaluationError(f"mapping does not cover aspects {missing}")


def auto_mapping(T: np.ndarray, E, seed_words: Mapping[GoldCategory, Sequence[str]] | None = None) -> dict[int, GoldCategory]:
    """Map each aspect row to the category whose seed-word vector is nearest in cosine.

    Categories whose seed words are not all in the vocabulary are left out.
    """
    seed_words = seed_words or AUTO_MAPPING_SEEDS
    cats = [c for c, words in seed_words.items() if words and all(w in E for w in words)]
    if not cats:
        raise EvaluationError("no category has its seed words in the vocabulary")
    S = np.stack([np.mean([E[w] for w in seed_words[c]], axis=0) for c in cats])
    sims = l2_normalize_rows(np.asarray(T, dtype=np.float64)) @ l2_normalize_rows(S).T
    return {i: cats[int(j)] for i, j in enumerate(np.argmax(sims, axis=1))}


def apply_mapping(aspect_preds: Sequence[int | None], mapping: Mapping[int, GoldCategory]) -> list[GoldCategory | None]:
    out = []
    for a in aspect_preds:
        if a is None:
            out.append(None)
        elif a not in mapping:
            raise EvaluationError(f"aspect id {a} has no mapping (mapped ids: {sorted(mapping)})")
        else:
            out.append(mapping[a])
    return out


@dataclass(frozen=True)
class CategoryScore:
    category: str
    precision: float  # percent
    recall: float
    f1: float
    support: int
    predicted: int = 0


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[CategoryScore, ...]
    macro_f1: float
    weighted_f1: float
    total_support: int

    def row(self, category) -> CategoryScore:
        name = _name(category)
        for r in self.rows:
            if r.category == name:
                return r
        raise KeyError(name)

    @property
    def categories(self) -> list[str]:
        return [r.category for r in self.rows]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        rows = tuple(CategoryScore(**r) for r in obj["rows"])
        return cls(rows, obj["macro_f1"], obj["weighted_f1"], obj["total_support"])


def _name(label) -> str:
    return label.value if isinstance(label, GoldCategory) else str(label)


def _label_order(labels) -> list:
    if all(isinstance(x, GoldCategory) for x in labels):
        return sorted(labels, key=CATEGORY_ORDER.__getitem__)
    return sorted(labels, key=str)


def score(preds: Sequence[Hashable | None], golds: Sequence[Hashable], labels: Sequence[Hashable] | None = None) -> EvalReport:
    """One-vs-rest precision, recall and F1 per category, in percent.

    Rows cover ``labels`` when given, otherwise every category seen in either
    stream. A ``None`` prediction counts as a miss for the gold category and
    as a false positive for nobody. F1 is 0 when precision + recall is 0.
    Macro is the plain mean of the row F1s; weighted uses gold support.
    """
    if len(preds) != len(golds):
        raise EvaluationError(f"{len(preds)} predictions for {len(golds)} gold labels")
    if not golds:
        raise EvaluationError("nothing to score")
    if labels is None:
        labels = _label_order({g for g in golds} | {p for p in preds if p is not None})
    rows = []
    for lab in labels:
        tp = sum(1 for p, g in zip(preds, golds) if p == lab and g == lab)
        n_pred = sum(1 for p in preds if p == lab)
        support = sum(1 for g in golds if g == lab)
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        rows.append(CategoryScore(_name(lab), 100 * precision, 100 * recall, 100 * f1, support, n_pred))
    return summarize(rows)


def summarize(rows: Sequence[CategoryScore]) -> EvalReport:
    """Macro (plain mean) and support-weighted F1 over the rows.

    Every row counts, so a category a model never predicts enters both
    averages with F1 0.
    """
    total = sum(r.support for r in rows)
    macro = float(np.mean([r.f1 for r in rows])) if rows else 0.0
    weighted = sum(r.f1 * r.support for r in rows) / total if total else 0.0
    return EvalReport(tuple(rows), macro, weighted, total)


def format_report(report: EvalReport, title: str | None = None) -> str:
    width = max([len("Weighted Average")] + [len(r.category) for r in report.rows])
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'':<{width}}  {'Precision':>9}  {'Recall':>9}  {'F1':>9}  {'Support':>8}")
    for r in report.rows:
        lines.append(f"{r.category:<{width}}  {r.precision:9.2f}  {r.recall:9.2f}  {r.f1:9.2f}  {r.support:8d}")
    lines.append("-" * len(lines[-1]))
    lines.append(f"{'Macro Average':<{width}}  {'':>9}  {'':>9}  {report.macro_f1:9.2f}  {report.total_support:8d}")
    lines.append(f"{'Weighted Average':<{width}}  {'':>9}  {'':>9}  {report.weighted_f1:9.2f}  {report.total_support:8d}")
    return "\n".join(lines) + "\n"


def format_comparison(reports: Mapping[str, EvalReport]) -> str:
    """F1 per model side by side; ``NA`` where a model never predicts a category."""
    names = list(reports)
    cats: list[str] = []
    for rep in reports.values():
        cats.extend(c for c in rep.categories if c not in cats)
    support = {}
    for rep in reports.values():
        for r in rep.rows:
            support.setdefault(r.category, r.support)
    width = max([len("Weighted Average")] + [len(c) for c in cats])
    colw = max(9, *(len(n) for n in names))
    header = f"{'F1 Scores':<{width}}  " + "  ".join(f"{n:>{colw}}" for n in names) + f"  {'Support':>8}"
    lines = [header]
    for c in cats:
        cells = []
        for rep in reports.values():
            try:
                r = rep.row(c)
            except KeyError:
                r = None
            cells.append(f"{'NA':>{colw}}" if r is None or r.predicted == 0 else f"{r.f1:{colw}.2f}")
        lines.append(f"{c:<{width}}  " + "  ".join(cells) + f"  {support[c]:8d}")
    lines.append("-" * len(header))
    total = next(iter(reports.values())).total_support if reports else 0
    for label, attr in (("Macro Average", "macro_f1"), ("Weighted Average", "weighted_f1")):
        cells = "  ".join(f"{getattr(rep, attr):{colw}.2f}" for rep in reports.values())
        lines.append(f"{label:<{width}}  {cells}  {total:8d}")
    return "\n".join(lines) + "\n"


def compare_reports(a: EvalReport, b: EvalReport) -> dict:
    """Signed deltas ``b - a`` per category metric plus the two averages."""
    if a.categories != b.categories:
        raise EvaluationError(f"category sets differ: {a.categories} vs {b.categories}")
    per_cat = {
        ra.category: {
            "precision": rb.precision - ra.precision,
            "recall": rb.recall - ra.recall,
            "f1": rb.f1 - ra.f1,
        }
        for ra, rb in zip(a.rows, b.rows)
    }
    return {
        "categories": per_cat,
        "macro_f1": b.macro_f1 - a.macro_f1,
        "weighted_f1": b.weighted_f1 - a.weighted_f1,
    }
