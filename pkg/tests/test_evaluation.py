import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anchored_absa.corpus import GoldCategory
from anchored_absa.evaluation import (
    CategoryScore,
    EvalReport,
    EvaluationError,
    apply_mapping,
    auto_mapping,
    check_mapping,
    compare_reports,
    dump_mapping,
    format_comparison,
    format_report,
    load_mapping,
    score,
    summarize,
)

from conftest import toy_embeddings

F, S, A, P, M = (GoldCategory.FOOD, GoldCategory.STAFF, GoldCategory.AMBIENCE, GoldCategory.PRICE, GoldCategory.MISCELLANEOUS)

# (preds, golds, labels, {category: (P, R, F1) in percent}, macro, weighted), counted by hand
FIXTURES = [
    ([F, S, A, F], [F, S, A, F], None, {F: (100, 100, 100), S: (100, 100, 100), A: (100, 100, 100)}, 100, 100),
    (["A", "A", "B", "B", "A", "B"], ["A", "A", "A", "A", "B", "B"], None,
     {"A": (200 / 3, 50, 400 / 7), "B": (100 / 3, 50, 40)}, (400 / 7 + 40) / 2, (4 * 400 / 7 + 80) / 6),
    ([S, A, F], [F, S, A], None, {F: (0, 0, 0), S: (0, 0, 0), A: (0, 0, 0)}, 0, 0),
    ([F, None, None], [F, F, S], None, {F: (100, 50, 200 / 3), S: (0, 0, 0)}, 100 / 3, 400 / 9),
    ([F, M], [F, F], None, {F: (100, 50, 200 / 3), M: (0, 0, 0)}, 100 / 3, 200 / 3),
    ([F, S, S, S], [F, F, S, S], None, {F: (100, 50, 200 / 3), S: (200 / 3, 100, 80)}, 220 / 3, 220 / 3),
    ([A, A, A], [A, A, A], None, {A: (100, 100, 100)}, 100, 100),
    ([F, F, S, S, A, A], [F, F, F, S, S, A], None,
     {F: (100, 200 / 3, 80), S: (50, 50, 50), A: (50, 100, 200 / 3)}, (130 + 200 / 3) / 3, (340 + 200 / 3) / 6),
    ([F, S], [F, S], [F, S, A, P, M], {F: (100, 100, 100), S: (100, 100, 100), A: (0, 0, 0), P: (0, 0, 0), M: (0, 0, 0)}, 40, 100),
    ([A, A, A, A], [F, S, A, A], None, {F: (0, 0, 0), S: (0, 0, 0), A: (50, 100, 200 / 3)}, 200 / 9, 100 / 3),
]


@pytest.mark.parametrize("case", range(len(FIXTURES)))
def test_hand_computed_fixtures(case):
    preds, golds, labels, expected, macro, weighted = FIXTURES[case]
    rep = score(preds, golds, labels)
    assert rep.categories == [getattr(c, "value", c) for c in expected]
    for cat, (p, r, f1) in expected.items():
        row = rep.row(cat)
        assert (row.precision, row.recall, row.f1) == pytest.approx((p, r, f1), abs=1e-9)
    assert rep.macro_f1 == pytest.approx(macro, abs=1e-9)
    assert rep.weighted_f1 == pytest.approx(weighted, abs=1e-9)
    assert rep.total_support == len(golds)


def test_binary_toy_value():
    rep = score(["A", "A", "B", "B", "A", "B"], ["A", "A", "A", "A", "B", "B"])
    assert round(rep.row("A").f1, 2) == 57.14


def test_agrees_with_sklearn():
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(0)
    cats = [F, S, A, P, M]
    for _ in range(20):
        golds = [cats[i] for i in rng.integers(0, 5, 40)]
        preds = [cats[i] for i in rng.integers(0, 5, 40)]
        rep = score(preds, golds, cats)
        p, r, f, sup = metrics.precision_recall_fscore_support(
            [c.value for c in golds], [c.value for c in preds], labels=[c.value for c in cats], zero_division=0
        )
        np.testing.assert_allclose([row.f1 for row in rep.rows], 100 * f, atol=1e-9)
        np.testing.assert_allclose([row.precision for row in rep.rows], 100 * p, atol=1e-9)
        assert rep.macro_f1 == pytest.approx(100 * f.mean())
        assert rep.weighted_f1 == pytest.approx(100 * np.average(f, weights=sup))


def test_score_errors():
    with pytest.raises(EvaluationError):
        score([F], [F, S])
    with pytest.raises(EvaluationError):
        score([], [])


labels = st.sampled_from([F, S, A, P, M])


@given(st.lists(st.tuples(labels, labels), min_size=1, max_size=30), st.randoms())
def test_permutation_invariant(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a = score([p for p, _ in pairs], [g for _, g in pairs])
    b = score([p for p, _ in shuffled], [g for _, g in shuffled])
    assert a == b
    for row in a.rows:
        assert 0 <= row.f1 <= 100
    assert sum(r.support for r in a.rows) == a.total_support


@given(st.lists(labels, min_size=1, max_size=10), st.integers(1, 4))
def test_weighted_equals_macro_with_equal_support(preds_seed, n):
    golds = [F, S, A] * n
    preds = [preds_seed[i % len(preds_seed)] for i in range(len(golds))]
    rep = score(preds, golds, [F, S, A])
    assert rep.weighted_f1 == pytest.approx(rep.macro_f1, abs=1e-9)


@given(st.lists(st.sampled_from([F, S, A]), min_size=1, max_size=30))
def test_derangement_has_zero_recall(golds):
    shift = {F: S, S: A, A: F}
    rep = score([shift[g] for g in golds], golds)
    assert all(r.recall == 0 for r in rep.rows)


def test_unseen_category_scores_zero():
    rep = score([F], [F], [F, P])
    assert rep.row(P).f1 == 0 and rep.row(P).support == 0


class TestMapping:
    def test_load_dump(self):
        text = "# comment\n0\tFood\n1\tservice\n2\tMiscellaneous\n"
        m = load_mapping(text)
        assert m == {0: F, 1: S, 2: M}
        assert load_mapping(dump_mapping(m)) == m
        with pytest.raises(EvaluationError):
            load_mapping("0 Food\n")
        with pytest.raises(EvaluationError):
            load_mapping("0\tFood\n0\tStaff\n")

    def test_apply(self):
        assert apply_mapping([0], {0: F}) == [F]
        ident = {i: c for i, c in enumerate([F, S, A, P, M])}
        assert apply_mapping([4, 3, 2, 1, 0, None], ident) == [M, P, A, S, F, None]
        with pytest.raises(EvaluationError, match="5"):
            apply_mapping([5], ident)

    def test_check(self):
        check_mapping({0: F, 1: S}, 2)
        with pytest.raises(EvaluationError, match=r"\[1\]"):
            check_mapping({0: F}, 2)

    def test_auto_mapping(self):
        E = toy_embeddings({"food": [1.0, 0, 0], "staff": [0, 1.0, 0], "ambience": [0, 0, 1.0], "price": [1.0, 1.0, 1.0]})
        T = np.array([[0.1, 0.9, 0.0], [5.0, 0.2, 0.1], [0.0, 0.1, 2.0], [1.0, 1.0, 1.1]])
        assert auto_mapping(T, E) == {0: S, 1: F, 2: A, 3: P}
        E2 = toy_embeddings({"food": [1.0, 0], "staff": [0, 1.0]})
        assert auto_mapping(np.array([[0.2, 1.0]]), E2) == {0: S}
        with pytest.raises(EvaluationError):
            auto_mapping(T, toy_embeddings({"x": [1.0, 0]}))


# published F1 columns with their supports; precision/recall are not published
SUPPORT = {"Food": 498, "Staff": 224, "Ambience": 150, "Price": 98, "Miscellaneous": 526}
REG_ENSB = {"Food": 67.95, "Staff": 61.39, "Ambience": 63.44, "Price": 36.36, "Miscellaneous": 70.55}
ABAE = {"Food": 64.64, "Staff": 56.43, "Ambience": 58.43, "Price": 32.20, "Miscellaneous": 66.86}
CAT = {"Food": 64.00, "Staff": 50.93, "Ambience": 33.06, "Price": None, "Miscellaneous": None}


def f1_rows(column):
    return [
        CategoryScore(c, f or 0.0, f or 0.0, f or 0.0, SUPPORT[c], 0 if f is None else SUPPORT[c])
        for c, f in column.items()
    ]


def table_report():
    return summarize(f1_rows(REG_ENSB))


def test_published_averages():
    reg, abae = summarize(f1_rows(REG_ENSB)), summarize(f1_rows(ABAE))
    assert (round(reg.macro_f1, 2), round(reg.weighted_f1, 2), reg.total_support) == (59.94, 65.36, 1496)
    assert (round(abae.macro_f1, 2), round(abae.weighted_f1, 2)) == (55.71, 61.44)
    cat = summarize(f1_rows(CAT))
    # NA rows count as 0 in both averages here; the published 49.33 averages only the three scored rows
    assert round(cat.weighted_f1, 2) == 32.25
    assert round(cat.macro_f1, 2) == 29.60
    assert round(summarize(f1_rows(CAT)[:3]).macro_f1, 2) == 49.33


def test_report_formatting():
    text = format_report(table_report(), title="Reg Ensb")
    lines = text.splitlines()
    assert lines[0] == "Reg Ensb"
    assert lines[-2].split() == ["Macro", "Average", "59.94", "1496"]
    assert lines[-1].split() == ["Weighted", "Average", "65.36", "1496"]
    assert lines[2].split()[0] == "Food" and lines[2].split()[3:] == ["67.95", "498"]


def test_comparison_shows_na():
    text = format_comparison({"CAt": summarize(f1_rows(CAT)), "ABAE": summarize(f1_rows(ABAE)), "Reg Ensb": table_report()})
    lines = {line.split()[0]: line.split() for line in text.splitlines()[1:] if line and not line.startswith("-")}
    assert lines["Price"][1:] == ["NA", "32.20", "36.36", "98"]
    assert lines["Miscellaneous"][1:] == ["NA", "66.86", "70.55", "526"]
    assert lines["Macro"][2:] == ["29.60", "55.71", "59.94", "1496"]


def test_json_round_trip():
    rep = score([F, S, S, A], [F, S, A, A])
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    assert format_report(back) == format_report(rep)


def test_compare():
    a, b = table_report(), table_report()
    d = compare_reports(a, b)
    assert d["macro_f1"] == 0 and all(v == 0 for c in d["categories"].values() for v in c.values())
    abae = summarize(f1_rows(ABAE))
    assert round(compare_reports(abae, a)["macro_f1"], 2) == 4.23
    assert compare_reports(a, abae)["macro_f1"] == -compare_reports(abae, a)["macro_f1"]
    assert compare_reports(abae, a)["categories"]["Food"]["f1"] == pytest.approx(67.95 - 64.64)
    with pytest.raises(EvaluationError):
        compare_reports(a, score([F], [F]))


def test_perfect_predictions():
    rep = score([F, S, A, P, M], [F, S, A, P, M])
    assert all(r.f1 == 100 for r in rep.rows)
    assert "100.00" in format_report(rep)
