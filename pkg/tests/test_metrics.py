from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from groundrag.gateway import Gateway, GatewayHTTPError, LexicalJudge, ScriptedMock, any_request
from groundrag.metrics import (
    MetricError,
    RetrievalEvalSample,
    TokenIndex,
    doc_passage_recall,
    doc_recall,
    hallucination_f1,
    judge_panel_score,
    levenshtein,
    mcqa_score,
    mrr_at,
    nls,
    passage_recall,
    ref_retrieved_ratio_at,
    relevance_flags,
    token_metrics,
    token_scores,
    win_rate,
)

# -- token-level ------------------------------------------------------------


def test_token_scores_set_example():
    s = token_scores([[1, 2, 3, 4]], [3, 4, 5])
    assert (s.iou, s.precision) == (0.4, 0.5)
    assert s.recall == pytest.approx(2 / 3, abs=1e-15)


def test_token_scores_trivial():
    same = token_scores([[1, 2, 3]], [1, 2, 3])
    assert same.iou == same.precision == same.recall == 1.0
    disjoint = token_scores([[7, 8]], [1, 2])
    assert disjoint.iou == disjoint.precision == disjoint.recall == 0.0


def test_token_scores_empty_gold_is_error():
    with pytest.raises(MetricError):
        token_scores([[1]], [])


def test_overlapping_chunks_count_twice_in_retrieved_total():
    # the same word in two chunks lowers precision but not the intersection
    s = token_scores([[1, 2], [2, 3]], [2])
    assert (s.intersection, s.retrieved) == (1, 4)
    assert s.precision == 0.25


def test_token_metrics_map_character_ranges_to_words():
    docs = {"d": "alpha beta gamma delta epsilon"}
    tokens = TokenIndex(docs)
    # "beta gamma" is chars 6..16; "gam" covers part of a word -> whole word counts
    assert list(tokens.positions("d", 6, 16)) == [1, 2]
    assert list(tokens.positions("d", 12, 13)) == [2]
    assert list(tokens.positions("d", 5, 6)) == []  # only whitespace
    sample = RetrievalEvalSample("q", [("d", 6, 16)], [("d", 0, 10), ("d", 11, 22)])
    s = token_metrics(sample, tokens)
    assert (s.intersection, s.retrieved, s.gold) == (2, 4, 2)


def test_token_index_rejects_bad_range():
    tokens = TokenIndex({"d": "abc"})
    with pytest.raises(MetricError):
        tokens.positions("d", 2, 10)
    with pytest.raises(MetricError):
        tokens.positions("x", 0, 1)


def test_doc_passage_recall_counting_example():
    docs = {"a": "one two three four five six", "b": "seven eight nine"}
    tokens = TokenIndex(docs)
    sample = RetrievalEvalSample("q", [("a", 0, 7), ("b", 0, 5)], [("a", 0, 3), ("a", 4, 13), ("a", 19, 27)])
    assert relevance_flags(sample, tokens) == [True, True, False]
    assert passage_recall(relevance_flags(sample, tokens)) == pytest.approx(2 / 3, abs=1e-15)
    assert doc_recall(sample, tokens) == 0.5  # doc b never retrieved
    with pytest.raises(MetricError):
        doc_passage_recall([], tokens)


def test_rrr_and_mrr_examples():
    assert ref_retrieved_ratio_at([[True], [True]], 10) == 1.0
    assert ref_retrieved_ratio_at([[False], [False]], 10) == 0.0
    hits_1_and_11 = [[True], [False] * 10 + [True]]
    assert ref_retrieved_ratio_at(hits_1_and_11, 10) == 0.5
    ranks_1_2_4 = [[True], [False, True], [False, False, False, True]]
    assert mrr_at(ranks_1_2_4, 10) == pytest.approx(7 / 12, abs=1e-12)
    assert mrr_at([[False] * 10 + [True]], 10) == 0.0


# -- OCR --------------------------------------------------------------------


@pytest.mark.parametrize(
    "a,b,expected",
    [("", "", 1.0), ("abc", "abc", 1.0), ("", "abc", 0.0), ("kitten", "sitting", 1 - 3 / 7)],
)
def test_nls_examples(a, b, expected):
    assert nls(a, b) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet="abcxyz é", max_size=25), st.text(alphabet="abcxyz é", max_size=25))
def test_levenshtein_matches_dp_table(a, b):
    assert levenshtein(a, b) == oracles.edit_distance(a, b)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=30), st.text(max_size=30))
def test_nls_symmetric_in_range(a, b):
    v = nls(a, b)
    assert v == nls(b, a)
    assert 0.0 <= v <= 1.0
    assert nls(a, a) == 1.0


# -- answers ----------------------------------------------------------------


def test_win_rate_examples():
    assert win_rate([(5, 0, 0)]) == 1.0
    assert win_rate([(1, 1, 0)]) == 0.75
    assert win_rate([(2, 0, 2), (0, 4, 0)]) == 0.5
    with pytest.raises(MetricError):
        win_rate([(0, 0, 0)])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50)).filter(lambda t: sum(t) > 0), min_size=1, max_size=6))
def test_win_rate_complement(tallies):
    mirrored = [(l, t, w) for w, t, l in tallies]
    assert win_rate(tallies) + win_rate(mirrored) == pytest.approx(1.0, abs=1e-12)


def test_mcqa_examples():
    assert mcqa_score([{"A"}], [{"A"}]) == (1.0, 1.0)
    assert mcqa_score([{"A"}], [{"A", "C"}]) == (0.0, 0.5)
    assert mcqa_score([set()], [{"B"}]) == (0.0, 0.0)


def test_hallucination_f1_examples():
    assert hallucination_f1([1, 0, 1], [1, 0, 1]) == 1.0
    assert hallucination_f1([1, 0, 1, 0], [0, 1, 0, 1]) == 0.0
    # TP=2, FP=1, FN=1
    pred = ["hallucinated", "hallucinated", "hallucinated", "grounded", "grounded"]
    gold = ["hallucinated", "hallucinated", "grounded", "hallucinated", "grounded"]
    assert hallucination_f1(pred, gold) == pytest.approx(2 / 3, abs=1e-15)


def _constant_judges(*scores):
    return {f"j{i}": Gateway({"judge": LexicalJudge(s)}) for i, s in enumerate(scores)}


def test_judge_panel_examples():
    assert judge_panel_score("q", "a", "r", _constant_judges(5, 5, 5, 5)).mean == 100.0
    assert judge_panel_score("q", "a", "r", _constant_judges(0, 0)).mean == 0.0
    panel = judge_panel_score("q", "a", "r", _constant_judges(5, 4, 4, 3))
    assert panel.mean == 80.0
    assert panel.per_judge == {"j0": 100.0, "j1": 80.0, "j2": 80.0, "j3": 60.0}


def test_judge_panel_excludes_unparsable_judge():
    judges = _constant_judges(5, 3)
    judges["bad"] = Gateway({"judge": ScriptedMock([(any_request, "I think it's fine")])})
    panel = judge_panel_score("q", "a", "r", judges)
    assert panel.mean == 80.0
    assert panel.per_judge["bad"] is None
    assert any("bad" in f for f in panel.flags)


def test_judge_panel_all_failed():
    broken = {"x": Gateway({"judge": ScriptedMock([(any_request, GatewayHTTPError(400))])})}
    panel = judge_panel_score("q", "a", "r", broken)
    assert panel.mean is None and "all judges failed" in panel.flags


# -- bounds -----------------------------------------------------------------


@settings(max_examples=150, deadline=None)
@given(st.lists(st.lists(st.booleans(), max_size=15), min_size=1, max_size=8), st.integers(1, 12))
def test_mrr_bounded_by_rrr(relevance, n):
    mrr, rrr = mrr_at(relevance, n), ref_retrieved_ratio_at(relevance, n)
    assert 0.0 <= mrr <= rrr <= 1.0


@settings(max_examples=150, deadline=None)
@given(st.lists(st.lists(st.integers(0, 30), max_size=10), max_size=4), st.sets(st.integers(0, 30), min_size=1))
def test_iou_at_most_precision_and_recall(retrieved, gold):
    s = token_scores(retrieved, gold)
    assert s.iou <= min(s.precision, s.recall) + 1e-15
    assert all(0.0 <= v <= 1.0 for v in (s.iou, s.precision, s.recall))


def test_levenshtein_long_unicode():
    a = "ΔΣ" * 40 + "x"
    b = "ΣΔ" * 40
    assert levenshtein(a, b) == oracles.edit_distance(a, b)
    assert math.isclose(nls(a, b), float(oracles.nls(a, b)), rel_tol=1e-12)
