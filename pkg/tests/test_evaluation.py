import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from lesionkb.errors import LengthMismatch
from lesionkb.evaluation import (
    FieldMetrics,
    GridResult,
    cohens_kappa,
    cost_matrix,
    evaluate,
    field_micro_metrics,
    align_report,
    hungarian_match,
    match_cost_matrix,
    solve_assignment,
)
from lesionkb.schema import LesionFinding


def brute_force(cost):
    n = len(cost)
    return min(sum(cost[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def test_cost_counts_disagreeing_fields():
    g = LesionFinding(lesion_size_mm=(13.0,), lobe="right upper lobe", solidity="solid")
    same_within_tolerance = LesionFinding(lesion_size_mm=(12.95,), lobe="Right Upper Lobe", solidity="solid")
    other = LesionFinding(lesion_size_mm=(5.0,), lobe="left lower lobe")
    assert cost_matrix([g], [same_within_tolerance, other]) == [[0.0, 3.0]]


def test_largest_size_versus_full_size():
    g = LesionFinding(lesion_size_mm=(20.0, 13.0))
    p = LesionFinding(lesion_size_mm=(20.0,))
    assert cost_matrix([g], [p], fields=["lesion_size_mm"]) == [[0.0]]
    assert cost_matrix([g], [p], fields=["lesion_size_mm"], full_size=True) == [[1.0]]


def test_known_assignment():
    m = match_cost_matrix([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert m.total_cost == 5
    assert sorted(m.pairs) == [(0, 1), (1, 0), (2, 2)]


def test_rectangular_padding():
    m = match_cost_matrix([[3.0], [1.0]])
    assert m.pairs == [(1, 0)] and m.unmatched_gold == [0] and m.unmatched_pred == []
    m = match_cost_matrix([[3.0, 1.0]])
    assert m.pairs == [(0, 1)] and m.unmatched_pred == [0]


def test_empty_sides():
    f = LesionFinding(lobe="left upper lobe")
    m = hungarian_match([], [f, f])
    assert m.pairs == [] and m.unmatched_pred == [0, 1]
    assert hungarian_match([f], []).unmatched_gold == [0]


costs = st.integers(1, 6).flatmap(
    lambda n: st.lists(st.lists(st.integers(0, 12), min_size=n, max_size=n), min_size=n, max_size=n))


@settings(max_examples=300)
@given(costs)
def test_assignment_is_optimal(cost):
    assignment = solve_assignment(cost)
    assert sorted(assignment) == list(range(len(cost)))
    assert sum(cost[i][j] for i, j in enumerate(assignment)) == brute_force(cost)


@given(costs, st.randoms(use_true_random=False))
def test_total_cost_invariant_under_permutation(cost, rnd):
    rows = list(range(len(cost)))
    cols = list(range(len(cost)))
    rnd.shuffle(rows)
    rnd.shuffle(cols)
    shuffled = [[cost[r][c] for c in cols] for r in rows]
    assert match_cost_matrix(shuffled).total_cost == match_cost_matrix(cost).total_cost


def test_metric_arithmetic():
    m = FieldMetrics("x", tp=2, fp=1, fn=1)
    assert m.precision == pytest.approx(2 / 3) and m.recall == pytest.approx(2 / 3)
    assert m.f1 == pytest.approx(0.667, abs=1e-3)
    empty = FieldMetrics("x")
    assert empty.undefined and empty.f1 == 0.0


def test_disagreeing_pair_counts_both_ways():
    gold = {"r": [LesionFinding(lobe="right upper lobe", suv=2.0)]}
    pred = {"r": [LesionFinding(lobe="left upper lobe", suv=2.0)]}
    report = evaluate(gold, pred, fields=["lobe", "suv"])
    lobe = report.metrics["lobe"]
    assert (lobe.tp, lobe.fp, lobe.fn) == (0, 1, 1)
    assert report.metrics["suv"].f1 == 1.0


def test_missing_report_counts_as_misses():
    gold = {"a": [LesionFinding(lobe="right upper lobe")], "b": [LesionFinding(lobe="left lower lobe")]}
    pred = {"a": [LesionFinding(lobe="right upper lobe")], "c": [LesionFinding(lobe="left upper lobe")]}
    m = evaluate(gold, pred, fields=["lobe"]).metrics["lobe"]
    assert (m.tp, m.fp, m.fn) == (1, 1, 1)


lobes = st.sampled_from([None, "right upper lobe", "right middle lobe", "left lower lobe"])
sizes = st.one_of(st.none(), st.integers(1, 30).map(lambda n: (float(n),)))
findings = st.builds(LesionFinding, lobe=lobes, lesion_size_mm=sizes)
reports = st.dictionaries(st.sampled_from("abcd"), st.lists(findings, max_size=3), max_size=4)


@settings(max_examples=150)
@given(reports, reports)
def test_recall_denominator_is_gold_count(gold, pred):
    for name in ("lobe", "lesion_size_mm"):
        m = evaluate(gold, pred, fields=[name]).metrics[name]
        present = sum(getattr(f, name) is not None for fs in gold.values() for f in fs)
        assert m.tp + m.fn == present
        predicted = sum(getattr(f, name) is not None for fs in pred.values() for f in fs)
        assert m.tp + m.fp == predicted


@settings(max_examples=100)
@given(reports)
def test_self_evaluation_is_perfect(gold):
    for m in evaluate(gold, gold).metrics.values():
        assert m.undefined or m.f1 == 1.0


def test_kappa_known_table():
    a = ["y"] * 20 + ["y"] * 5 + ["n"] * 5 + ["n"] * 20
    b = ["y"] * 20 + ["n"] * 5 + ["y"] * 5 + ["n"] * 20
    assert cohens_kappa(a, b) == pytest.approx(0.6)
    assert cohens_kappa(b, a) == pytest.approx(0.6)


def test_kappa_edges():
    assert cohens_kappa(["x"] * 4, ["x"] * 4) == 1.0
    # observed agreement equal to chance
    assert cohens_kappa(["y", "y", "n", "n"], ["y", "n", "y", "n"]) == pytest.approx(0.0)
    with pytest.raises(LengthMismatch):
        cohens_kappa(["y"], [])
    with pytest.raises(LengthMismatch):
        cohens_kappa([], [])


@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from("abc")), min_size=1, max_size=40))
def test_kappa_symmetric_and_bounded(pairs):
    a, b = zip(*pairs)
    assert cohens_kappa(a, b) == pytest.approx(cohens_kappa(b, a))
    assert cohens_kappa(a, b) <= 1.0 + 1e-12


def test_grid_tie_break():
    grid = GridResult([(0, 0, 0.5), (2, 1, 0.9), (1, 3, 0.9), (1, 2, 0.9)])
    assert grid.best == (1, 2, 0.9)
    assert GridResult([(3, 3, 0.0)]).best == (3, 3, 0.0)
    assert grid.to_csv().splitlines()[0] == "k_related,k_irrelevant,f1"
    assert grid.to_csv().splitlines()[2] == "2,1,0.900000"


def test_report_json_shape():
    gold = {"r": [LesionFinding(lobe="right upper lobe")]}
    record = evaluate(gold, gold).to_record()
    assert set(record) == {"fields", "matches"}
    assert record["matches"][0]["pairs"] == [[0, 0]]


def test_random_alignment_against_brute_force():
    rnd = random.Random(7)
    for _ in range(50):
        g = [LesionFinding(lobe=rnd.choice(["right upper lobe", "left upper lobe"]),
                           lesion_size_mm=(float(rnd.randint(1, 4)),)) for _ in range(rnd.randint(1, 4))]
        p = [LesionFinding(lobe=rnd.choice(["right upper lobe", "left upper lobe"]),
                           lesion_size_mm=(float(rnd.randint(1, 4)),)) for _ in range(len(g))]
        a = align_report("r", g, p)
        assert a.match.total_cost == brute_force(cost_matrix(g, p))
        assert field_micro_metrics([a], "lobe").tp <= len(g)
