import json

import numpy as np
import pytest

from aoaslu.errors import AlignmentError
from aoaslu.grammar import Span, TargetSequence
from aoaslu.metrics import evaluate, intent_accuracy, overall_accuracy, slot_f1


def brute_force(gold, pred):
    """Naive scorer: list removal for span matching, sorted lists for set/multiset equality."""
    tp = fp = fn = 0
    intent_ok = overall_ok = 0
    for g, p in zip(gold, pred):
        remaining = list(g.slots)
        for s in p.slots:
            if s in remaining:
                remaining.remove(s)
                tp += 1
            else:
                fp += 1
        fn += len(remaining)
        same_intents = sorted(set(g.intents)) == sorted(set(p.intents))
        intent_ok += same_intents
        overall_ok += same_intents and sorted(g.slots) == sorted(p.slots)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    n = len(gold)
    return prec, rec, f1, intent_ok / n, overall_ok / n


def random_target(rng):
    intents = tuple(rng.choice(["A", "B", "C"], size=int(rng.integers(1, 3)), replace=False))
    slots = tuple(Span(int(s), int(s) + int(rng.integers(1, 3)), str(rng.choice(["x", "y"])))
                  for s in rng.integers(0, 4, size=int(rng.integers(0, 4))))
    return TargetSequence(intents, slots)


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        gold = [random_target(rng) for _ in range(n)]
        pred = [random_target(rng) if rng.random() < 0.6 else g for g in gold]
        r = evaluate(gold, pred)
        ref = brute_force(gold, pred)
        assert (r.slot_precision, r.slot_recall, r.slot_f1, r.intent_accuracy, r.overall_accuracy) == ref
        assert r.overall_accuracy <= r.intent_accuracy


def test_identity_is_perfect():
    gold = [TargetSequence(("A",), (Span(0, 1, "x"),)), TargetSequence(("B", "C"), ())]
    assert slot_f1([g.slots for g in gold], [g.slots for g in gold]) == (1.0, 1.0, 1.0)
    assert overall_accuracy(gold, gold) == 1.0


def test_hand_counted_f1():
    a, b, c = Span(0, 1, "x"), Span(2, 3, "y"), Span(4, 5, "z")
    assert slot_f1([[a, b]], [[a, c]]) == (0.5, 0.5, 0.5)
    assert slot_f1([[a]], [[]]) == (0.0, 0.0, 0.0)


def test_duplicate_spans_count_with_multiplicity():
    a = Span(0, 1, "x")
    p, r, f = slot_f1([[a]], [[a, a]])
    assert (p, r) == (0.5, 1.0)


def test_intent_accuracy_is_set_equality():
    assert intent_accuracy([["A", "B"]], [["A"]]) == 0.0
    assert intent_accuracy([["A", "B"]], [["B", "A"]]) == 1.0
    gold = [["A"]] * 4
    assert intent_accuracy(gold, [["A"], ["A"], ["A"], ["B"]]) == 0.75


def test_one_wrong_span_fails_overall():
    g = TargetSequence(("A",), (Span(0, 1, "x"), Span(2, 3, "y")))
    p = TargetSequence(("A",), (Span(0, 1, "x"), Span(2, 4, "y")))
    assert overall_accuracy([g], [p]) == 0.0
    assert intent_accuracy([g.intents], [p.intents]) == 1.0


def test_misaligned_inputs_rejected():
    with pytest.raises(AlignmentError):
        evaluate([TargetSequence(("A",))], [])


def test_breakdown_by_intent_count():
    gold = [TargetSequence(("A",)), TargetSequence(("A", "B")), TargetSequence(("A", "B"))]
    pred = [TargetSequence(("A",)), TargetSequence(("A", "B")), TargetSequence(("A",))]
    r = evaluate(gold, pred)
    assert r.by_intent_count[1]["overall_accuracy"] == 1.0
    assert r.by_intent_count[2]["overall_accuracy"] == 0.5
    assert r.by_intent_count[2]["n_utterances"] == 2
    assert "intents_2.overall_accuracy=0.500000" in r.to_text()
    data = json.loads(r.to_json())
    assert data["semantics"] == "intent_accuracy=exact-set-match"
    assert data["by_intent_count"]["2"]["intent_accuracy"] == 0.5
