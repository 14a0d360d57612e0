import math
import random

import numpy as np
import pytest

from mirror_ie.errors import LengthMismatch, SpaceMismatch
from mirror_ie.evaluation import (
    ClassificationMetric,
    EvalReport,
    MatchStrategy,
    classification_metrics,
    corpus_micro_f1,
    corpus_upper_bound,
    event_metrics,
    matthews_cc,
    micro_f1,
    recover_positions,
    string_match_upper_bound,
    token_f1,
)
from mirror_ie.graph import LabelAnchor, MultiSlotTuple, TextSpan
from mirror_ie.synth import duplicate_surface_corpus


def span(s, e):
    return TextSpan(((s, e),))


A = MultiSlotTuple((LabelAnchor(1), span(5, 6)))
B = MultiSlotTuple((LabelAnchor(1), span(8, 8)))
C = MultiSlotTuple((LabelAnchor(2), span(8, 8)))


def naive_counts(pred, gold):
    """Independent oracle: walk deduplicated predictions and strike matched gold items."""
    remaining = [g.key() for g in gold]
    seen, tp, n_pred = set(), 0, 0
    for p in pred:
        k = p.key()
        if k in seen:
            continue
        seen.add(k)
        n_pred += 1
        if k in remaining:
            remaining.remove(k)
            tp += 1
    return tp, n_pred - tp, len(gold) - tp


def random_tuple(rng):
    slots = [LabelAnchor(int(rng.integers(0, 3)))]
    for _ in range(int(rng.integers(1, 3))):
        s = int(rng.integers(3, 9))
        slots.append(span(s, s + int(rng.integers(0, 2))))
    return MultiSlotTuple(tuple(slots))


def test_hand_counted():
    r = micro_f1([A, B], [B, C])
    assert (r.precision, r.recall, r.f1) == (0.5, 0.5, 0.5)
    assert (r.tp, r.fp, r.fn) == (1, 1, 1)


def test_identity():
    r = micro_f1([A, B, C], [C, B, A])
    assert r.precision == r.recall == r.f1 == 1.0


def test_empty_cases():
    r = micro_f1([], [])
    assert r.f1 == 0.0 and r.tp == r.fp == r.fn == 0
    assert micro_f1([A], []).precision == 0.0


def test_gold_is_multiset_predictions_deduplicated():
    r = micro_f1([A, A], [A, A])
    assert (r.tp, r.fp, r.fn) == (1, 0, 1)


def test_against_naive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        pred = [random_tuple(rng) for _ in range(int(rng.integers(0, 6)))]
        gold = [random_tuple(rng) for _ in range(int(rng.integers(0, 6)))]
        r = micro_f1(pred, gold)
        assert (r.tp, r.fp, r.fn) == naive_counts(pred, gold)
        assert r.tp + r.fp == len({p.key() for p in pred})
        assert r.tp + r.fn == len(gold)


def test_symmetry_and_monotonicity():
    rng = np.random.default_rng(1)
    for _ in range(300):
        pred = list({random_tuple(rng) for _ in range(4)})
        gold = list({random_tuple(rng) for _ in range(4)})
        r, s = micro_f1(pred, gold), micro_f1(gold, pred)
        assert r.precision == s.recall and r.recall == s.precision
        missing = [g for g in gold if g not in pred]
        if missing:
            assert micro_f1(pred + missing[:1], gold).f1 >= r.f1
        wrong = MultiSlotTuple((LabelAnchor(99), span(99, 99)))
        assert micro_f1(pred + [wrong], gold).precision <= r.precision


def test_corpus_additivity():
    rng = np.random.default_rng(2)
    pred_docs = {f"d{i}": [random_tuple(rng) for _ in range(3)] for i in range(20)}
    gold_docs = {f"d{i}": [random_tuple(rng) for _ in range(3)] for i in range(20)}
    total = EvalReport()
    for doc in pred_docs:
        total = total + micro_f1(pred_docs[doc], gold_docs[doc])
    corpus = corpus_micro_f1(pred_docs, gold_docs)
    assert (corpus.tp, corpus.fp, corpus.fn) == (total.tp, total.fp, total.fn)


def test_no_cross_document_matches():
    r = corpus_micro_f1({"a": [A]}, {"b": [A]})
    assert r.tp == 0 and r.fp == 1 and r.fn == 1


def test_space_mismatch():
    with pytest.raises(SpaceMismatch):
        micro_f1([MultiSlotTuple((span(30, 31),))], [], length=20)


def test_per_label_breakdown():
    names = {1: "person", 2: "place"}
    r = micro_f1([A, C], [A, B], label_of=lambda t: names[t.slots[0].position])
    assert r.per_label["person"] == (1.0, 0.5, pytest.approx(2 / 3))
    assert r.per_label["place"] == (0.0, 0.0, 0.0)


def test_event_decomposition():
    ev, role1, role2 = LabelAnchor(1), LabelAnchor(3), LabelAnchor(4)
    gold = [MultiSlotTuple((ev, span(10, 10), role1, span(12, 13), role2, span(15, 15)))]
    # right trigger, one right argument, one argument with wrong span
    pred = [MultiSlotTuple((ev, span(10, 10), role1, span(12, 13), role2, span(16, 16)))]
    out = event_metrics(pred, gold)
    assert out["trigger"].f1 == 1.0
    assert (out["argument"].tp, out["argument"].fp, out["argument"].fn) == (1, 1, 1)


# ---------------------------------------------------------------- classification


def mcc_direct(tp, tn, fp, fn):
    denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return 0.0 if denom == 0 else (tp * tn - fp * fn) / denom


def test_perfect_classification():
    gold = [0, 1, 1, 0, 2]
    assert classification_metrics(gold, gold, "accuracy") == 1.0
    assert classification_metrics(gold, gold, ClassificationMetric.MATTHEWS) == 1.0


def test_constant_predictor_mcc_zero():
    assert classification_metrics([1] * 10, [0, 1] * 5, "mcc") == 0.0


def test_mcc_matches_direct_formula():
    rng = random.Random(3)
    for _ in range(500):
        tp, tn, fp, fn = (rng.randint(0, 30) for _ in range(4))
        gold = [1] * tp + [0] * tn + [0] * fp + [1] * fn
        pred = [1] * tp + [0] * tn + [1] * fp + [0] * fn
        assert abs(matthews_cc(pred, gold) - mcc_direct(tp, tn, fp, fn)) < 1e-12


def test_mcc_multiclass_against_sklearn():
    sklearn_metrics = pytest.importorskip("sklearn.metrics")
    rng = random.Random(4)
    for _ in range(100):
        gold = [rng.randrange(4) for _ in range(40)]
        pred = [rng.randrange(4) for _ in range(40)]
        assert abs(matthews_cc(pred, gold) - sklearn_metrics.matthews_corrcoef(gold, pred)) < 1e-12


def test_mrc_metrics():
    assert classification_metrics(["The Snow White"], ["snow white"], "em") == 1.0
    assert token_f1("Snow White beauty", "Snow White") == pytest.approx(2 * (2 / 3) * 1 / (2 / 3 + 1))
    with pytest.raises(LengthMismatch):
        classification_metrics(["a"], [], "accuracy")


# ---------------------------------------------------------------- string-matching upper bound


def test_mirror_exact_is_perfect():
    for entities, tokens in duplicate_surface_corpus(0, 50):
        assert string_match_upper_bound(entities, tokens, MatchStrategy.MIRROR_EXACT).f1 == 1.0


def test_forced_ambiguity():
    tokens = ["Tom", "met", "Tom"]
    gold = [(["Tom"], range(0, 1)), (["Tom"], range(2, 3))]
    assert string_match_upper_bound(gold, tokens, "first").f1 < 1.0


def test_longer_first_handles_nested_surface():
    tokens = "new york city is not new york".split()
    gold = [(["new", "york", "city"], range(0, 3)), (["new", "york"], range(5, 7))]
    assert recover_positions(gold, tokens, "first") == [range(0, 3), range(0, 2)]
    assert recover_positions(gold, tokens, "longer_first") == [range(0, 3), range(5, 7)]


def first_by_char_search(surface, tokens):
    """Oracle for FIRST: search the space-joined text and map the char offset back to a token."""
    text = " " + " ".join(tokens) + " "
    at = text.find(" " + " ".join(surface) + " ")
    if at < 0:
        return None
    start = text[:at + 1].count(" ") - 1
    return range(start, start + len(surface))


def best_assignment_f1(entities, tokens):
    """Exhaustive oracle: the best F1 any occurrence-per-entity assignment can reach."""
    import itertools

    options = []
    for surface, _ in entities:
        occ = [range(i, i + len(surface)) for i in range(len(tokens)) if tokens[i : i + len(surface)] == surface]
        options.append(occ)
    gold = [(r.start, r.stop) for _, r in entities]
    best = 0.0
    for choice in itertools.product(*options):
        best = max(best, micro_f1([(r.start, r.stop) for r in choice], gold).f1)
    return best


def test_upper_bounds_against_assignment_oracle():
    corpus = duplicate_surface_corpus(1, 60)
    for entities, tokens in corpus:
        first = recover_positions(entities, tokens, "first")
        assert first == [first_by_char_search(s, tokens) for s, _ in entities]
        best = best_assignment_f1(entities, tokens)
        for strategy in ("first", "longer_first"):
            assert string_match_upper_bound(entities, tokens, strategy).f1 <= best + 1e-12
        assert string_match_upper_bound(entities, tokens, "mirror_exact").f1 >= best


def test_duplicate_heavy_corpus_below_exact():
    corpus = duplicate_surface_corpus(2, 200)
    first = corpus_upper_bound(corpus, "first").f1
    longer = corpus_upper_bound(corpus, "longer_first").f1
    exact = corpus_upper_bound(corpus, "mirror_exact").f1
    assert exact == 1.0
    assert first < 1.0 and longer < 1.0
    assert longer >= first
