"""Position-exact metrics.

Tuples match only when every slot matches exactly: the same label anchors and
the same token intervals, in order. Gold is counted as a multiset (each gold
occurrence must be matched once). Predictions are deduplicated by match key
before counting.
"""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Hashable, Iterable, Mapping, Sequence

from .errors import LengthMismatch, SpaceMismatch
from .graph import LabelAnchor, MultiSlotTuple


def prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass
class EvalReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_label: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return prf(self.tp, self.tp + self.fp, self.tp + self.fn)[0]

    @property
    def recall(self) -> float:
        return prf(self.tp, self.tp + self.fp, self.tp + self.fn)[1]

    @property
    def f1(self) -> float:
        return prf(self.tp, self.tp + self.fp, self.tp + self.fn)[2]

    def __add__(self, other: EvalReport) -> EvalReport:
        return EvalReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "per_label": {k: {"precision": p, "recall": r, "f1": f} for k, (p, r, f) in sorted(self.per_label.items())},
        }


def match_key(t) -> Hashable:
    if isinstance(t, MultiSlotTuple):
        return t.key()
    return t


def _count(pred: Iterable, gold: Iterable, key) -> tuple[int, int, int, Counter, Counter]:
    pred_keys = Counter({key(t): 1 for t in pred})
    gold_keys = Counter(key(t) for t in gold)
    tp = sum((pred_keys & gold_keys).values())
    return tp, sum(pred_keys.values()) - tp, sum(gold_keys.values()) - tp, pred_keys, gold_keys


def micro_f1(
    pred: Iterable,
    gold: Iterable,
    length: int | None = None,
    label_of: Callable[[object], str] | None = None,
    key: Callable[[object], Hashable] = match_key,
) -> EvalReport:
    """Exact-match micro P/R/F1 of predicted tuples against gold tuples.

    If ``length`` is given, predicted positions must lie in [0, length).
    ``label_of`` maps a tuple to a label name for the per-label breakdown.
    """
    pred, gold = list(pred), list(gold)
    if length is not None:
        for t in pred:
            if isinstance(t, MultiSlotTuple) and any(not 0 <= p < length for p in t.chain()):
                raise SpaceMismatch(f"{t} references positions beyond length {length}")
    tp, fp, fn, _, _ = _count(pred, gold, key)
    report = EvalReport(tp, fp, fn)
    if label_of is not None:
        for label in sorted({label_of(t) for t in pred} | {label_of(t) for t in gold}):
            ltp, lfp, lfn, _, _ = _count(
                [t for t in pred if label_of(t) == label], [t for t in gold if label_of(t) == label], key
            )
            report.per_label[label] = prf(ltp, ltp + lfp, ltp + lfn)
    return report


def corpus_micro_f1(
    pred_docs: Mapping[str, Iterable],
    gold_docs: Mapping[str, Iterable],
    label_of: Callable[[str, object], str] | None = None,
) -> EvalReport:
    """Micro counts summed over documents. Tuples never match across documents."""
    pred, gold = [], []
    for doc in sorted(set(pred_docs) | set(gold_docs)):
        pred += [(doc, match_key(t)) for t in dict.fromkeys(match_key(t) for t in pred_docs.get(doc, ()))]
        gold += [(doc, match_key(t)) for t in gold_docs.get(doc, ())]
    labeler = None
    if label_of is not None:
        originals = {}
        for doc, items in list(pred_docs.items()) + list(gold_docs.items()):
            for t in items:
                originals[(doc, match_key(t))] = label_of(doc, t)
        labeler = originals.__getitem__
    return micro_f1(pred, gold, label_of=labeler, key=lambda x: x)


# ---------------------------------------------------------------- task decompositions

def event_units(t: MultiSlotTuple) -> tuple[tuple, list[tuple]]:
    """Split an event tuple (event, trigger, role, arg, role, arg, ...) into a trigger
    key (event, trigger) and argument keys (event, role, arg)."""
    slots = t.slots
    event, trigger = slots[0], slots[1]
    trig = (event, trigger)
    args = [(event, slots[i], slots[i + 1]) for i in range(2, len(slots) - 1, 2)]
    return trig, args


def event_metrics(pred: Iterable[MultiSlotTuple], gold: Iterable[MultiSlotTuple]) -> dict[str, EvalReport]:
    def explode(ts):
        trigs, args = [], []
        for t in ts:
            trig, a = event_units(t)
            trigs.append(trig)
            args.extend(a)
        return trigs, args

    pt, pa = explode(pred)
    gt, ga = explode(gold)
    return {"trigger": micro_f1(pt, gt), "argument": micro_f1(pa, ga)}


# ---------------------------------------------------------------- classification / MRC

class ClassificationMetric(str, Enum):
    ACCURACY = "accuracy"
    MATTHEWS = "mcc"
    EXACT_MATCH = "em"
    TOKEN_F1 = "token_f1"


def matthews_cc(pred: Sequence, gold: Sequence) -> float:
    """Multi-class MCC from the confusion table; 0 when the denominator vanishes."""
    labels = sorted(set(pred) | set(gold), key=repr)
    n = len(gold)
    if n == 0:
        return 0.0
    correct = sum(p == g for p, g in zip(pred, gold))
    pred_counts = Counter(pred)
    gold_counts = Counter(gold)
    cov = correct * n - sum(pred_counts[k] * gold_counts[k] for k in labels)
    pp = n * n - sum(pred_counts[k] ** 2 for k in labels)
    gg = n * n - sum(gold_counts[k] ** 2 for k in labels)
    if pp == 0 or gg == 0:
        return 0.0
    return cov / math.sqrt(pp * gg)


_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> str:
    text = text.lower()
    text = "".join(ch for ch in text if ch not in set(string.punctuation))
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def token_f1(pred: str, gold: str) -> float:
    p, g = normalize_answer(pred).split(), normalize_answer(gold).split()
    if not p or not g:
        return float(p == g)
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


def classification_metrics(pred: Sequence, gold: Sequence, kind: ClassificationMetric | str) -> float:
    kind = ClassificationMetric(kind)
    if len(pred) != len(gold):
        raise LengthMismatch(f"{len(pred)} predictions for {len(gold)} gold items")
    if kind is ClassificationMetric.MATTHEWS:
        return matthews_cc(pred, gold)
    if not gold:
        return 0.0
    if kind is ClassificationMetric.ACCURACY:
        return sum(p == g for p, g in zip(pred, gold)) / len(gold)
    if kind is ClassificationMetric.EXACT_MATCH:
        return sum(normalize_answer(p) == normalize_answer(g) for p, g in zip(pred, gold)) / len(gold)
    return sum(token_f1(p, g) for p, g in zip(pred, gold)) / len(gold)


# ---------------------------------------------------------------- string-matching upper bound

class MatchStrategy(str, Enum):
    FIRST = "first"
    LONGER_FIRST = "longer_first"
    MIRROR_EXACT = "mirror_exact"


def find_occurrences(needle: Sequence[str], haystack: Sequence[str]) -> list[range]:
    n = len(needle)
    return [range(i, i + n) for i in range(len(haystack) - n + 1) if list(haystack[i : i + n]) == list(needle)]


def recover_positions(
    gold_entities: Sequence[tuple[Sequence[str], range]],
    tokens: Sequence[str],
    strategy: MatchStrategy | str,
) -> list[range | None]:
    """Positions a string-matching indexer would assign to each gold entity string.

    FIRST takes the first occurrence of every string. LONGER_FIRST handles
    longer strings first and gives each the first occurrence not overlapping
    an already assigned span, falling back to the first occurrence.
    MIRROR_EXACT keeps the gold positions.
    """
    strategy = MatchStrategy(strategy)
    if strategy is MatchStrategy.MIRROR_EXACT:
        return [pos for _, pos in gold_entities]
    if strategy is MatchStrategy.FIRST:
        out = []
        for surface, _ in gold_entities:
            occ = find_occurrences(surface, tokens)
            out.append(occ[0] if occ else None)
        return out
    order = sorted(range(len(gold_entities)), key=lambda i: -len(gold_entities[i][0]))
    taken: set[int] = set()
    out: list[range | None] = [None] * len(gold_entities)
    for i in order:
        occ = find_occurrences(gold_entities[i][0], tokens)
        free = [r for r in occ if not taken.intersection(r)]
        choice = free[0] if free else (occ[0] if occ else None)
        if choice is not None:
            taken.update(choice)
        out[i] = choice
    return out


def string_match_upper_bound(
    gold_entities: Sequence[tuple[Sequence[str], range]],
    tokens: Sequence[str],
    strategy: MatchStrategy | str,
) -> EvalReport:
    """Score string-matched positions against the gold positions of one document.

    gold_entities holds (surface tokens, gold token range) pairs. tokens is the
    tokenized text.
    """
    recovered = recover_positions(gold_entities, tokens, strategy)
    pred = [(r.start, r.stop) for r in recovered if r is not None]
    gold = [(pos.start, pos.stop) for _, pos in gold_entities]
    return micro_f1(pred, gold)


def corpus_upper_bound(
    corpus: Iterable[tuple[Sequence[tuple[Sequence[str], range]], Sequence[str]]],
    strategy: MatchStrategy | str,
) -> EvalReport:
    total = EvalReport()
    for gold_entities, tokens in corpus:
        total = total + string_match_upper_bound(gold_entities, tokens, strategy)
    return total


def tuple_label(t: MultiSlotTuple, names: Mapping[int, str]) -> str:
    """Label name of a tuple's first anchor slot, or "<span>" for label-free tuples."""
    for slot in t.slots:
        if isinstance(slot, LabelAnchor):
            return names.get(slot.position, f"@{slot.position}")
    return "<span>"
