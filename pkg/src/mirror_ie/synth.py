"""Deterministic synthetic tasks and hand-built fixtures.

Every generated gold tuple is planted next to a lexical cue, so a small
contextual scorer can learn to recover it:

* NER: the entity (a run of ``e*`` words) follows the type word, e.g. ``person e3 e7``
* discontinuous NER: ``person e3 and e9`` links the pieces ``e3`` and ``e9``;
  ``person e1 e2 or e5`` holds two entities sharing ``e1`` (``e1 e2`` and ``e1 ... e5``)
* RE: ``e1 founder e4``; n-ary RE continues with marker words, ``e1 founder e4 with e6``
* EE: the event word is the trigger, each argument follows its role word
* MRC: the answer follows the question word named in the instruction
* classification: the background text mentions the gold class word

Filler words (``w*``) pad the text; they never carry gold.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum

from .data import CharSpan, LabelKind, LabelRef, SchemaLabel, TaskInstance, TextKind, TextPart
from .errors import SpecInfeasible

MENTION_TYPES = ["person", "place", "company", "product", "disease", "drug"]
RELATIONS = ["founder", "resident", "employee", "owner", "partner", "rival"]
EVENTS = ["attack", "merger", "election", "trial"]
ROLES = ["agent", "target", "venue", "time"]
CLASSES = ["positive", "negative", "neutral", "mixed"]
QUESTIONS = ["alpha", "beta", "gamma", "delta"]
GAP_WORD = "and"
SHARED_WORD = "or"
ARG_MARKERS = ["with", "at", "via", "from", "for", "by"]

INSTRUCTIONS = {
    "flat_ner": "Please identify possible entities .",
    "disc_ner": "Please identify possible entities , including discontinuous ones .",
    "re": "Please extract relation triplets from the text .",
    "hyper_re": "Please extract n-ary relation tuples .",
    "ee": "Please extract events and their arguments .",
    "cls": "Which class does the text belong to ?",
}


class TaskShape(str, Enum):
    FLAT_NER = "flat_ner"
    DISC_NER = "disc_ner"
    RE = "re"
    HYPER_RE = "hyper_re"
    EE = "ee"
    MRC = "mrc"
    CLS = "cls"


class OverlapPolicy(str, Enum):
    DISJOINT = "disjoint"
    ALLOW_SHARED = "allow_shared"


@dataclass
class SynthSpec:
    seed: int = 0
    task_shape: TaskShape = TaskShape.FLAT_NER
    vocab_size: int = 50
    # words per text, not counting the closing period
    text_length: tuple[int, int] = (12, 32)
    labels_per_instance: tuple[int, int] = (2, 4)
    tuples_per_instance: tuple[int, int] = (1, 3)
    overlap_policy: OverlapPolicy = OverlapPolicy.ALLOW_SHARED
    # slots per n-ary relation tuple, relation anchor included
    arity: int = 4

    def __post_init__(self):
        self.task_shape = TaskShape(self.task_shape)
        self.overlap_policy = OverlapPolicy(self.overlap_policy)
        self.text_length = tuple(self.text_length)
        self.labels_per_instance = tuple(self.labels_per_instance)
        self.tuples_per_instance = tuple(self.tuples_per_instance)
        if self.vocab_size < 4:
            raise SpecInfeasible("vocab_size must be at least 4")
        if self.arity < 2:
            raise SpecInfeasible("arity must be at least 2")
        for name in ("text_length", "labels_per_instance", "tuples_per_instance"):
            lo, hi = getattr(self, name)
            if lo < 1 or lo > hi:
                raise SpecInfeasible(f"bad range for {name}: {(lo, hi)}")


MAX_ATTEMPTS = 50


class _Overflow(Exception):
    pass


class _Builder:
    """Accumulates units (word lists with gold markers) and renders one instance."""

    def __init__(self, spec: SynthSpec, rng: random.Random):
        self.spec = spec
        self.rng = rng
        n_entity = max(2, spec.vocab_size // 2)
        self.entity_words = [f"e{i}" for i in range(n_entity)]
        self.filler_words = [f"w{i}" for i in range(max(2, spec.vocab_size - n_entity))]
        self.units: list[list[str]] = []
        # gold slots refer to (unit index, word offset range) or label indices
        self.tuples: list[list] = []

    def entity(self, lo=1, hi=3) -> list[str]:
        return [self.rng.choice(self.entity_words) for _ in range(self.rng.randint(lo, hi))]

    def add_unit(self, words: list[str]) -> int:
        self.units.append(words)
        return len(self.units) - 1

    def render(self, instance_id, instruction, labels, text_kind) -> TaskInstance:
        lo, hi = self.spec.text_length
        unit_words = sum(len(u) for u in self.units)
        gaps = max(len(self.units) - 1, 0)
        if unit_words + gaps > hi:
            raise _Overflow(f"{len(self.units)} planted units need {unit_words + gaps} words > {hi}")
        target = self.rng.randint(max(lo, unit_words + gaps), hi)
        fillers = target - unit_words
        # slots between/around units; inner gaps get at least one filler
        counts = [0] + [1] * gaps + [0]
        for _ in range(fillers - gaps):
            counts[self.rng.randrange(len(counts))] += 1

        words, unit_start = [], []
        for k, unit in enumerate(self.units):
            words += [self.rng.choice(self.filler_words) for _ in range(counts[k])]
            unit_start.append(len(words))
            words += unit
        words += [self.rng.choice(self.filler_words) for _ in range(counts[-1])]
        words.append(".")

        offsets, pos = [], 0
        for w in words:
            offsets.append((pos, pos + len(w)))
            pos += len(w) + 1
        text = " ".join(words)

        def char_piece(unit, a, b):
            first = unit_start[unit] + a
            last = unit_start[unit] + b - 1
            return offsets[first][0], offsets[last][1]

        gold = []
        for t in self.tuples:
            slots = []
            for slot in t:
                if slot[0] == "label":
                    slots.append(LabelRef(slot[1]))
                else:
                    _, unit, pieces = slot
                    slots.append(CharSpan(tuple(char_piece(unit, a, b) for a, b in pieces)))
            gold.append(tuple(slots))
        return TaskInstance(instance_id, instruction, tuple(labels), TextPart(text_kind, text), tuple(gold))


def _pick_labels(rng, inventory, spec, need):
    lo, hi = spec.labels_per_instance
    hi = min(hi, len(inventory))
    k = rng.randint(min(max(lo, need), hi), hi) if max(lo, need) <= hi else None
    if k is None:
        raise SpecInfeasible(f"need {need} distinct labels, inventory has {len(inventory)}")
    return rng.sample(inventory, k)


def _n_tuples(rng, spec):
    lo, hi = spec.tuples_per_instance
    return rng.randint(lo, hi)


def _generate_one(spec: SynthSpec, rng: random.Random, instance_id: str) -> TaskInstance:
    b = _Builder(spec, rng)
    shape = spec.task_shape
    disjoint = spec.overlap_policy is OverlapPolicy.DISJOINT
    n = _n_tuples(rng, spec)

    if shape in (TaskShape.FLAT_NER, TaskShape.DISC_NER):
        names = _pick_labels(rng, MENTION_TYPES, spec, n if disjoint else 1)
        labels = [SchemaLabel(LabelKind.MENTION, x) for x in names]
        types = rng.sample(range(len(names)), n) if disjoint else [rng.randrange(len(names)) for _ in range(n)]
        for ti in types:
            mode = "flat" if shape is TaskShape.FLAT_NER else rng.choice(["flat", "disc", "shared"])
            if mode == "shared" and disjoint:
                mode = "disc"
            if mode == "flat":
                ent = b.entity()
                u = b.add_unit([names[ti]] + ent)
                b.tuples.append([("label", ti), ("span", u, [(1, 1 + len(ent))])])
            elif mode == "disc":
                p1, p2 = b.entity(1, 2), b.entity(1, 2)
                u = b.add_unit([names[ti]] + p1 + [GAP_WORD] + p2)
                second = 2 + len(p1)
                b.tuples.append([("label", ti), ("span", u, [(1, 1 + len(p1)), (second, second + len(p2))])])
            else:
                # "muscle pain and fatigue": one shared head, a contiguous and a discontinuous entity
                head, tail1, tail2 = b.entity(1, 1), b.entity(1, 1), b.entity(1, 1)
                u = b.add_unit([names[ti]] + head + tail1 + [SHARED_WORD] + tail2)
                b.tuples.append([("label", ti), ("span", u, [(1, 3)])])
                b.tuples.append([("label", ti), ("span", u, [(1, 2), (4, 5)])])
        return b.render(instance_id, INSTRUCTIONS[shape.value], labels, TextKind.LABEL_LINKED)

    if shape in (TaskShape.RE, TaskShape.HYPER_RE):
        n_args = 2 if shape is TaskShape.RE else spec.arity - 1
        names = _pick_labels(rng, RELATIONS, spec, n if disjoint else 1)
        labels = [SchemaLabel(LabelKind.RELATION, x) for x in names]
        rels = rng.sample(range(len(names)), n) if disjoint else [rng.randrange(len(names)) for _ in range(n)]
        k = 0
        while k < len(rels):
            ri = rels[k]
            chained = not disjoint and shape is TaskShape.RE and k + 1 < len(rels) and rng.random() < 0.5
            if chained:
                # A r1 B r2 C -> (r1, A, B) and (r2, B, C): B is shared
                a, mid, c = b.entity(1, 2), b.entity(1, 2), b.entity(1, 2)
                r2 = rels[k + 1]
                words = a + [names[ri]] + mid + [names[r2]] + c
                u = b.add_unit(words)
                sa = (0, len(a))
                sb = (len(a) + 1, len(a) + 1 + len(mid))
                sc = (sb[1] + 1, sb[1] + 1 + len(c))
                b.tuples.append([("label", ri), ("span", u, [sa]), ("span", u, [sb])])
                b.tuples.append([("label", r2), ("span", u, [sb]), ("span", u, [sc])])
                k += 2
                continue
            words, spans = [], []
            for m in range(n_args):
                if m == 1:
                    words.append(names[ri])
                elif m > 1:
                    words.append(ARG_MARKERS[(m - 2) % len(ARG_MARKERS)])
                ent = b.entity(1, 2)
                spans.append((len(words), len(words) + len(ent)))
                words += ent
            u = b.add_unit(words)
            b.tuples.append([("label", ri)] + [("span", u, [s]) for s in spans])
            k += 1
        return b.render(instance_id, INSTRUCTIONS[shape.value], labels, TextKind.LABEL_LINKED)

    if shape is TaskShape.EE:
        ev_names = _pick_labels(rng, EVENTS, spec, n if disjoint else 1)
        role_names = rng.sample(ROLES, rng.randint(2, len(ROLES)))
        labels = [SchemaLabel(LabelKind.MENTION, x) for x in ev_names]
        labels += [SchemaLabel(LabelKind.RELATION, x) for x in role_names]
        events = rng.sample(range(len(ev_names)), n) if disjoint else [rng.randrange(len(ev_names)) for _ in range(n)]
        free_roles = list(range(len(role_names)))
        rng.shuffle(free_roles)
        for ei in events:
            n_args = rng.randint(1, 2)
            if disjoint:
                if len(free_roles) < n_args:
                    n_args = len(free_roles)
                roles = [free_roles.pop() for _ in range(n_args)]
            else:
                roles = rng.sample(range(len(role_names)), min(n_args, len(role_names)))
            words = [ev_names[ei]]
            slots = [("label", ei), ("span", None, [(0, 1)])]
            for ri in roles:
                words.append(role_names[ri])
                ent = b.entity(1, 2)
                slots += [("label", len(ev_names) + ri), ("span", None, [(len(words), len(words) + len(ent))])]
                words += ent
            u = b.add_unit(words)
            b.tuples.append([s if s[0] == "label" else ("span", u, s[2]) for s in slots])
        return b.render(instance_id, INSTRUCTIONS["ee"], labels, TextKind.LABEL_LINKED)

    if shape is TaskShape.MRC:
        asked = rng.randrange(len(QUESTIONS))
        others = [q for q in range(len(QUESTIONS)) if q != asked]
        distractors = rng.sample(others, rng.randint(0, min(2, len(others))))
        order = [asked] + distractors
        rng.shuffle(order)
        for q in order:
            ent = b.entity()
            u = b.add_unit([QUESTIONS[q]] + ent)
            if q == asked:
                b.tuples.append([("span", u, [(1, 1 + len(ent))])])
        instruction = f"What follows {QUESTIONS[asked]} ?"
        return b.render(instance_id, instruction, [], TextKind.PLAIN_EXTRACT)

    names = _pick_labels(rng, CLASSES, spec, 2)
    labels = [SchemaLabel(LabelKind.CLASS, x) for x in names]
    gold = rng.randrange(len(names))
    b.add_unit([names[gold]])
    b.tuples.append([("label", gold)])
    return b.render(instance_id, INSTRUCTIONS["cls"], labels, TextKind.BACKGROUND)


def generate(spec: SynthSpec, n: int) -> list[TaskInstance]:
    """n instances, fully determined by spec (including its seed)."""
    rng = random.Random(f"{spec.seed}:{spec.task_shape.value}")
    out = []
    for i in range(n):
        for _ in range(MAX_ATTEMPTS):
            try:
                out.append(_generate_one(spec, rng, f"{spec.task_shape.value}-{spec.seed}-{i}"))
                break
            except _Overflow:
                continue
        else:
            raise SpecInfeasible(
                f"could not fit {spec.tuples_per_instance} planted tuples into {spec.text_length} words"
            )
    return out


# ---------------------------------------------------------------- fixtures

def _span_of(text: str, surface: str, occurrence: int = 0) -> tuple[int, int]:
    start = -1
    for _ in range(occurrence + 1):
        start = text.index(surface, start + 1)
    return start, start + len(surface)


def worked_example() -> TaskInstance:
    """Relation (friend of, Jerry Smith, Tom) laid out so the label anchor sits at
    position 9 and Jerry, Smith, Tom at 16, 17, 22."""
    text = "Jerry Smith is a friend of Tom."
    return TaskInstance(
        id="worked-friend-of",
        instruction="Please extract relation triplets from the text.",
        labels=(SchemaLabel(LabelKind.RELATION, "friend of"), SchemaLabel(LabelKind.RELATION, "born in")),
        text=TextPart(TextKind.LABEL_LINKED, text),
        gold=((LabelRef(0), CharSpan((_span_of(text, "Jerry Smith"),)), CharSpan((_span_of(text, "Tom"),))),),
    )


def fixture_suite() -> list[TaskInstance]:
    """Hand-built instances mirroring the drawn examples and case studies."""
    fixtures = [worked_example()]

    adr_text = "I had muscle pain and fatigue after the second dose."
    fixtures.append(
        TaskInstance(
            id="fig1-discontinuous-ner",
            instruction="Please identify adverse drug reactions.",
            labels=(SchemaLabel(LabelKind.MENTION, "ADR"),),
            text=TextPart(TextKind.LABEL_LINKED, adr_text),
            gold=(
                (LabelRef(0), CharSpan((_span_of(adr_text, "muscle pain"),))),
                (LabelRef(0), CharSpan((_span_of(adr_text, "muscle"), _span_of(adr_text, "fatigue")))),
            ),
        )
    )

    re_text = "Tim Cook is the chief executive of Apple in Cupertino."
    fixtures.append(
        TaskInstance(
            id="fig1-relation",
            instruction="Please extract relation triplets.",
            labels=(SchemaLabel(LabelKind.RELATION, "work for"), SchemaLabel(LabelKind.RELATION, "located in")),
            text=TextPart(TextKind.LABEL_LINKED, re_text),
            gold=(
                (LabelRef(0), CharSpan((_span_of(re_text, "Tim Cook"),)), CharSpan((_span_of(re_text, "Apple"),))),
                (LabelRef(1), CharSpan((_span_of(re_text, "Apple"),)), CharSpan((_span_of(re_text, "Cupertino"),))),
            ),
        )
    )

    question = "Mirror Mirror on the wall, who's the fairest of them all?"
    fixtures.append(
        TaskInstance(
            id="case-multichoice",
            instruction=question,
            labels=(SchemaLabel(LabelKind.CLASS, "Evil Queen"), SchemaLabel(LabelKind.CLASS, "Snow White")),
            text=TextPart(TextKind.BACKGROUND, ""),
            gold=((LabelRef(1),),),
        )
    )

    mrc_text = "Evil Queen is jealous of Snow White's beauty."
    fixtures.append(
        TaskInstance(
            id="case-extractive-mrc",
            instruction=question,
            labels=(),
            text=TextPart(TextKind.PLAIN_EXTRACT, mrc_text),
            gold=((CharSpan((_span_of(mrc_text, "Snow White"),)),),),
        )
    )

    ner_text = "LLaMA and OPT are open-sourced large language models."
    fixtures.append(
        TaskInstance(
            id="case-ner",
            instruction="Mirror Mirror, please help me extract all the model names.",
            labels=(SchemaLabel(LabelKind.MENTION, "model name"),),
            text=TextPart(TextKind.LABEL_LINKED, ner_text),
            gold=(
                (LabelRef(0), CharSpan((_span_of(ner_text, "LLaMA"),))),
                (LabelRef(0), CharSpan((_span_of(ner_text, "OPT"),))),
            ),
        )
    )

    rel_text = (
        "The drama surrounding the high-profile divorce between Hollywood actors Johnny Depp and "
        "Amber Heard appears to be over as the couple reportedly reached an amicable settlement."
    )
    fixtures.append(
        TaskInstance(
            id="case-relation",
            instruction="Mirror Mirror, please help me extract the entity relationship triplet.",
            labels=(SchemaLabel(LabelKind.RELATION, "break up"),),
            text=TextPart(TextKind.LABEL_LINKED, rel_text),
            gold=(
                (
                    LabelRef(0),
                    CharSpan((_span_of(rel_text, "Amber Heard"),)),
                    CharSpan((_span_of(rel_text, "Johnny Depp"),)),
                ),
            ),
        )
    )
    return fixtures


def duplicate_surface_corpus(seed: int, n_docs: int, duplicate_rate: float = 0.3):
    """Documents for the string-matching upper bound: (gold entities, tokens) pairs.

    Roughly ``duplicate_rate`` of the entities reuse a surface that also occurs
    earlier in the document without being that entity. Some of those earlier
    occurrences sit inside a longer gold entity (nested surfaces), the rest
    are plain non-entity mentions.
    """
    rng = random.Random(f"dup:{seed}")
    names = [[f"n{i}"] for i in range(40)] + [[f"n{i}", f"m{i}"] for i in range(20)]
    corpus = []
    for _ in range(n_docs):
        tokens: list[str] = []
        entities: list[tuple[list[str], range]] = []

        def filler(k):
            tokens.extend(f"w{rng.randrange(30)}" for _ in range(k))

        for _ in range(rng.randint(2, 5)):
            filler(rng.randint(1, 3))
            surface = list(rng.choice(names))
            if rng.random() < duplicate_rate:
                if rng.random() < 0.5:
                    # nested: a longer gold entity containing the surface comes first
                    longer = surface + [f"x{rng.randrange(10)}"]
                    entities.append((longer, range(len(tokens), len(tokens) + len(longer))))
                    tokens.extend(longer)
                else:
                    tokens.extend(surface)
                filler(rng.randint(1, 3))
            entities.append((surface, range(len(tokens), len(tokens) + len(surface))))
            tokens.extend(surface)
        filler(rng.randint(0, 2))
        corpus.append((entities, tokens))
    return corpus
