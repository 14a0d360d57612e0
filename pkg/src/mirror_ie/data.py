"""Unified input format: task instances, linearization, and record files.

A task instance has three parts. There is an instruction, an ordered list of
schema labels, and exactly one text part. Linearization lays them out as one
token stream::

    [I] instruction... [LM|LR|LC] label... (repeated) [TL|TP|B] text...

Schema labels are referenced inside tuples by the position of their leading
token. Text spans are referenced by token positions in the text block.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence, Union

import jsonschema

from .errors import (
    EmptyText,
    InvalidInstance,
    Misaligned,
    ParseError,
    PositionOutOfRange,
    SequenceTooLong,
)
from .graph import LabelAnchor, MultiSlotTuple, TextSpan

MAX_SEQUENCE_LENGTH = 512


class SpecialToken(str, Enum):
    I = "[I]"
    LM = "[LM]"
    LR = "[LR]"
    LC = "[LC]"
    TL = "[TL]"
    TP = "[TP]"
    B = "[B]"


class LabelKind(str, Enum):
    MENTION = "LM"
    RELATION = "LR"
    CLASS = "LC"

    @property
    def token(self) -> SpecialToken:
        return SpecialToken(f"[{self.value}]")


class TextKind(str, Enum):
    LABEL_LINKED = "TL"
    PLAIN_EXTRACT = "TP"
    BACKGROUND = "B"

    @property
    def token(self) -> SpecialToken:
        return SpecialToken(f"[{self.value}]")


@dataclass(frozen=True)
class SchemaLabel:
    kind: LabelKind
    text: str = ""


@dataclass(frozen=True)
class TextPart:
    kind: TextKind
    text: str


@dataclass(frozen=True)
class LabelRef:
    """Gold slot pointing at a schema label by index."""

    index: int


@dataclass(frozen=True)
class CharSpan:
    """Gold slot over the text part: ordered half-open character pieces."""

    pieces: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "pieces", tuple((int(s), int(e)) for s, e in self.pieces))


GoldSlot = Union[LabelRef, CharSpan]
GoldTuple = tuple  # tuple[GoldSlot, ...]


@dataclass(frozen=True)
class TaskInstance:
    id: str
    instruction: str
    labels: tuple[SchemaLabel, ...]
    text: TextPart
    gold: tuple[GoldTuple, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "gold", tuple(tuple(t) for t in self.gold))
        self.validate()

    def validate(self):
        n = len(self.text.text)
        for t in self.gold:
            if not t:
                raise InvalidInstance(f"{self.id}: empty gold tuple")
            for slot in t:
                if isinstance(slot, LabelRef):
                    if not 0 <= slot.index < len(self.labels):
                        raise InvalidInstance(f"{self.id}: label index {slot.index} out of range")
                elif isinstance(slot, CharSpan):
                    if self.text.kind is TextKind.BACKGROUND:
                        raise InvalidInstance(f"{self.id}: background text cannot carry span slots")
                    if not slot.pieces:
                        raise InvalidInstance(f"{self.id}: span slot without pieces")
                    prev_end = -1
                    for s, e in slot.pieces:
                        if not 0 <= s < e <= n or s < prev_end:
                            raise InvalidInstance(f"{self.id}: bad character piece ({s}, {e})")
                        prev_end = e
                else:
                    raise InvalidInstance(f"{self.id}: unknown slot {slot!r}")


class TokenizerPolicy(Protocol):
    def tokenize(self, text: str) -> list[tuple[int, int]]:
        """Return half-open character offsets of each token, in order."""


class WordTokenizer:
    """Whitespace plus punctuation splitting: runs of word characters, or single symbols."""

    pattern = re.compile(r"\w+|[^\w\s]")

    def tokenize(self, text: str) -> list[tuple[int, int]]:
        return [m.span() for m in self.pattern.finditer(text)]


DEFAULT_TOKENIZER = WordTokenizer()


@dataclass(frozen=True)
class Token:
    surface: str
    special: SpecialToken | None = None

    @property
    def is_special(self) -> bool:
        return self.special is not None


@dataclass(frozen=True)
class TokenStream:
    tokens: tuple[Token, ...]
    label_anchor_positions: tuple[int, ...]
    text_span: range
    # character offsets (into the text part) of each token in text_span
    text_offsets: tuple[tuple[int, int], ...] = field(default=())

    def __len__(self):
        return len(self.tokens)

    @property
    def surfaces(self) -> list[str]:
        return [t.surface for t in self.tokens]

    @property
    def text_lead_position(self) -> int:
        return self.text_span.start - 1


def linearize(
    instance: TaskInstance,
    tokenizer: TokenizerPolicy = DEFAULT_TOKENIZER,
    max_length: int = MAX_SEQUENCE_LENGTH,
) -> TokenStream:
    """Lay out an instance as a position-indexed token stream."""
    if instance.text.kind is not TextKind.BACKGROUND and not tokenizer.tokenize(instance.text.text):
        raise EmptyText(f"{instance.id}: text part is empty")

    tokens = [Token(SpecialToken.I.value, SpecialToken.I)]
    tokens += [Token(instance.instruction[s:e]) for s, e in tokenizer.tokenize(instance.instruction)]
    anchors = []
    for label in instance.labels:
        anchors.append(len(tokens))
        tokens.append(Token(label.kind.token.value, label.kind.token))
        tokens += [Token(label.text[s:e]) for s, e in tokenizer.tokenize(label.text)]
    lead = instance.text.kind.token
    tokens.append(Token(lead.value, lead))
    offsets = tokenizer.tokenize(instance.text.text)
    start = len(tokens)
    tokens += [Token(instance.text.text[s:e]) for s, e in offsets]

    if len(tokens) > max_length:
        raise SequenceTooLong(f"{instance.id}: {len(tokens)} tokens > {max_length}")
    return TokenStream(
        tokens=tuple(tokens),
        label_anchor_positions=tuple(anchors),
        text_span=range(start, len(tokens)),
        text_offsets=tuple(offsets),
    )


def map_span_to_positions(stream: TokenStream, char_span: tuple[int, int]) -> range:
    """Minimal range of stream positions covering a half-open character span of the text part.

    Raises Misaligned when the span cuts through a token.
    """
    cs, ce = char_span
    if cs > ce:
        raise Misaligned(f"inverted span {char_span}")
    offsets = stream.text_offsets
    base = stream.text_span.start
    if cs == ce:
        for k, (s, e) in enumerate(offsets):
            if s < cs < e:
                raise Misaligned(f"empty span at {cs} falls inside a token")
            if s >= cs:
                return range(base + k, base + k)
        return range(stream.text_span.stop, stream.text_span.stop)
    covered = []
    for k, (s, e) in enumerate(offsets):
        if e <= cs or s >= ce:
            continue
        if s < cs or e > ce:
            raise Misaligned(f"span {char_span} splits token ({s}, {e})")
        covered.append(k)
    if not covered:
        return range(base, base)
    return range(base + covered[0], base + covered[-1] + 1)


def positions_to_char_span(stream: TokenStream, positions: range) -> tuple[int, int]:
    """Inverse of map_span_to_positions for token-aligned spans."""
    text = stream.text_span
    if positions.start < text.start or positions.stop > text.stop or positions.start > positions.stop:
        raise PositionOutOfRange(f"{positions} outside text block {text}")
    if positions.start == positions.stop:
        k = positions.start - text.start
        if k < len(stream.text_offsets):
            at = stream.text_offsets[k][0]
        else:
            at = stream.text_offsets[-1][1] if stream.text_offsets else 0
        return at, at
    first = stream.text_offsets[positions.start - text.start]
    last = stream.text_offsets[positions.stop - 1 - text.start]
    return first[0], last[1]


def gold_to_tuples(instance: TaskInstance, stream: TokenStream) -> list[MultiSlotTuple]:
    """Translate character-level gold tuples into position tuples over the stream."""
    out = []
    for gold in instance.gold:
        slots = []
        for slot in gold:
            if isinstance(slot, LabelRef):
                slots.append(LabelAnchor(stream.label_anchor_positions[slot.index]))
            else:
                intervals = []
                for piece in slot.pieces:
                    r = map_span_to_positions(stream, piece)
                    if not r:
                        raise Misaligned(f"{instance.id}: piece {piece} covers no token")
                    intervals.append((r.start, r.stop - 1))
                slots.append(TextSpan(tuple(intervals)))
        out.append(MultiSlotTuple(tuple(slots)))
    return out


def tuples_to_gold(tuples: Iterable[MultiSlotTuple], stream: TokenStream) -> list[GoldTuple]:
    """Translate position tuples back to character-level gold slots.

    Raises PositionOutOfRange for anchors that are not label positions or spans
    outside the text block.
    """
    index_of = {p: i for i, p in enumerate(stream.label_anchor_positions)}
    out = []
    for t in tuples:
        slots = []
        for slot in t.slots:
            if isinstance(slot, LabelAnchor):
                if slot.position not in index_of:
                    raise PositionOutOfRange(f"position {slot.position} is not a label anchor")
                slots.append(LabelRef(index_of[slot.position]))
            else:
                slots.append(
                    CharSpan(tuple(positions_to_char_span(stream, range(s, e + 1)) for s, e in slot.intervals))
                )
        out.append(tuple(slots))
    return out


# ---------------------------------------------------------------- record files

def _load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("record.schema.json").read_text())


RECORD_SCHEMA = _load_schema()
_validator = jsonschema.Draft202012Validator(RECORD_SCHEMA)


def slot_to_json(slot: GoldSlot) -> dict:
    if isinstance(slot, LabelRef):
        return {"label": slot.index}
    return {"span": [[s, e] for s, e in slot.pieces]}


def instance_to_json(instance: TaskInstance) -> dict:
    return {
        "id": instance.id,
        "instruction": instance.instruction,
        "labels": [{"kind": lab.kind.value, "text": lab.text} for lab in instance.labels],
        "text": {"kind": instance.text.kind.value, "text": instance.text.text},
        "gold": [[slot_to_json(s) for s in t] for t in instance.gold],
    }


def instance_from_json(obj: dict) -> TaskInstance:
    errors = sorted(_validator.iter_errors(obj), key=lambda err: list(err.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path) or "<record>"
        raise ParseError(err.message, field=path)
    gold = []
    for t in obj["gold"]:
        slots = []
        for s in t:
            if "label" in s:
                slots.append(LabelRef(s["label"]))
            else:
                slots.append(CharSpan(tuple(tuple(p) for p in s["span"])))
        gold.append(tuple(slots))
    try:
        return TaskInstance(
            id=obj["id"],
            instruction=obj["instruction"],
            labels=tuple(SchemaLabel(LabelKind(lab["kind"]), lab["text"]) for lab in obj["labels"]),
            text=TextPart(TextKind(obj["text"]["kind"]), obj["text"]["text"]),
            gold=tuple(gold),
        )
    except InvalidInstance as exc:
        raise ParseError(str(exc), field="gold") from exc


def dumps_instance(instance: TaskInstance) -> str:
    return json.dumps(instance_to_json(instance), ensure_ascii=False, separators=(",", ":"))


def read_records(path: str | Path) -> Iterator[TaskInstance]:
    """Stream instances from a line-delimited record file. Blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, line=lineno) from exc
            try:
                yield instance_from_json(obj)
            except ParseError as exc:
                raise ParseError(exc.message, line=lineno, field=exc.field) from exc


def write_records(instances: Iterable[TaskInstance], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(dumps_instance(inst) + "\n")
            n += 1
    return n


def load_records(path: str | Path) -> list[TaskInstance]:
    return list(read_records(path))


def replace_gold(instance: TaskInstance, gold: Sequence[GoldTuple]) -> TaskInstance:
    return TaskInstance(instance.id, instance.instruction, instance.labels, instance.text, tuple(gold))
