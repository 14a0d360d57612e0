"""Multi-slot tuples and their multi-span cyclic graph encoding.

A tuple is flattened into a chain of boundary positions. Each slot
contributes its label anchor position, or the start and end of every span
piece (one position for a single-token piece). The chain is then wired with
three edge kinds:

* consecutive: start -> end inside one piece, and piece -> next piece of the same span
* jump: between the last position of a slot and the first of the next slot,
  and also between pieces of one discontinuous span
* tail-to-head: from the last position of the chain back to the first

A piece gap inside a discontinuous span therefore carries both a consecutive
and a jump edge on the same cell. A cell with only a jump is a slot boundary.
A cell with only a consecutive edge joins the two ends of one piece.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Union

import numpy as np

from .errors import PositionOutOfRange


class EdgeKind(IntEnum):
    CONSECUTIVE = 0
    JUMP = 1
    TAIL_TO_HEAD = 2


@dataclass(frozen=True, order=True)
class LabelAnchor:
    position: int

    def positions(self) -> list[int]:
        return [self.position]


@dataclass(frozen=True, order=True)
class TextSpan:
    """Ordered, disjoint, inclusive token intervals."""

    intervals: tuple[tuple[int, int], ...]

    def __post_init__(self):
        ivs = tuple((int(s), int(e)) for s, e in self.intervals)
        if not ivs:
            raise ValueError("TextSpan needs at least one interval")
        prev = -1
        for s, e in ivs:
            if s > e or s <= prev:
                raise ValueError(f"intervals must be ordered and disjoint: {ivs}")
            prev = e
        object.__setattr__(self, "intervals", ivs)

    def positions(self) -> list[int]:
        return flatten_slot(self)


Slot = Union[LabelAnchor, TextSpan]


@dataclass(frozen=True)
class MultiSlotTuple:
    slots: tuple[Slot, ...]

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        if not self.slots:
            raise ValueError("a tuple needs at least one slot")

    def __len__(self):
        return len(self.slots)

    def chain(self) -> list[int]:
        return [p for slot in self.slots for p in flatten_slot(slot)]

    def key(self) -> str:
        """Canonical, order-preserving serialization used for dedup and matching."""
        parts = []
        for slot in self.slots:
            if isinstance(slot, LabelAnchor):
                parts.append(f"A{slot.position}")
            else:
                parts.append("S" + "+".join(f"{s}-{e}" for s, e in slot.intervals))
        return "|".join(parts)

    def __repr__(self):
        return f"MultiSlotTuple({self.key()})"


def flatten_slot(slot: Slot) -> list[int]:
    if isinstance(slot, LabelAnchor):
        return [slot.position]
    out = []
    for s, e in slot.intervals:
        out.extend([s] if s == e else [s, e])
    return out


@dataclass
class AdjacencyTensor:
    """Boolean edges indexed (kind, from, to)."""

    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=bool)
        if self.edges.ndim != 3 or self.edges.shape[0] != 3 or self.edges.shape[1] != self.edges.shape[2]:
            raise ValueError(f"expected shape (3, L, L), got {self.edges.shape}")

    @classmethod
    def empty(cls, length: int) -> AdjacencyTensor:
        return cls(np.zeros((3, length, length), dtype=bool))

    @property
    def length(self) -> int:
        return self.edges.shape[1]

    @property
    def consecutive(self) -> np.ndarray:
        return self.edges[EdgeKind.CONSECUTIVE]

    @property
    def jump(self) -> np.ndarray:
        return self.edges[EdgeKind.JUMP]

    @property
    def tail_to_head(self) -> np.ndarray:
        return self.edges[EdgeKind.TAIL_TO_HEAD]

    def __eq__(self, other):
        if not isinstance(other, AdjacencyTensor):
            return NotImplemented
        return self.edges.shape == other.edges.shape and bool((self.edges == other.edges).all())

    def __or__(self, other: AdjacencyTensor) -> AdjacencyTensor:
        return AdjacencyTensor(self.edges | other.edges)

    def edge_set(self) -> set[tuple[EdgeKind, int, int]]:
        return {(EdgeKind(k), int(i), int(j)) for k, i, j in zip(*np.nonzero(self.edges))}

    def to_sparse(self) -> dict[str, list[list[int]]]:
        return {
            kind.name.lower(): [[int(i), int(j)] for i, j in zip(*np.nonzero(self.edges[kind]))]
            for kind in EdgeKind
        }

    @classmethod
    def from_sparse(cls, length: int, sparse: dict) -> AdjacencyTensor:
        adj = cls.empty(length)
        for kind in EdgeKind:
            for i, j in sparse.get(kind.name.lower(), []):
                if not (0 <= i < length and 0 <= j < length):
                    raise PositionOutOfRange(f"edge ({i}, {j}) outside length {length}")
                adj.edges[kind, i, j] = True
        return adj

    def dump(self) -> str:
        """Text grid per edge kind, one row per source position, for golden files."""
        lines = [f"L={self.length}"]
        for kind in EdgeKind:
            lines.append(f"# {kind.name}")
            for row in self.edges[kind]:
                lines.append("".join("1" if c else "0" for c in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, text: str) -> AdjacencyTensor:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        length = int(lines[0].split("=", 1)[1])
        edges = np.zeros((3, length, length), dtype=bool)
        rows = [ln for ln in lines[1:] if not ln.startswith("#")]
        if len(rows) != 3 * length:
            raise ValueError(f"expected {3 * length} grid rows, got {len(rows)}")
        for n, row in enumerate(rows):
            edges[n // length, n % length] = [c == "1" for c in row]
        return cls(edges)


def tuple_links(t: MultiSlotTuple) -> list[tuple[int, int, tuple[EdgeKind, ...]]]:
    """Forward links of a tuple's chain with the edge kinds each one carries."""
    links = []
    prev = None
    for slot in t.slots:
        if isinstance(slot, LabelAnchor):
            pieces = [[slot.position]]
        else:
            pieces = [[s] if s == e else [s, e] for s, e in slot.intervals]
        for n, piece in enumerate(pieces):
            if prev is not None:
                kinds = (EdgeKind.JUMP,) if n == 0 else (EdgeKind.CONSECUTIVE, EdgeKind.JUMP)
                links.append((prev, piece[0], kinds))
            if len(piece) == 2:
                links.append((piece[0], piece[1], (EdgeKind.CONSECUTIVE,)))
            prev = piece[-1]
    return links


def encode(tuples: Iterable[MultiSlotTuple], length: int) -> AdjacencyTensor:
    """OR-merge the cyclic graphs of all tuples into one tensor."""
    adj = AdjacencyTensor.empty(length)
    for t in tuples:
        chain = t.chain()
        for p in chain:
            if not 0 <= p < length:
                raise PositionOutOfRange(f"position {p} outside length {length}")
        for i, j, kinds in tuple_links(t):
            for k in kinds:
                adj.edges[k, i, j] = True
        adj.edges[EdgeKind.TAIL_TO_HEAD, chain[-1], chain[0]] = True
    return adj
