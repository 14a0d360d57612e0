"""Recover multi-slot tuples from a multi-span cyclic graph.

decode() walks forward chains over the merged consecutive|jump matrix,
starting only from positions that receive a tail-to-head edge (every valid
chain's head does). A chain is kept when its last position links back to its
head, then split into slots. Positions never repeat inside one chain.

brute_force_decode() is the test oracle. It enumerates every position
sequence level by level from every start position without head anchoring.
It also uses its own splitting routine.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import BudgetExceeded, InfeasibleSize, MalformedSegment
from .graph import AdjacencyTensor, LabelAnchor, MultiSlotTuple, TextSpan


@dataclass
class DecodeConfig:
    max_chain_length: int = 24
    max_chains: int = 100_000
    slot_arity_hint: int | None = None


@dataclass
class DecodeResult:
    tuples: set[MultiSlotTuple] = field(default_factory=set)
    chains_explored: int = 0
    chains_closed: int = 0
    malformed: int = 0
    arity_filtered: int = 0

    @property
    def chains_rejected(self) -> int:
        return self.chains_explored - self.chains_closed

    def diagnostics(self) -> dict:
        return {
            "chains_found": self.chains_explored,
            "chains_closed": self.chains_closed,
            "chains_rejected": self.chains_rejected,
            "malformed": self.malformed,
            "arity_filtered": self.arity_filtered,
            "tuples": len(self.tuples),
        }


def split_chain(
    chain: list[int] | tuple[int, ...],
    consecutive: np.ndarray,
    jump: np.ndarray,
    anchors: Iterable[int] = (),
) -> MultiSlotTuple:
    """Split a closed chain into slots.

    A jump-only link ends a slot, a consecutive+jump link ends a piece of a
    discontinuous span, and a consecutive-only link joins the two ends of a
    piece. Raises MalformedSegment when the pieces cannot form valid slots.
    """
    anchors = set(anchors)
    slots: list[list[list[int]]] = [[[chain[0]]]]
    for a, b in zip(chain, chain[1:]):
        c, j = bool(consecutive[a, b]), bool(jump[a, b])
        if c and not j:
            slots[-1][-1].append(b)
        elif c and j:
            slots[-1].append([b])
        elif j:
            slots.append([[b]])
        else:
            raise MalformedSegment(f"no forward edge {a}->{b}")

    out = []
    for pieces in slots:
        if len(pieces) == 1 and len(pieces[0]) == 1 and pieces[0][0] in anchors:
            out.append(LabelAnchor(pieces[0][0]))
            continue
        intervals = []
        for piece in pieces:
            if any(p in anchors for p in piece):
                raise MalformedSegment(f"label anchor inside span pieces {pieces}")
            if len(piece) > 2 or (len(piece) == 2 and piece[0] >= piece[1]):
                raise MalformedSegment(f"cannot pair positions {piece} into an interval")
            s, e = piece[0], piece[-1]
            if intervals and s <= intervals[-1][1]:
                raise MalformedSegment(f"span pieces out of order: {pieces}")
            intervals.append((s, e))
        out.append(TextSpan(tuple(intervals)))
    return MultiSlotTuple(tuple(out))


def decode_verbose(
    adj: AdjacencyTensor,
    cfg: DecodeConfig | None = None,
    anchors: Iterable[int] = (),
) -> DecodeResult:
    cfg = cfg or DecodeConfig()
    anchors = frozenset(anchors)
    merged = adj.consecutive | adj.jump
    tail = adj.tail_to_head
    successors = [np.flatnonzero(row).tolist() for row in merged]
    result = DecodeResult()

    for head in np.flatnonzero(tail.any(axis=0)).tolist():
        stack = [(head,)]
        while stack:
            path = stack.pop()
            result.chains_explored += 1
            if result.chains_explored > cfg.max_chains:
                raise BudgetExceeded(f"more than {cfg.max_chains} forward chains")
            last = path[-1]
            if tail[last, head]:
                result.chains_closed += 1
                try:
                    t = split_chain(path, adj.consecutive, adj.jump, anchors)
                except MalformedSegment:
                    result.malformed += 1
                else:
                    if cfg.slot_arity_hint is not None and len(t) != cfg.slot_arity_hint:
                        result.arity_filtered += 1
                    else:
                        result.tuples.add(t)
            if len(path) < cfg.max_chain_length:
                for nxt in reversed(successors[last]):
                    if nxt not in path:
                        stack.append(path + (nxt,))
    return result


def decode(
    adj: AdjacencyTensor,
    cfg: DecodeConfig | None = None,
    anchors: Iterable[int] = (),
) -> set[MultiSlotTuple]:
    return decode_verbose(adj, cfg, anchors).tuples


# ---------------------------------------------------------------- oracle

def _oracle_split(chain, consecutive, jump, anchors) -> MultiSlotTuple | None:
    kinds = "".join(
        {(True, False): "c", (False, True): "j", (True, True): "b"}.get(
            (bool(consecutive[a, b]), bool(jump[a, b])), "?"
        )
        for a, b in zip(chain, chain[1:])
    )
    if "?" in kinds:
        return None
    # group positions into slots at "j" links, then into pieces at "b" links
    slot_groups, current = [], [[chain[0]]]
    for kind, pos in zip(kinds, chain[1:]):
        if kind == "j":
            slot_groups.append(current)
            current = [[pos]]
        elif kind == "b":
            current.append([pos])
        else:
            current[-1].append(pos)
    slot_groups.append(current)

    slots = []
    for group in slot_groups:
        flat = [p for piece in group for p in piece]
        if flat == [flat[0]] and flat[0] in anchors:
            slots.append(LabelAnchor(flat[0]))
            continue
        if set(flat) & anchors:
            return None
        if any(len(piece) not in (1, 2) for piece in group):
            return None
        intervals = [(piece[0], piece[-1]) for piece in group]
        bounds = [p for iv in intervals for p in iv]
        strictly_up = all(x < y for x, y in zip(bounds[1::2], bounds[2::2]))
        if not strictly_up or any(s > e or (len(pc) == 2 and s == e) for (s, e), pc in zip(intervals, group)):
            return None
        slots.append(TextSpan(tuple(intervals)))
    return MultiSlotTuple(tuple(slots))


def brute_force_decode(
    adj: AdjacencyTensor,
    max_len: int,
    anchors: Iterable[int] = (),
    budget: int = 2_000_000,
) -> set[MultiSlotTuple]:
    """Exhaustive oracle: every sequence of distinct positions up to max_len."""
    anchors = frozenset(anchors)
    n = adj.length
    if n == 0:
        return set()
    merged = adj.consecutive | adj.jump
    tail = adj.tail_to_head
    found = set()
    seqs = np.arange(n).reshape(n, 1)
    for length in range(1, max_len + 1):
        closed = seqs[tail[seqs[:, -1], seqs[:, 0]]]
        for row in closed:
            t = _oracle_split(row.tolist(), adj.consecutive, adj.jump, anchors)
            if t is not None:
                found.add(t)
        if length == max_len or len(seqs) == 0:
            break
        # every (sequence, next position) pair, filtered by edge and no-repeat
        cand = np.repeat(seqs, n, axis=0)
        nxt = np.tile(np.arange(n), len(seqs))
        if len(cand) > budget:
            raise InfeasibleSize(f"{len(cand)} candidate sequences exceed budget {budget}")
        keep = merged[cand[:, -1], nxt] & ~(cand == nxt[:, None]).any(axis=1)
        seqs = np.concatenate([cand[keep], nxt[keep, None]], axis=1)
    return found
