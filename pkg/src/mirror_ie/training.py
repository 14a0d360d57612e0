"""Training and prediction for the biaffine scorer."""

from __future__ import annotations

import copy
import logging
import math
import random
import time
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .data import TaskInstance, TokenStream, gold_to_tuples, linearize
from .decoding import DecodeConfig, decode_verbose
from .errors import BudgetExceeded, DivergenceDetected
from .evaluation import EvalReport, corpus_micro_f1
from .graph import AdjacencyTensor, MultiSlotTuple, encode
from .scorer import BiaffineScorer, ScorerConfig, Vocab, batch_streams, edge_loss, score_stream, threshold

log = logging.getLogger(__name__)


@dataclass
class Example:
    instance: TaskInstance
    stream: TokenStream
    gold: list[MultiSlotTuple]
    adjacency: AdjacencyTensor


def prepare(instances: Sequence[TaskInstance], max_length: int = 512) -> list[Example]:
    out = []
    for inst in instances:
        stream = linearize(inst, max_length=max_length)
        gold = gold_to_tuples(inst, stream)
        out.append(Example(inst, stream, gold, encode(gold, len(stream))))
    return out


@dataclass
class PredictStats:
    budget_exceeded: int = 0
    malformed: int = 0
    chains_found: int = 0


def predict_tuples(
    model: BiaffineScorer,
    vocab: Vocab,
    stream: TokenStream,
    decode_cfg: DecodeConfig | None = None,
    stats: PredictStats | None = None,
) -> set[MultiSlotTuple]:
    """linearized stream -> logits -> thresholded graph -> tuples.

    A prediction too dense to decode within budget yields no tuples and is
    counted in ``stats``.
    """
    logits = score_stream(model, vocab, stream)
    adj = threshold(logits, model.cfg.threshold_logit)
    try:
        result = decode_verbose(adj, decode_cfg, stream.label_anchor_positions)
    except BudgetExceeded:
        if stats is not None:
            stats.budget_exceeded += 1
        return set()
    if stats is not None:
        stats.malformed += result.malformed
        stats.chains_found += result.chains_explored
    return result.tuples


def evaluate(
    model: BiaffineScorer, vocab: Vocab, examples: Sequence[Example], decode_cfg: DecodeConfig | None = None
) -> EvalReport:
    pred = {ex.instance.id: predict_tuples(model, vocab, ex.stream, decode_cfg) for ex in examples}
    gold = {ex.instance.id: ex.gold for ex in examples}
    return corpus_micro_f1(pred, gold)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_dev_f1: float | None = None
    steps: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_dev_f1": self.best_dev_f1,
            "steps": self.steps,
            "stopped_early": self.stopped_early,
        }


@dataclass
class TrainResult:
    model: BiaffineScorer
    vocab: Vocab
    report: TrainReport


def linear_warmup(total_steps: int, warmup_proportion: float):
    warmup = max(1, int(round(total_steps * warmup_proportion)))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup))

    return factor


def train(
    train_set: Sequence[TaskInstance],
    cfg: ScorerConfig,
    dev_set: Sequence[TaskInstance] = (),
    decode_cfg: DecodeConfig | None = None,
    vocab: Vocab | None = None,
) -> TrainResult:
    """Mini-batch AdamW with linear warmup/decay, gradient clipping and
    early stopping on dev tuple micro-F1. Reproducible for a fixed seed."""
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    train_ex = prepare(train_set, cfg.max_length)
    dev_ex = prepare(dev_set, cfg.max_length)
    vocab = vocab or Vocab.build(ex.stream for ex in train_ex)
    model = BiaffineScorer(len(vocab), cfg)

    steps_per_epoch = math.ceil(len(train_ex) / cfg.batch_size)
    total = max(1, steps_per_epoch * cfg.epochs)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr_head, weight_decay=cfg.weight_decay)
    schedule = torch.optim.lr_scheduler.LambdaLR(optimizer, linear_warmup(total, cfg.warmup_proportion))

    report = TrainReport()
    best_state, stale = None, 0
    order = list(range(len(train_ex)))
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        model.train()
        rng.shuffle(order)
        running, batches = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            batch = [train_ex[i] for i in order[b : b + cfg.batch_size]]
            ids, mask, gold = batch_streams([ex.stream for ex in batch], vocab, [ex.adjacency for ex in batch])
            loss = edge_loss(model(ids, mask), gold, mask)
            if not torch.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}, step {report.steps}")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
            optimizer.step()
            schedule.step()
            report.steps += 1
            running += loss.item()
            batches += 1

        row = {"epoch": epoch, "loss": running / max(batches, 1)}
        if dev_ex:
            f1 = evaluate(model, vocab, dev_ex, decode_cfg).f1
            row["dev_f1"] = f1
            if report.best_dev_f1 is None or f1 > report.best_dev_f1:
                report.best_dev_f1, report.best_epoch = f1, epoch
                best_state, stale = copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
        row["wall_time"] = time.perf_counter() - started
        report.epochs.append(row)
        log.info("epoch %d loss %.4f dev_f1 %s", epoch, row["loss"], row.get("dev_f1"))
        if dev_ex and stale >= cfg.patience:
            report.stopped_early = True
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, vocab, report)
