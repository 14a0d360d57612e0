"""Biaffine edge scorer over a linearized token stream.

The encoder is a stand-in for a pretrained language model. It is a token
embedding table followed by a small context mixer (a width-3 convolution,
one single-head self-attention layer with rotary positions, and a
feed-forward block). Callers holding real encoder states can pass them as ``hidden``
and skip the stand-in entirely.

Edge logits for kind k between positions i and j are::

    s[k, i, j] = rot_i(FFNN_s(h_i)) . U[:, k, :] . rot_j(FFNN_e(h_j)) / sqrt(d_h)
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .data import MAX_SEQUENCE_LENGTH, SpecialToken, TokenStream
from .graph import AdjacencyTensor

PAD = "<pad>"
UNK = "<unk>"


@dataclass
class ScorerConfig:
    d_h: int = 1024
    d_b: int = 512
    dropout: float = 0.3
    threshold_prob: float = 0.5
    lr_head: float = 1e-4
    weight_decay: float = 0.1
    max_grad_norm: float = 1.0
    warmup_proportion: float = 0.1
    batch_size: int = 8
    epochs: int = 20
    patience: int = 3
    seed: int = 42
    rotary: bool = True
    rope_base: float = 10000.0
    # the bilinear score is divided by sqrt(d_h) unless set to "d_b"
    scale_dim: str = "d_h"
    max_length: int = MAX_SEQUENCE_LENGTH

    def __post_init__(self):
        if not 0 < self.threshold_prob < 1:
            raise ValueError("threshold_prob must lie in (0, 1)")
        if self.d_b > self.d_h:
            raise ValueError("d_b must not exceed d_h")
        if self.rotary and (self.d_b % 2 or self.d_h % 2):
            raise ValueError("rotary embedding needs even d_h and d_b")
        if self.scale_dim not in ("d_h", "d_b"):
            raise ValueError("scale_dim must be 'd_h' or 'd_b'")

    @classmethod
    def from_dict(cls, obj: dict) -> ScorerConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown scorer options: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def threshold_logit(self) -> float:
        return math.log(self.threshold_prob / (1 - self.threshold_prob))


class Vocab:
    def __init__(self, words: Iterable[str] = ()):
        self.itos = [PAD, UNK] + [t.value for t in SpecialToken]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self):
        return len(self.itos)

    def encode(self, stream: TokenStream) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t.surface, unk) for t in stream.tokens]

    @classmethod
    def build(cls, streams: Iterable[TokenStream]) -> Vocab:
        vocab = cls()
        for stream in streams:
            for tok in stream.tokens:
                vocab.add(tok.surface)
        return vocab


def rotary(x: torch.Tensor, positions: torch.Tensor | None = None, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive feature pairs by position-dependent angles. x: [..., L, d]."""
    length, dim = x.shape[-2], x.shape[-1]
    if positions is None:
        positions = torch.arange(length, device=x.device)
    inv_freq = 1.0 / base ** (torch.arange(0, dim, 2, device=x.device, dtype=x.dtype) / dim)
    angles = positions.to(x.dtype)[:, None] * inv_freq[None, :]
    cos, sin = angles.cos(), angles.sin()
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.flatten(-2)


class ContextMixer(nn.Module):
    """Toy contextual encoder: a width-3 convolution for neighbouring tokens, one
    self-attention head with rotary queries/keys, and a position-wise feed-forward
    layer, each with a residual connection and LayerNorm."""

    def __init__(self, d_h: int, dropout: float, rope_base: float):
        super().__init__()
        self.local = nn.Conv1d(d_h, d_h, kernel_size=3, padding=1)
        self.qkv = nn.Linear(d_h, 3 * d_h)
        self.out = nn.Linear(d_h, d_h)
        self.ff = nn.Sequential(nn.Linear(d_h, 2 * d_h), nn.GELU(), nn.Linear(2 * d_h, d_h))
        self.norm_local = nn.LayerNorm(d_h)
        self.norm_att = nn.LayerNorm(d_h)
        self.norm_ff = nn.LayerNorm(d_h)
        self.dropout = nn.Dropout(dropout)
        self.rope_base = rope_base

    def forward(self, h, mask):
        h = h * mask[..., None]
        local = self.local(h.transpose(1, 2)).transpose(1, 2)
        h = self.norm_local(h + self.dropout(torch.nn.functional.gelu(local)))
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q, k = rotary(q, base=self.rope_base), rotary(k, base=self.rope_base)
        att = q @ k.transpose(-1, -2) / math.sqrt(h.shape[-1])
        att = att.masked_fill(~mask[:, None, :], torch.finfo(att.dtype).min)
        ctx = self.dropout(att.softmax(-1)) @ v
        h = self.norm_att(h + self.dropout(self.out(ctx)))
        return self.norm_ff(h + self.dropout(self.ff(h)))


class BiaffineScorer(nn.Module):
    def __init__(self, vocab_size: int, cfg: ScorerConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(vocab_size, cfg.d_h, padding_idx=0)
        self.mixer = ContextMixer(cfg.d_h, cfg.dropout, cfg.rope_base)
        self.ffnn_s = nn.Sequential(nn.Linear(cfg.d_h, cfg.d_b), nn.GELU(), nn.Dropout(cfg.dropout))
        self.ffnn_e = nn.Sequential(nn.Linear(cfg.d_h, cfg.d_b), nn.GELU(), nn.Dropout(cfg.dropout))
        self.U = nn.Parameter(torch.zeros(cfg.d_b, 3, cfg.d_b))

    def encode(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.mixer(self.embed(ids), mask)

    def forward(self, ids=None, mask=None, hidden=None) -> torch.Tensor:
        """Logits of shape [B, 3, L, L]. Pass ids (+mask) or precomputed hidden states [B, L, d_h]."""
        if hidden is None:
            if mask is None:
                mask = ids != 0
            hidden = self.encode(ids, mask)
        start = self.ffnn_s(hidden)
        end = self.ffnn_e(hidden)
        if self.cfg.rotary:
            start = rotary(start, base=self.cfg.rope_base)
            end = rotary(end, base=self.cfg.rope_base)
        scale = math.sqrt(self.cfg.d_h if self.cfg.scale_dim == "d_h" else self.cfg.d_b)
        b, n, d = start.shape
        # s[b, k, i, j] = start[b, i] . U[:, k, :] . end[b, j]
        left = (start @ self.U.reshape(d, -1)).reshape(b, n, 3, d).transpose(1, 2)
        return left @ end.transpose(1, 2)[:, None] / scale


def multilabel_categorical_loss(scores: torch.Tensor, gold: torch.Tensor, valid: torch.Tensor | None = None):
    """log(1 + sum_neg e^s) + log(1 + sum_pos e^-s), reduced over the last dimension."""
    gold = gold.bool()
    if valid is None:
        valid = torch.ones_like(gold)
    neg_inf = torch.finfo(scores.dtype).min
    neg = scores.masked_fill(gold | ~valid, neg_inf)
    pos = (-scores).masked_fill(~gold | ~valid, neg_inf)
    zeros = torch.zeros_like(scores[..., :1])
    return torch.logsumexp(torch.cat([zeros, neg], -1), -1) + torch.logsumexp(torch.cat([zeros, pos], -1), -1)


def edge_loss(logits: torch.Tensor, gold: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-kind loss over all cells of a sequence, summed over kinds, averaged over the batch.

    logits, gold: [B, 3, L, L]; mask: [B, L] marks real (non-padding) tokens.
    """
    b, k, n, _ = logits.shape
    if mask is None:
        mask = torch.ones(b, n, dtype=torch.bool, device=logits.device)
    valid = (mask[:, :, None] & mask[:, None, :])[:, None].expand(b, k, n, n)
    per_kind = multilabel_categorical_loss(
        logits.reshape(b, k, n * n), gold.reshape(b, k, n * n), valid.reshape(b, k, n * n)
    )
    return per_kind.sum(-1).mean()


def threshold(logits, cutoff: float = 0.0) -> AdjacencyTensor:
    """Edge present iff sigmoid(logit) > 0.5, i.e. logit > 0 (strict). Accepts [3, L, L]."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    return AdjacencyTensor(np.asarray(logits) > cutoff)


def batch_streams(streams: Sequence[TokenStream], vocab: Vocab, golds: Sequence[AdjacencyTensor] | None = None):
    """Pad a list of streams into (ids, mask[, gold]) tensors."""
    n = max(len(s) for s in streams)
    ids = torch.zeros(len(streams), n, dtype=torch.long)
    for row, stream in enumerate(streams):
        enc = vocab.encode(stream)
        ids[row, : len(enc)] = torch.tensor(enc)
    mask = ids != 0
    if golds is None:
        return ids, mask
    gold = torch.zeros(len(streams), 3, n, n, dtype=torch.bool)
    for row, adj in enumerate(golds):
        m = adj.length
        gold[row, :, :m, :m] = torch.from_numpy(adj.edges)
    return ids, mask, gold


@torch.no_grad()
def score_stream(model: BiaffineScorer, vocab: Vocab, stream: TokenStream) -> torch.Tensor:
    """Logits [3, L, L] for one stream, in eval mode."""
    was_training = model.training
    model.eval()
    ids, mask = batch_streams([stream], vocab)
    out = model(ids, mask)[0]
    model.train(was_training)
    return out


def grad_check(
    model: BiaffineScorer,
    ids: torch.Tensor,
    mask: torch.Tensor,
    gold: torch.Tensor,
    epsilon: float = 1e-6,
    chunk: int = 256,
) -> float:
    """Max relative error between autograd and central finite-difference gradients.

    Runs in float64 with dropout disabled. The relative error of each
    parameter tensor is ||g_a - g_fd|| / max(||g_a|| + ||g_fd||, 1e-12).
    Perturbed copies of a parameter are evaluated in vmapped chunks.
    """
    model = model.double().eval()
    model.zero_grad()
    edge_loss(model(ids, mask), gold, mask).backward()
    params = {k: v.detach() for k, v in model.named_parameters()}

    def loss_with(name, value):
        out = torch.func.functional_call(model, {**params, name: value}, (ids, mask))
        return edge_loss(out, gold, mask)

    worst = 0.0
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone()
        base = params[name]
        size = base.numel()
        numeric = torch.empty(size, dtype=base.dtype)
        batched = torch.func.vmap(lambda v: loss_with(name, v.reshape(base.shape)))
        with torch.no_grad():
            for lo in range(0, size, chunk):
                idx = torch.arange(lo, min(lo + chunk, size))
                bump = torch.zeros(len(idx), size, dtype=base.dtype)
                bump[torch.arange(len(idx)), idx] = epsilon
                up = batched(base.reshape(1, -1) + bump).reshape(-1)
                down = batched(base.reshape(1, -1) - bump).reshape(-1)
                numeric[lo : lo + len(idx)] = (up - down) / (2 * epsilon)
        numeric = numeric.reshape(base.shape)
        denom = max((analytic.norm() + numeric.norm()).item(), 1e-12)
        worst = max(worst, (analytic - numeric).norm().item() / denom)
    return worst


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model: BiaffineScorer
    vocab: Vocab
    config: ScorerConfig
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model: BiaffineScorer, vocab: Vocab, extra: dict | None = None):
    """npz archive: one array per parameter plus a JSON header with shapes, config and vocab."""
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "vocab": vocab.itos,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "extra": extra or {},
    }
    arrays = {"__header__": np.array(json.dumps(header, sort_keys=True)), **state}
    # fixed entry timestamps keep the archive byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arrays[name], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        cfg = ScorerConfig.from_dict(header["config"])
        vocab = Vocab()
        for w in header["vocab"]:
            vocab.add(w)
        model = BiaffineScorer(len(vocab), cfg)
        state = {}
        for k, shape in header["shapes"].items():
            arr = archive[k]
            if list(arr.shape) != shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {shape}")
            state[k] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(model, vocab, cfg, header.get("extra", {}))
