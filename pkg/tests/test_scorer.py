import math

import numpy as np
import pytest
import torch

from mirror_ie.graph import AdjacencyTensor
from mirror_ie.scorer import (
    BiaffineScorer,
    ScorerConfig,
    Vocab,
    batch_streams,
    edge_loss,
    grad_check,
    load_checkpoint,
    multilabel_categorical_loss,
    rotary,
    save_checkpoint,
    score_stream,
    threshold,
)
from mirror_ie.synth import worked_example
from mirror_ie.training import prepare, train

SMALL = dict(d_h=16, d_b=8, dropout=0.0)


def small_model(seed=0, vocab=20, **kw):
    torch.manual_seed(seed)
    return BiaffineScorer(vocab, ScorerConfig(**{**SMALL, **kw}))


def randomize_(model, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.5)
    return model


def test_zero_bilinear_gives_half_probability():
    model = small_model().eval()
    ids = torch.randint(1, 20, (2, 7))
    logits = model(ids)
    assert logits.shape == (2, 3, 7, 7)
    assert torch.all(logits == 0)
    assert torch.allclose(torch.sigmoid(logits), torch.full_like(logits, 0.5))
    # zero logits sit exactly on the strict threshold: no edges
    assert not threshold(logits[0]).edges.any()


def test_threshold_boundary():
    logits = torch.tensor([0.0, 1e-9, -1e-9, 3.0]).reshape(1, 1, 4).expand(3, 1, 4)
    edges = threshold(logits.reshape(3, 1, 4)[:, :, :1].expand(3, 1, 1)).edges
    assert not edges.any()
    grid = torch.zeros(3, 2, 2)
    grid[0, 0, 1] = 1e-9
    grid[1, 1, 0] = -1e-9
    grid[2, 1, 1] = 0.0
    adj = threshold(grid)
    assert adj.edge_set() == {(0, 0, 1)}


def dense_reference(model, hidden):
    """Triple loop over (k, i, j) with a per-position rotation."""
    cfg = model.cfg
    start, end = model.ffnn_s(hidden)[0], model.ffnn_e(hidden)[0]
    n, d = start.shape

    def rot(v, pos):
        out = v.clone()
        for m in range(d // 2):
            theta = pos * cfg.rope_base ** (-2 * m / d)
            c, s = math.cos(theta), math.sin(theta)
            out[2 * m] = v[2 * m] * c - v[2 * m + 1] * s
            out[2 * m + 1] = v[2 * m] * s + v[2 * m + 1] * c
        return out

    out = torch.zeros(3, n, n, dtype=hidden.dtype)
    for k in range(3):
        for i in range(n):
            for j in range(n):
                out[k, i, j] = rot(start[i], i) @ model.U[:, k, :] @ rot(end[j], j)
    return out / math.sqrt(cfg.d_h)


def test_against_dense_loop_reference():
    model = randomize_(small_model().double().eval(), 1)
    hidden = torch.randn(1, 6, 16, dtype=torch.float64)
    with torch.no_grad():
        fast = model(hidden=hidden)[0]
        slow = dense_reference(model, hidden)
    assert (fast - slow).abs().max().item() < 1e-10


def test_rotary_is_relative():
    """With U_k = c * I and identical vectors everywhere, the score depends only on j - i."""
    model = small_model(rotary=True).double().eval()
    with torch.no_grad():
        model.U.copy_(torch.eye(8, dtype=torch.float64)[:, None, :].expand(8, 3, 8) * 2.0)
    hidden = torch.randn(1, 1, 16, dtype=torch.float64).expand(1, 9, 16)
    with torch.no_grad():
        s = model(hidden=hidden)[0, 0]
    for offset in range(-3, 4):
        vals = torch.diagonal(s, offset)
        assert torch.allclose(vals, vals[0].expand_as(vals), atol=1e-10)
    assert not torch.allclose(torch.diagonal(s, 0)[0], torch.diagonal(s, 1)[0])


def test_rotary_position_sensitivity():
    model = randomize_(small_model(rotary=True).double().eval(), 2)
    flat = randomize_(small_model(rotary=False).double().eval(), 2)
    hidden = torch.randn(1, 1, 16, dtype=torch.float64).expand(1, 5, 16)
    with torch.no_grad():
        with_rope, without = model(hidden=hidden)[0], flat(hidden=hidden)[0]
    # identical token states: without rotation every cell of a kind is equal
    assert torch.allclose(without, without[:, :1, :1].expand_as(without))
    assert not torch.allclose(with_rope, with_rope[:, :1, :1].expand_as(with_rope))


def test_rotary_preserves_norm():
    x = torch.randn(4, 10, 8, dtype=torch.float64)
    assert torch.allclose(rotary(x).norm(dim=-1), x.norm(dim=-1))


# ---------------------------------------------------------------- loss


def test_loss_all_zero_logits():
    for n_pos, n_neg in [(0, 5), (3, 2), (1, 0)]:
        gold = torch.tensor([1] * n_pos + [0] * n_neg, dtype=torch.bool)
        got = multilabel_categorical_loss(torch.zeros(n_pos + n_neg, dtype=torch.float64), gold).item()
        assert abs(got - (math.log(1 + n_neg) + math.log(1 + n_pos))) < 1e-12


def test_loss_confident_single_positive():
    scores = torch.tensor([10.0, -1e4, -1e4], dtype=torch.float64)
    gold = torch.tensor([True, False, False])
    got = multilabel_categorical_loss(scores, gold).item()
    assert abs(got - math.log1p(math.exp(-10))) < 1e-9
    assert abs(got - 4.54e-5) < 1e-7


def naive_edge_loss(logits, gold, mask):
    total = 0.0
    for b in range(logits.shape[0]):
        n = int(mask[b].sum())
        for k in range(3):
            neg = pos = 0.0
            for i in range(n):
                for j in range(n):
                    s = logits[b, k, i, j].item()
                    if gold[b, k, i, j]:
                        pos += math.exp(-s)
                    else:
                        neg += math.exp(s)
            total += math.log(1 + neg) + math.log(1 + pos)
    return total / logits.shape[0]


def test_edge_loss_against_naive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        logits = torch.from_numpy(rng.normal(0, 3, (2, 3, 5, 5)))
        gold = torch.from_numpy(rng.random((2, 3, 5, 5)) < 0.2)
        mask = torch.tensor([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=torch.bool)
        got = edge_loss(logits, gold, mask).item()
        assert abs(got - naive_edge_loss(logits, gold, mask)) < 1e-9


def test_edge_loss_ignores_padding():
    logits = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    logits[..., 3, :] = 50.0
    logits[..., :, 3] = 50.0
    mask = torch.tensor([[1, 1, 1, 0]], dtype=torch.bool)
    gold = torch.zeros(1, 3, 4, 4, dtype=torch.bool)
    assert abs(edge_loss(logits, gold, mask).item() - 3 * math.log(10)) < 1e-12


# ---------------------------------------------------------------- gradients


def gradcheck_batch(seed):
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(1, 20, (2, 6), generator=g)
    ids[1, 4:] = 0
    gold = torch.rand(2, 3, 6, 6, generator=g) < 0.15
    return ids, ids != 0, gold


@pytest.mark.parametrize("seed", range(5))
def test_grad_check(seed):
    model = randomize_(small_model(seed).double(), 100 + seed)
    ids, mask, gold = gradcheck_batch(seed)
    assert grad_check(model, ids, mask, gold) < 1e-4


def test_grad_check_at_initialization():
    ids, mask, gold = gradcheck_batch(9)
    assert grad_check(small_model(9), ids, mask, gold) < 1e-4


# ---------------------------------------------------------------- training


def tiny_cfg(**kw):
    base = dict(d_h=32, d_b=32, dropout=0.0, lr_head=3e-3, weight_decay=0.0, batch_size=1, epochs=1, seed=0)
    return ScorerConfig(**{**base, **kw})


def test_one_step_decreases_loss():
    (ex,) = prepare([worked_example()])
    vocab = Vocab.build([ex.stream])
    torch.manual_seed(0)
    model = BiaffineScorer(len(vocab), tiny_cfg())
    ids, mask, gold = batch_streams([ex.stream], vocab, [ex.adjacency])
    opt = torch.optim.SGD(model.parameters(), lr=0.1)
    before = edge_loss(model(ids, mask), gold, mask)
    before.backward()
    opt.step()
    after = edge_loss(model(ids, mask), gold, mask)
    assert after.item() < before.item()


def test_overfit_single_instance():
    inst = worked_example()
    result = train([inst], tiny_cfg(epochs=100, lr_head=1e-2))
    (ex,) = prepare([inst])
    ids, mask, gold = batch_streams([ex.stream], result.vocab, [ex.adjacency])
    with torch.no_grad():
        loss = edge_loss(result.model(ids, mask), gold, mask).item()
    assert loss < 1e-2
    assert threshold(score_stream(result.model, result.vocab, ex.stream)) == ex.adjacency


def test_training_is_deterministic():
    inst = worked_example()
    a = train([inst] * 4, tiny_cfg(epochs=2, batch_size=2, dropout=0.1))
    b = train([inst] * 4, tiny_cfg(epochs=2, batch_size=2, dropout=0.1))
    assert [r["loss"] for r in a.report.epochs] == [r["loss"] for r in b.report.epochs]
    for (ka, va), (kb, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


# ---------------------------------------------------------------- config and checkpoints


def test_config_validation():
    with pytest.raises(ValueError):
        ScorerConfig(d_h=8, d_b=16)
    with pytest.raises(ValueError):
        ScorerConfig(threshold_prob=1.0)
    with pytest.raises(ValueError):
        ScorerConfig.from_dict({"d_h": 8, "bogus": 1})
    assert ScorerConfig(threshold_prob=0.5).threshold_logit == 0.0
    cfg = ScorerConfig(**SMALL)
    assert ScorerConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_roundtrip(tmp_path):
    (ex,) = prepare([worked_example()])
    vocab = Vocab.build([ex.stream])
    torch.manual_seed(4)
    model = randomize_(BiaffineScorer(len(vocab), ScorerConfig(**SMALL)), 4).eval()
    path = tmp_path / "model.npz"
    save_checkpoint(path, model, vocab, {"note": "x"})
    ck = load_checkpoint(path)
    assert ck.vocab.itos == vocab.itos and ck.config == model.cfg and ck.extra == {"note": "x"}
    assert torch.equal(score_stream(ck.model, ck.vocab, ex.stream), score_stream(model, vocab, ex.stream))


def test_unknown_tokens_map_to_unk():
    (ex,) = prepare([worked_example()])
    vocab = Vocab()
    ids = vocab.encode(ex.stream)
    assert ids[0] != 1  # special tokens are always known
    assert 1 in ids


def test_empty_adjacency_from_untrained_model():
    (ex,) = prepare([worked_example()])
    vocab = Vocab.build([ex.stream])
    model = BiaffineScorer(len(vocab), ScorerConfig(**SMALL))
    assert threshold(score_stream(model, vocab, ex.stream)) == AdjacencyTensor.empty(len(ex.stream))
