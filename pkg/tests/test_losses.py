import math

import numpy as np
import pytest
import torch

from deepbias.losses import (
    AlignmentLattice,
    aed_loss,
    aed_loss_batch,
    combined_loss,
    ctc_feasible,
    ctc_loss,
    ctc_loss_batch,
    ilmt_loss,
    transducer_loss,
    transducer_loss_batch,
)
from deepbias.model import ModelConfig, Transducer
from oracles import (
    attention_by_hand,
    ctc_loss_enum,
    finite_difference_grad,
    rnnt_loss_enum,
    softmax_by_hand,
)

BIG_NEG = -1e9


def random_lattice(rng, T, U, W):
    """Normalized random [T, U+1, W] log-probabilities plus a target."""
    raw = rng.standard_normal((T, U + 1, W))
    logp = raw - np.log(np.exp(raw).sum(axis=-1, keepdims=True))
    target = [int(rng.integers(1, W)) for _ in range(U)]
    return logp, target


def loss_of(logp, target):
    lat = AlignmentLattice(torch.tensor(logp), list(target), blank_id=0)
    return transducer_loss(lat)


# ------------------------------------------------------------ transducer loss


def test_single_blank_path():
    p = 0.37
    logp = np.log(np.array([[[p, 1 - p]]]))
    loss, _ = loss_of(logp, [])
    assert abs(loss - (-math.log(p))) < 1e-12


def test_uniform_lattice_closed_form():
    # T blanks (final included) plus U labels; the final move must be the
    # last blank, so C(T-1+U, U) monotonic paths of length T+U each.
    W = 4
    for T, U in [(1, 0), (2, 1), (3, 2), (4, 3)]:
        logp = np.full((T, U + 1, W), -math.log(W))
        target = [1] * U
        loss, _ = loss_of(logp, target)
        expected = -math.log(math.comb(T - 1 + U, U) * W ** -(T + U))
        assert abs(loss - expected) < 1e-9, (T, U)


def test_probability_one_path_gives_zero_loss():
    T, U, W = 2, 1, 3
    logp = np.full((T, U + 1, W), BIG_NEG)
    logp[0, 0, 1] = 0.0   # emit label 1
    logp[0, 1, 0] = 0.0   # advance
    logp[1, 1, 0] = 0.0   # final blank
    loss, _ = loss_of(logp, [1])
    assert abs(loss) < 1e-9


def test_matches_enumeration_small():
    rng = np.random.default_rng(0)
    logp, target = random_lattice(rng, 3, 2, 4)
    loss, _ = loss_of(logp, target)
    assert abs(loss - rnnt_loss_enum(logp, target, blank=0)) < 1e-9


def test_matches_enumeration_sweep():
    rng = np.random.default_rng(1)
    for _ in range(30):
        T = int(rng.integers(1, 5))
        U = int(rng.integers(0, 4))
        W = int(rng.integers(2, 6))
        logp, target = random_lattice(rng, T, U, W)
        loss, _ = loss_of(logp, target)
        assert abs(loss - rnnt_loss_enum(logp, target, blank=0)) < 1e-9


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(5):
        T = int(rng.integers(1, 4))
        U = int(rng.integers(0, 3))
        W = int(rng.integers(2, 5))
        logp, target = random_lattice(rng, T, U, W)
        _, grad = loss_of(logp, target)
        grad = grad.numpy()

        def f(arr):
            lat = AlignmentLattice(torch.tensor(arr), list(target), blank_id=0)
            return transducer_loss(lat)[0]

        fd = finite_difference_grad(f, logp.copy())
        denom = max(np.linalg.norm(grad), np.linalg.norm(fd), 1e-12)
        assert np.linalg.norm(grad - fd) / denom < 1e-5


def test_batched_matches_per_item():
    rng = np.random.default_rng(3)
    items = []
    for _ in range(4):
        T = int(rng.integers(1, 5))
        U = int(rng.integers(0, 4))
        items.append(random_lattice(rng, T, U, 5))
    L = max(lp.shape[0] for lp, _ in items)
    Umax = max(len(t) for _, t in items)
    B = len(items)
    batch = torch.zeros(B, L, Umax + 1, 5, dtype=torch.float64)
    targets = torch.zeros(B, Umax, dtype=torch.long)
    t_lens = torch.tensor([lp.shape[0] for lp, _ in items])
    u_lens = torch.tensor([len(t) for _, t in items])
    for b, (lp, t) in enumerate(items):
        batch[b, : lp.shape[0], : len(t) + 1] = torch.tensor(lp)
        if t:
            targets[b, : len(t)] = torch.tensor(t)
    losses = transducer_loss_batch(batch, targets, t_lens, u_lens, blank=0)
    for b, (lp, t) in enumerate(items):
        solo, _ = loss_of(lp, t)
        assert abs(float(losses[b]) - solo) < 1e-9


def test_batched_backward_flows():
    rng = np.random.default_rng(4)
    logp, target = random_lattice(rng, 3, 2, 4)
    x = torch.tensor(logp, requires_grad=True)
    loss = transducer_loss_batch(
        x.unsqueeze(0),
        torch.tensor([target]),
        torch.tensor([3]),
        torch.tensor([2]),
        blank=0,
    ).sum()
    loss.backward()
    _, ref = loss_of(logp, target)
    assert torch.allclose(x.grad, ref, atol=1e-12)


def test_lattice_validation():
    bad = torch.zeros(2, 2, 3)
    lat = AlignmentLattice(bad, [1])
    with pytest.raises(ValueError, match="not normalized"):
        lat.validate_normalized()
    with pytest.raises(ValueError):
        AlignmentLattice(torch.zeros(2, 3, 3), [1])  # U+1 mismatch
    with pytest.raises(ValueError):
        AlignmentLattice(torch.zeros(2, 2, 3), [0])  # blank in target


# ------------------------------------------------------------------- ctc


def test_ctc_single_frame():
    logp = torch.log_softmax(torch.randn(1, 3, dtype=torch.float64), dim=-1)
    loss, grad, ok = ctc_loss(logp, [1])
    assert ok
    assert abs(float(loss) - (-float(logp[0, 1]))) < 1e-12


def test_ctc_uniform_two_frames():
    logp = torch.full((2, 3), -math.log(3.0), dtype=torch.float64)
    loss, _, ok = ctc_loss(logp, [1])
    assert ok
    assert abs(float(loss) - (-math.log(3.0 / 9.0))) < 1e-9


def test_ctc_matches_enumeration():
    rng = np.random.default_rng(5)
    for _ in range(20):
        T = int(rng.integers(1, 5))
        W = int(rng.integers(2, 5))
        U = int(rng.integers(0, 3))
        raw = rng.standard_normal((T, W))
        logp = raw - np.log(np.exp(raw).sum(axis=-1, keepdims=True))
        target = [int(rng.integers(1, W)) for _ in range(U)]
        loss, _, ok = ctc_loss(torch.tensor(logp), target)
        ref = ctc_loss_enum(logp, target, blank=0)
        if not ok:
            assert math.isinf(ref)
        else:
            assert abs(float(loss) - ref) < 1e-9


def test_ctc_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    raw = rng.standard_normal((4, 4))
    logp = raw - np.log(np.exp(raw).sum(axis=-1, keepdims=True))
    target = [2, 1]
    _, grad, ok = ctc_loss(torch.tensor(logp), target)
    assert ok

    def f(arr):
        t = torch.tensor(arr)
        return float(ctc_loss(t, target)[0])

    fd = finite_difference_grad(f, logp.copy())
    denom = max(np.linalg.norm(grad.numpy()), np.linalg.norm(fd), 1e-12)
    assert np.linalg.norm(grad.numpy() - fd) / denom < 1e-5


def test_ctc_infeasible_flagged():
    logp = torch.log_softmax(torch.randn(1, 3, dtype=torch.float64), dim=-1)
    loss, grad, ok = ctc_loss(logp, [1, 1])
    assert not ok
    assert math.isinf(float(loss))
    assert torch.all(grad == 0)
    assert not ctc_feasible(2, [1, 1])
    assert ctc_feasible(3, [1, 1])


def test_ctc_batch_skips_infeasible():
    logp = torch.log_softmax(torch.randn(2, 2, 3, dtype=torch.float64), dim=-1)
    total, bad = ctc_loss_batch(logp, torch.tensor([2, 2]), [[1], [1, 1, 1]])
    solo, _, _ = ctc_loss(logp[0], [1])
    assert bad == 1
    assert abs(float(total) - float(solo)) < 1e-12


# ------------------------------------------------------------------- aed


def tiny_model(seed=0):
    cfg = ModelConfig(
        d_audio_in=3, d_text_in=4, d_hidden=4, d_word_embed=4,
        shared_layers=1, predictor_layers=1, heads=1, vocab_size=5,
        lookahead_frames=0,
    )
    return Transducer(cfg, seed=seed).double()


def test_aed_uniform_decoder():
    model = tiny_model()
    with torch.no_grad():
        for p in model.aed_decoder.parameters():
            p.zero_()
    enc = torch.randn(3, 4, dtype=torch.float64)
    target = [1, 2, 3]
    loss = aed_loss(model, enc, target)
    width = model.config.vocab_size
    assert abs(float(loss) - (len(target) + 1) * math.log(width)) < 1e-9


def test_aed_invariant_to_encoder_when_output_projection_zero():
    model = tiny_model(seed=1)
    with torch.no_grad():
        model.aed_decoder.cross.wo.weight.zero_()
        model.aed_decoder.cross.wo.bias.zero_()
    target = [2, 4]
    l1 = aed_loss(model, torch.randn(3, 4, dtype=torch.float64), target)
    l2 = aed_loss(model, torch.randn(5, 4, dtype=torch.float64), target)
    assert abs(float(l1) - float(l2)) < 1e-12


def test_aed_matches_hand_computation():
    model = tiny_model(seed=2)
    enc = torch.randn(3, 4, dtype=torch.float64)
    target = [1, 3]
    loss = float(aed_loss(model, enc, target))

    dec = model.aed_decoder
    blank = 0
    tgt_in = [blank] + target
    tgt_out = target + [blank]
    emb = dec.embedding.weight.detach().numpy()
    q = emb[tgt_in]
    w = dec.ln_q.weight.detach().numpy()
    b = dec.ln_q.bias.detach().numpy()
    mu = q.mean(axis=-1, keepdims=True)
    var = q.var(axis=-1, keepdims=True)
    qn = (q - mu) / np.sqrt(var + 1e-5) * w + b
    attn = attention_by_hand(
        qn, enc.numpy(), enc.numpy(),
        dec.cross.wq.weight.detach().numpy(), dec.cross.wq.bias.detach().numpy(),
        dec.cross.wk.weight.detach().numpy(), dec.cross.wk.bias.detach().numpy(),
        dec.cross.wv.weight.detach().numpy(), dec.cross.wv.bias.detach().numpy(),
        dec.cross.wo.weight.detach().numpy(), dec.cross.wo.bias.detach().numpy(),
    )
    h = q + attn
    logits = h @ dec.fc.weight.detach().numpy().T + dec.fc.bias.detach().numpy()
    ref = 0.0
    for step, y in enumerate(tgt_out):
        ref -= math.log(softmax_by_hand(logits[step])[y])
    assert abs(loss - ref) < 1e-9


def test_aed_rejects_empty_target():
    with pytest.raises(ValueError):
        aed_loss(tiny_model(), torch.randn(2, 4, dtype=torch.float64), [])


# ------------------------------------------------------------------- ilmt


def test_ilmt_uniform():
    model = tiny_model()
    with torch.no_grad():
        model.output.fc.weight.zero_()
        model.output.fc.bias.zero_()
    target = [1, 2]
    loss = ilmt_loss(model, target)
    assert abs(float(loss) - len(target) * math.log(model.config.vocab_size)) < 1e-9


def test_ilmt_pure():
    model = tiny_model(seed=3)
    assert float(ilmt_loss(model, [1, 4, 2])) == float(ilmt_loss(model, [1, 4, 2]))


def test_ilmt_single_token_direct():
    model = tiny_model(seed=4)
    target = [3]
    loss = float(ilmt_loss(model, target))
    with torch.no_grad():
        _, pred_out = model.predictor.unroll(torch.tensor([[0]]))
    h = pred_out[0, 0].numpy()
    jo = model.jointer
    pre = (
        jo.enc_proj.weight.detach().numpy() @ np.zeros(4)
        + jo.enc_proj.bias.detach().numpy()
        + jo.pred_proj.weight.detach().numpy() @ h
        + jo.pred_proj.bias.detach().numpy()
    )
    logits = np.tanh(pre) @ model.output.fc.weight.detach().numpy().T + model.output.fc.bias.detach().numpy()
    ref = -math.log(softmax_by_hand(logits)[target[0]])
    assert abs(loss - ref) < 1e-9


# ---------------------------------------------------------------- combined


def test_combined_weighting():
    parts = combined_loss(transducer=1, ctc=1, aed=1, ilmt=1, ilmt_weight=0.2)
    assert abs(parts.total - 3.2) < 1e-12


def test_combined_zero():
    assert combined_loss().total == 0


def test_combined_word_encoder_scale():
    parts = combined_loss(we_text=2, we_phone=3, we_scale=0.1)
    assert abs(parts.total - 0.5) < 1e-12


def test_combined_linear_in_each_part():
    a = combined_loss(transducer=2.0, ctc=1.0, aed=0.5, ilmt=1.5)
    b = combined_loss(transducer=4.0, ctc=1.0, aed=0.5, ilmt=1.5)
    c = combined_loss(transducer=0.0, ctc=1.0, aed=0.5, ilmt=1.5)
    assert abs((b.total - a.total) - (a.total - c.total)) < 1e-12


def test_nonnegative_losses():
    rng = np.random.default_rng(7)
    for _ in range(10):
        logp, target = random_lattice(rng, 3, 2, 4)
        loss, _ = loss_of(logp, target)
        assert loss >= 0
    logp = torch.log_softmax(torch.randn(3, 4, dtype=torch.float64), dim=-1)
    loss, _, ok = ctc_loss(logp, [1])
    assert ok and float(loss) >= 0


def test_aed_batch_masks_padding():
    model = tiny_model(seed=6)
    enc = torch.randn(2, 3, 4, dtype=torch.float64)
    lens = torch.tensor([3, 2])
    targets = torch.tensor([[1, 2], [3, 0]])
    u_lens = torch.tensor([2, 1])
    both = aed_loss_batch(model, enc, lens, targets, u_lens)
    solo0 = aed_loss(model, enc[0], [1, 2])
    solo1 = aed_loss(model, enc[1, :2], [3])
    assert abs(float(both[0]) - float(solo0)) < 1e-9
    assert abs(float(both[1]) - float(solo1)) < 1e-9
