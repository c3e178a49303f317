import math

import numpy as np
import pytest
import torch

from deepbias.model import (
    AudioFrontend,
    InputTooShortError,
    ModelConfig,
    MultiHeadAttention,
    PARAM_GROUPS,
    Transducer,
    full_scale_preset,
)
from oracles import attention_by_hand, direct_conv1d, lstm_step_by_hand, softmax_by_hand


def tiny_config(**kw):
    base = dict(
        d_audio_in=3,
        d_text_in=5,
        d_hidden=4,
        d_word_embed=4,
        shared_layers=2,
        predictor_layers=1,
        heads=2,
        vocab_size=6,
        lookahead_frames=1,
    )
    base.update(kw)
    return ModelConfig(**base)


def make_model(seed=0, **kw):
    return Transducer(tiny_config(**kw), seed=seed).double()


# ---------------------------------------------------------------- frontend


def test_frontend_stride_arithmetic():
    model = make_model()
    feats = torch.randn(1, 8, 3, dtype=torch.float64)
    out, lens = model.audio_encoder(feats, torch.tensor([8]))
    assert out.shape[1] == 2 and int(lens[0]) == 2
    for t, expect in [(4, 1), (5, 2), (7, 2), (9, 3), (16, 4)]:
        assert AudioFrontend.output_length(t) == math.ceil(math.ceil(t / 2) / 2) == expect


def test_frontend_too_short():
    model = make_model()
    with pytest.raises(InputTooShortError):
        model.audio_encoder(torch.zeros(1, 3, 3, dtype=torch.float64), torch.tensor([3]))


def test_frontend_zero_weights_zero_output():
    model = make_model()
    with torch.no_grad():
        for p in model.audio_encoder.parameters():
            p.zero_()
    feats = torch.zeros(1, 8, 3, dtype=torch.float64)
    out, _ = model.audio_encoder(feats, torch.tensor([8]))
    assert torch.all(out == 0)


def test_frontend_matches_direct_convolution():
    torch.manual_seed(2)
    model = Transducer(tiny_config(d_audio_in=1, d_hidden=1, heads=1), seed=2).double()
    feats = torch.randn(1, 4, 1, dtype=torch.float64)
    with torch.no_grad():
        out, _ = model.audio_encoder(feats, torch.tensor([4]))

    w1 = model.audio_encoder.conv1.weight.detach().numpy()
    b1 = model.audio_encoder.conv1.bias.detach().numpy()
    w2 = model.audio_encoder.conv2.weight.detach().numpy()
    b2 = model.audio_encoder.conv2.bias.detach().numpy()
    x = feats[0].numpy().T
    mid = np.maximum(direct_conv1d(x, w1, b1, stride=2, padding=1), 0.0)
    ref = np.maximum(direct_conv1d(mid, w2, b2, stride=2, padding=1), 0.0)
    assert np.abs(out[0].numpy().T - ref).max() < 1e-10


# ---------------------------------------------------------------- attention


def test_attention_matches_hand_computation():
    torch.manual_seed(0)
    mha = MultiHeadAttention(query_dim=2, key_dim=2, attn_dim=2, heads=1).double()
    q = torch.randn(1, 2, 2, dtype=torch.float64)
    k = torch.randn(1, 3, 2, dtype=torch.float64)
    out = mha(q, k).detach()[0].numpy()

    args = {
        name: getattr(mha, name).weight.detach().numpy() for name in ("wq", "wk", "wv", "wo")
    }
    biases = {name: getattr(mha, name).bias.detach().numpy() for name in ("wq", "wk", "wv", "wo")}
    ref = attention_by_hand(
        q[0].numpy(), k[0].numpy(), k[0].numpy(),
        args["wq"], biases["wq"], args["wk"], biases["wk"],
        args["wv"], biases["wv"], args["wo"], biases["wo"],
    )
    assert np.abs(out - ref).max() < 1e-8


def test_text_encode_keeps_length_and_is_pure():
    model = make_model()
    feats = torch.randn(1, 1, 5, dtype=torch.float64)
    out1, lens = model.encode_text(feats, torch.tensor([1]))
    out2, _ = model.encode_text(feats.clone(), torch.tensor([1]))
    assert out1.shape[1] == 1 and int(lens[0]) == 1
    assert torch.equal(out1, out2)


# ---------------------------------------------------------------- predictor


def test_predictor_step_matches_unroll():
    model = make_model(seed=5)
    state = model.predictor.initial_state()
    outs = []
    for token in (0, 3, 2):
        _, out, state = model.predictor.step(state, token)
        outs.append(out)
    _, ref = model.predictor.unroll(torch.tensor([[0, 3, 2]]))
    stacked = torch.stack(outs)
    assert torch.allclose(stacked, ref[0], atol=0, rtol=0)


def test_predictor_zero_weights_token_independent():
    model = make_model()
    with torch.no_grad():
        for p in model.predictor.parameters():
            p.zero_()
    outs = []
    for token in range(model.config.vocab_size):
        _, out, _ = model.predictor.step(model.predictor.initial_state(), token)
        outs.append(out)
    for out in outs[1:]:
        assert torch.equal(out, outs[0])


def test_predictor_matches_hand_recurrence():
    model = Transducer(tiny_config(d_hidden=2, heads=1), seed=9).double()
    pred = model.predictor
    tokens = [1, 4]
    state = pred.initial_state()
    for token in tokens:
        _, out, state = pred.step(state, token)

    w_ih = pred.lstm.weight_ih_l0.detach().numpy()
    w_hh = pred.lstm.weight_hh_l0.detach().numpy()
    b_ih = pred.lstm.bias_ih_l0.detach().numpy()
    b_hh = pred.lstm.bias_hh_l0.detach().numpy()
    emb = pred.embedding.weight.detach().numpy()
    h = np.zeros(2)
    c = np.zeros(2)
    for token in tokens:
        h, c = lstm_step_by_hand(emb[token], h, c, w_ih, w_hh, b_ih, b_hh)
    assert np.abs(out.detach().numpy() - h).max() < 1e-10


def test_predictor_rejects_bad_token():
    model = make_model()
    with pytest.raises(ValueError):
        model.predictor.step(model.predictor.initial_state(), 99)


# ---------------------------------------------------------------- jointer


def test_jointer_zero_weights_constant():
    model = make_model()
    with torch.no_grad():
        for p in model.jointer.parameters():
            p.zero_()
    a = torch.randn(4, dtype=torch.float64)
    b = torch.randn(4, dtype=torch.float64)
    out1 = model.jointer(a, b)
    out2 = model.jointer(2 * a, -b)
    assert torch.equal(out1, out2)
    assert torch.all(out1 == 0)


def test_jointer_preactivation_linear_in_each_input():
    model = make_model(seed=3)
    a = torch.randn(4, dtype=torch.float64)
    delta = torch.randn(4, dtype=torch.float64)
    diffs = []
    for _ in range(3):
        b = torch.randn(4, dtype=torch.float64)
        diffs.append(
            model.jointer.pre_activation(a + delta, b) - model.jointer.pre_activation(a, b)
        )
    assert torch.allclose(diffs[0], diffs[1], atol=1e-12)
    assert torch.allclose(diffs[0], diffs[2], atol=1e-12)


def test_jointer_matches_explicit_matmul():
    model = Transducer(tiny_config(d_hidden=3, heads=1), seed=4).double()
    a = torch.randn(3, dtype=torch.float64)
    b = torch.randn(3, dtype=torch.float64)
    out = model.jointer(a, b).detach().numpy()
    we = model.jointer.enc_proj.weight.detach().numpy()
    be = model.jointer.enc_proj.bias.detach().numpy()
    wp = model.jointer.pred_proj.weight.detach().numpy()
    bp = model.jointer.pred_proj.bias.detach().numpy()
    ref = np.tanh(we @ a.numpy() + be + wp @ b.numpy() + bp)
    assert np.abs(out - ref).max() < 1e-12


# ---------------------------------------------------------------- output


def test_output_uniform_for_zero_logits():
    model = make_model()
    with torch.no_grad():
        model.output.fc.weight.zero_()
        model.output.fc.bias.zero_()
    lp = model.output.log_probs(torch.randn(4, dtype=torch.float64))
    width = model.config.vocab_size
    assert torch.allclose(lp, torch.full((width,), -math.log(width), dtype=torch.float64))
    assert abs(float(torch.logsumexp(lp, dim=-1))) < 1e-9


def test_output_shift_invariance():
    model = make_model(seed=7)
    h = torch.randn(4, dtype=torch.float64)
    base = model.output.log_probs(h)
    with torch.no_grad():
        model.output.fc.bias.add_(5.0)
    shifted = model.output.log_probs(h)
    assert torch.allclose(base, shifted, atol=1e-9)


def test_output_matches_direct_softmax():
    logits = np.array([1.0, 2.0, 3.0])
    ref = np.log(softmax_by_hand(logits))
    got = torch.log_softmax(torch.tensor(logits), dim=-1).numpy()
    assert np.abs(got - ref).max() < 1e-12


# ------------------------------------------------------- lookahead containment


def test_lookahead_containment_exact():
    cfg = tiny_config(shared_layers=2, lookahead_frames=1)
    model = Transducer(cfg, seed=11).double()
    tl = cfg.total_lookahead_input_frames()
    assert tl == 3 + 4 * 2

    torch.manual_seed(0)
    feats = torch.randn(1, 32, 3, dtype=torch.float64)
    base, _ = model.encode_speech(feats, torch.tensor([32]))

    for t_out in (0, 1, 3):
        first_free = 4 * t_out + tl + 1
        if first_free >= feats.shape[1]:
            continue
        bumped = feats.clone()
        bumped[0, first_free:, :] += 7.0
        out, _ = model.encode_speech(bumped, torch.tensor([32]))
        assert torch.equal(out[0, : t_out + 1], base[0, : t_out + 1])

    # sanity: a perturbation inside the window does reach the output
    bumped = feats.clone()
    bumped[0, 4 * 1 + tl, :] += 7.0
    out, _ = model.encode_speech(bumped, torch.tensor([32]))
    assert not torch.equal(out[0, 1], base[0, 1])


# ---------------------------------------------------------------- structure


def test_parameter_groups_partition():
    model = make_model()
    groups = model.parameter_groups()
    assert set(groups) == set(PARAM_GROUPS)
    names = [n for g in groups.values() for n, _ in g]
    assert len(names) == len(set(names)) == len(list(model.named_parameters()))
    assert groups["biasing"] == []


def test_seeded_init_deterministic():
    m1 = make_model(seed=21)
    m2 = make_model(seed=21)
    m3 = make_model(seed=22)
    for (n1, p1), (_, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert torch.equal(p1, p2), n1
    assert any(
        not torch.equal(p1, p3)
        for (_, p1), (_, p3) in zip(m1.named_parameters(), m3.named_parameters())
    )


def test_full_scale_preset_documented_values():
    cfg = full_scale_preset()
    assert cfg.shared_layers == 12
    assert cfg.lookahead_per_layer() == (1,) * 7 + (0,) * 5
    assert cfg.predictor_layers == 2
    assert cfg.vocab_size == 4048


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(heads=3)
    with pytest.raises(ValueError):
        tiny_config(d_hidden=0)
    with pytest.raises(ValueError):
        tiny_config(lookahead_frames=(1,))
    with pytest.raises(ValueError):
        tiny_config(lookahead_frames=-1)
